#pragma once

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "lanefusion/nn.hpp"

namespace lanefusion {

enum class Variant { V1, V2, V3, V4, V5, V3r, V4r, V3rPlus, V6 };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::V1: return "V1";
        case Variant::V2: return "V2";
        case Variant::V3: return "V3";
        case Variant::V4: return "V4";
        case Variant::V5: return "V5";
        case Variant::V3r: return "V3r";
        case Variant::V4r: return "V4r";
        case Variant::V3rPlus: return "V3r+";
        case Variant::V6: return "V6";
    }
    return "?";
}

inline Variant variant_from_name(std::string s) {
    for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (s == "v1") return Variant::V1;
    if (s == "v2") return Variant::V2;
    if (s == "v3") return Variant::V3;
    if (s == "v4") return Variant::V4;
    if (s == "v5") return Variant::V5;
    if (s == "v3r") return Variant::V3r;
    if (s == "v3r+" || s == "v3r_plus" || s == "v3rplus") return Variant::V3rPlus;
    if (s == "v4r") return Variant::V4r;
    if (s == "v6") return Variant::V6;
    throw std::invalid_argument("unknown variant name: " + s);
}

// The config space is closed: each variant pins its fusion stages and
// flags, and validate() rejects any other combination.
struct ArchitectureConfig {
    Variant variant = Variant::V1;
    bool fuse_early = false, fuse_middle = false, fuse_late = false;
    bool dense_lidar = false;
    bool multitask = false;
    bool adaptive_fuse = false;
    int base_width = 16;
    int input_height = 128;
    int input_width = 256;

    static ArchitectureConfig for_variant(Variant v, int base_width = 16, int h = 128, int w = 256) {
        ArchitectureConfig c;
        c.variant = v;
        c.base_width = base_width;
        c.input_height = h;
        c.input_width = w;
        switch (v) {
            case Variant::V1: break;
            case Variant::V2: c.fuse_early = true; break;
            case Variant::V3: c.fuse_early = true; c.dense_lidar = true; break;
            case Variant::V4: c.fuse_middle = true; c.dense_lidar = true; break;
            case Variant::V5: c.fuse_late = true; c.dense_lidar = true; break;
            case Variant::V3r: c.fuse_early = true; c.dense_lidar = true; c.multitask = true; break;
            case Variant::V4r: c.fuse_middle = true; c.dense_lidar = true; c.multitask = true; break;
            case Variant::V3rPlus:
                c.fuse_early = true; c.dense_lidar = true; c.multitask = true; c.adaptive_fuse = true;
                break;
            case Variant::V6:
                c.fuse_early = true; c.fuse_middle = true; c.dense_lidar = true;
                c.multitask = true; c.adaptive_fuse = true;
                break;
        }
        return c;
    }

    bool has_lidar() const { return variant != Variant::V1; }

    void validate() const {
        const ArchitectureConfig ref = for_variant(variant, base_width, input_height, input_width);
        if (fuse_early != ref.fuse_early || fuse_middle != ref.fuse_middle ||
            fuse_late != ref.fuse_late || dense_lidar != ref.dense_lidar ||
            multitask != ref.multitask || adaptive_fuse != ref.adaptive_fuse)
            throw std::invalid_argument(std::string("ArchitectureConfig: flags do not match variant ") +
                                        variant_name(variant));
        if (base_width < 1) throw std::invalid_argument("ArchitectureConfig: base_width must be >= 1");
        if (input_height % 16 != 0 || input_width % 16 != 0 || input_height <= 0 || input_width <= 0)
            throw std::invalid_argument("ArchitectureConfig: input size must be a positive multiple of 16");
    }

    nlohmann::json to_json() const {
        return {{"variant", variant_name(variant)},
                {"base_width", base_width},
                {"input_height", input_height},
                {"input_width", input_width}};
    }

    static ArchitectureConfig from_json(const nlohmann::json& j) {
        const Variant v = variant_from_name(j.at("variant").get<std::string>());
        ArchitectureConfig c = for_variant(v, j.value("base_width", 16), j.value("input_height", 128),
                                           j.value("input_width", 256));
        // explicit flags are allowed but must agree with the variant
        if (j.contains("fuse_early")) c.fuse_early = j.at("fuse_early").get<bool>();
        if (j.contains("fuse_middle")) c.fuse_middle = j.at("fuse_middle").get<bool>();
        if (j.contains("fuse_late")) c.fuse_late = j.at("fuse_late").get<bool>();
        if (j.contains("dense_lidar")) c.dense_lidar = j.at("dense_lidar").get<bool>();
        if (j.contains("multitask")) c.multitask = j.at("multitask").get<bool>();
        if (j.contains("adaptive_fuse")) c.adaptive_fuse = j.at("adaptive_fuse").get<bool>();
        c.validate();
        return c;
    }
};

struct SegmentationOutput {
    Tensor lane_logprob;  // {2,H,W}
    Tensor road_logprob;  // {2,H,W} when multitask, else empty
    float k = 0.0f;       // meaningful when multitask
};

enum class ModalityMask { None, Image, Lidar };

inline ModalityMask modality_from_name(std::string s) {
    for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (s == "none" || s == "both") return ModalityMask::None;
    if (s == "image") return ModalityMask::Image;
    if (s == "lidar" || s == "points") return ModalityMask::Lidar;
    throw std::invalid_argument("unknown modality: " + s);
}

// Replace the selected modality with zeros of identical shape, preserving
// the other bit for bit.
inline std::pair<Tensor, Tensor> mask_modality(const Tensor& image, const Tensor& lidar,
                                               ModalityMask which) {
    std::pair<Tensor, Tensor> out{image, lidar};
    if (which == ModalityMask::Image) out.first.fill(0.0f);
    if (which == ModalityMask::Lidar && !out.second.empty()) out.second.fill(0.0f);
    return out;
}

inline float multitask_combine_scalar(float lane, float road, float k) {
    k = std::clamp(k, 0.0f, 1.0f);
    return lane * (k + (1.0f - k) * road);
}

// analytic d/dk of the combine, valid inside the clamp
inline float multitask_combine_dk(float lane, float road) { return lane * (1.0f - road); }

// Gate the lane probability with the road probability through the scalar k.
inline Tensor multitask_combine(const Tensor& lane_prob, const Tensor& road_prob, float k) {
    if (!lane_prob.same_shape(road_prob))
        throw std::invalid_argument("multitask_combine: shape mismatch");
    Tensor out(lane_prob.shape());
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = multitask_combine_scalar(lane_prob[i], road_prob[i], k);
    return out;
}

struct ForwardVars {
    Var lane_logprob;            // {N,2,H,W}
    Var road_logprob;            // null unless multitask
};

// U-shaped trunk: 4 encoder blocks (2 and 3 residual), 5 decoder blocks
// (the last 4 transposed convolutions), skip concatenations into the
// mirrored decoder positions. The point-cloud pipeline uses plain
// convolution blocks, joined to the trunk at the configured stages, and
// multitask duplicates the last three decoder blocks per branch.
class Model {
public:
    explicit Model(const ArchitectureConfig& cfg, uint64_t init_seed = 1) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(init_seed);
        const int w = cfg_.base_width;

        enc1_ = ConvBlock::make(reg_, "enc1", 3, w, 2, rng);
        enc2_ = ResidualStage::make(reg_, "enc2", w, 2 * w, 2, rng);
        enc3_ = ResidualStage::make(reg_, "enc3", 2 * w, 4 * w, 2, rng);
        enc4_ = ConvBlock::make(reg_, "enc4", 4 * w, 8 * w, 2, rng);

        if (cfg_.has_lidar()) {
            lenc1_ = ConvBlock::make(reg_, "lenc1", 3, w, 2, rng);
            if (cfg_.fuse_middle || cfg_.fuse_late) {
                lenc2_ = ConvBlock::make(reg_, "lenc2", w, 2 * w, 2, rng);
                lenc3_ = ConvBlock::make(reg_, "lenc3", 2 * w, 4 * w, 2, rng);
                lenc4_ = ConvBlock::make(reg_, "lenc4", 4 * w, 8 * w, 2, rng);
            }
            if (cfg_.fuse_late) {
                ldec1_ = ConvBlock::make(reg_, "ldec1", 8 * w, 8 * w, 1, rng);
                ldec2_ = TConvBlock::make(reg_, "ldec2", 8 * w, 4 * w, rng);
            }
            if (cfg_.fuse_early)
                fuse_early_ = FuseBlock::make(reg_, "fuse_early", w, cfg_.adaptive_fuse, rng);
            if (cfg_.fuse_middle)
                fuse_middle_ = FuseBlock::make(reg_, "fuse_middle", 8 * w, cfg_.adaptive_fuse, rng);
            if (cfg_.fuse_late)
                fuse_late_ = FuseBlock::make(reg_, "fuse_late", 4 * w, cfg_.adaptive_fuse, rng);
        }

        dec1_ = ConvBlock::make(reg_, "dec1", 8 * w, 8 * w, 1, rng);
        dec2_ = TConvBlock::make(reg_, "dec2", 8 * w, 4 * w, rng);

        lane_branch_ = Branch::make(reg_, "lane", w, rng);
        if (cfg_.multitask) {
            road_branch_ = Branch::make(reg_, "road", w, rng);
            k_ = reg_.param_const("k", {1}, 0.5f);
        }
    }

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    Model(Model&&) = default;
    Model& operator=(Model&&) = default;

    const ArchitectureConfig& config() const { return cfg_; }
    std::vector<ParamRef>& parameters() { return reg_.params(); }
    const std::vector<ParamRef>& parameters() const { return reg_.params(); }
    std::vector<BufferRef> buffers() const { return reg_.buffers(); }
    int64_t num_params() const { return reg_.num_params(); }

    float k_value() const { return cfg_.multitask ? k_->value[0] : 1.0f; }
    void clamp_k() {
        if (cfg_.multitask) k_->value[0] = std::clamp(k_->value[0], 0.0f, 1.0f);
    }

    ForwardVars forward_batch(const Tensor& images, const Tensor* lidar, bool training) {
        const int H = cfg_.input_height, W = cfg_.input_width;
        if (images.ndim() != 4 || images.dim(1) != 3 || images.dim(2) != H || images.dim(3) != W)
            throw std::invalid_argument("forward: image batch must be {N,3," + std::to_string(H) +
                                        "," + std::to_string(W) + "}, got " + images.shape_str());
        if (cfg_.has_lidar()) {
            if (!lidar)
                throw std::invalid_argument(std::string("forward: variant ") +
                                            variant_name(cfg_.variant) + " requires a lidar input");
            if (lidar->shape() != images.shape())
                throw std::invalid_argument("forward: lidar batch shape mismatch, got " +
                                            lidar->shape_str());
        } else if (lidar) {
            throw std::invalid_argument("forward: variant V1 accepts no lidar input");
        }

        Var img = make_leaf(images);
        Var e1 = enc1_(img, training);
        Var t1 = e1;
        Var l1;
        if (cfg_.fuse_early) {
            l1 = lenc1_(make_leaf(*lidar), training);
            t1 = fuse_early_(e1, l1, training);
        }
        Var e2 = enc2_(t1, training);
        Var e3 = enc3_(e2, training);
        Var e4 = enc4_(e3, training);

        Var t4 = e4;
        Var late_feat;
        if (cfg_.fuse_middle || cfg_.fuse_late) {
            Var lc = l1 ? l1 : lenc1_(make_leaf(*lidar), training);
            lc = lenc2_(lc, training);
            lc = lenc3_(lc, training);
            lc = lenc4_(lc, training);
            if (cfg_.fuse_middle)
                t4 = fuse_middle_(e4, lc, training);
            else
                late_feat = ldec2_(ldec1_(lc, training), training);
        }

        Var d1 = dec1_(t4, training);
        Var d2 = dec2_(d1, training);
        if (cfg_.fuse_late) d2 = fuse_late_(d2, late_feat, training);
        Var shared = concat_channels(d2, e3);

        ForwardVars out;
        Var lane_logits = lane_branch_.run(shared, e2, t1, training);
        if (!cfg_.multitask) {
            out.lane_logprob = log_softmax_channels(lane_logits);
        } else {
            Var road_logits = road_branch_.run(shared, e2, t1, training);
            Var lane_p = two_class_prob(lane_logits);
            Var road_p = two_class_prob(road_logits);
            Var combined = combine_lane_road(lane_p, road_p, k_);
            out.lane_logprob = prob_to_logpair(combined);
            out.road_logprob = log_softmax_channels(road_logits);
        }
        return out;
    }

    // Single-frame inference: no graph, batch-norm running statistics.
    SegmentationOutput infer(const Tensor& image, const Tensor* lidar) {
        NoGradGuard ng;
        Tensor img({1, 3, cfg_.input_height, cfg_.input_width});
        check_shape(image, {3, cfg_.input_height, cfg_.input_width}, "infer image");
        std::copy(image.data(), image.data() + image.numel(), img.data());
        Tensor lid;
        if (lidar) {
            check_shape(*lidar, {3, cfg_.input_height, cfg_.input_width}, "infer lidar");
            lid = Tensor({1, 3, cfg_.input_height, cfg_.input_width});
            std::copy(lidar->data(), lidar->data() + lidar->numel(), lid.data());
        }
        ForwardVars fv = forward_batch(img, lidar ? &lid : nullptr, false);
        SegmentationOutput out;
        out.lane_logprob = squeeze_batch(fv.lane_logprob->value);
        if (fv.road_logprob) out.road_logprob = squeeze_batch(fv.road_logprob->value);
        out.k = k_value();
        return out;
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("Model::save: cannot open " + path);
        const std::string header = "LFCKPT1\n";
        f.write(header.data(), 8);
        const std::string js = cfg_.to_json().dump();
        write_u32(f, static_cast<uint32_t>(js.size()));
        f.write(js.data(), static_cast<std::streamsize>(js.size()));
        const auto& ps = reg_.params();
        write_u32(f, static_cast<uint32_t>(ps.size()));
        for (const auto& p : ps) write_tensor(f, p.name, p.var->value);
        const auto bs = reg_.buffers();
        write_u32(f, static_cast<uint32_t>(bs.size()));
        for (const auto& b : bs) write_tensor(f, b.name, *b.tensor);
        if (!f) throw std::runtime_error("Model::save: write failed for " + path);
    }

    static Model load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("Model::load: cannot open " + path);
        char header[8];
        f.read(header, 8);
        if (!f || std::memcmp(header, "LFCKPT1\n", 8) != 0)
            throw std::runtime_error("Model::load: bad checkpoint header in " + path);
        std::string js(read_u32(f), '\0');
        f.read(js.data(), static_cast<std::streamsize>(js.size()));
        Model m(ArchitectureConfig::from_json(nlohmann::json::parse(js)));
        const uint32_t np = read_u32(f);
        auto& ps = m.reg_.params();
        if (np != ps.size()) throw std::runtime_error("Model::load: parameter count mismatch");
        for (auto& p : ps) read_tensor(f, p.name, p.var->value);
        const uint32_t nb = read_u32(f);
        auto bs = m.reg_.buffers();
        if (nb != bs.size()) throw std::runtime_error("Model::load: buffer count mismatch");
        for (auto& b : bs) read_tensor(f, b.name, *b.tensor);
        if (!f) throw std::runtime_error("Model::load: truncated checkpoint " + path);
        return m;
    }

private:
    struct Branch {
        TConvBlock d3, d4, d5;
        Conv2dLayer head;

        static Branch make(ParamRegistry& reg, const std::string& name, int w, Rng& rng) {
            Branch b;
            b.d3 = TConvBlock::make(reg, name + ".dec3", 8 * w, 2 * w, rng);
            b.d4 = TConvBlock::make(reg, name + ".dec4", 4 * w, w, rng);
            b.d5 = TConvBlock::make(reg, name + ".dec5", 2 * w, w, rng);
            b.head = Conv2dLayer::make(reg, name + ".head", w, 2, 1, 1, 0, true, rng);
            return b;
        }
        Var run(const Var& shared, const Var& e2, const Var& t1, bool training) const {
            Var x = d3(shared, training);
            x = concat_channels(x, e2);
            x = d4(x, training);
            x = concat_channels(x, t1);
            x = d5(x, training);
            return head(x);
        }
    };

    static Tensor squeeze_batch(const Tensor& t) {
        Tensor out({t.dim(1), t.dim(2), t.dim(3)});
        std::copy(t.data(), t.data() + t.numel(), out.data());
        return out;
    }

    static void write_u32(std::ofstream& f, uint32_t v) {
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
    static uint32_t read_u32(std::ifstream& f) {
        uint32_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 4);
        return v;
    }
    static void write_tensor(std::ofstream& f, const std::string& name, const Tensor& t) {
        write_u32(f, static_cast<uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(f, static_cast<uint32_t>(t.ndim()));
        for (int i = 0; i < t.ndim(); ++i) write_u32(f, static_cast<uint32_t>(t.dim(i)));
        f.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    static void read_tensor(std::ifstream& f, const std::string& expect_name, Tensor& t) {
        std::string name(read_u32(f), '\0');
        f.read(name.data(), static_cast<std::streamsize>(name.size()));
        if (name != expect_name)
            throw std::runtime_error("checkpoint entry mismatch: expected " + expect_name + ", got " +
                                     name);
        std::vector<int> shape(read_u32(f));
        for (auto& d : shape) d = static_cast<int>(read_u32(f));
        if (shape != t.shape()) throw std::runtime_error("checkpoint shape mismatch for " + name);
        f.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }

    ArchitectureConfig cfg_;
    ParamRegistry reg_;
    ConvBlock enc1_, enc4_, dec1_;
    ResidualStage enc2_, enc3_;
    TConvBlock dec2_;
    ConvBlock lenc1_, lenc2_, lenc3_, lenc4_, ldec1_;
    TConvBlock ldec2_;
    FuseBlock fuse_early_, fuse_middle_, fuse_late_;
    Branch lane_branch_, road_branch_;
    Var k_;
};

inline Model build_model(const ArchitectureConfig& cfg, uint64_t init_seed = 1) {
    return Model(cfg, init_seed);
}

}  // namespace lanefusion
