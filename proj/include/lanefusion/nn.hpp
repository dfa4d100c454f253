#pragma once

#include <memory>
#include <string>
#include <vector>

#include "lanefusion/ops.hpp"
#include "lanefusion/rng.hpp"

namespace lanefusion {

struct ParamRef {
    std::string name;
    Var var;
};
struct BufferRef {
    std::string name;
    Tensor* tensor;
};

// Owns every trainable parameter and persistent buffer of a model, in
// registration order. That order is the serialization order, so model
// construction must be deterministic.
class ParamRegistry {
public:
    Var param(const std::string& name, std::vector<int> shape, float stddev, Rng& rng) {
        Tensor t(shape);
        for (int64_t i = 0; i < t.numel(); ++i)
            t[i] = static_cast<float>(rng.normal(0.0, stddev));
        return add(name, std::move(t));
    }

    Var param_const(const std::string& name, std::vector<int> shape, float fill) {
        return add(name, Tensor(std::move(shape), fill));
    }

    Tensor* buffer(const std::string& name, std::vector<int> shape, float fill) {
        buffers_.push_back({name, std::make_unique<Tensor>(std::move(shape), fill)});
        return buffers_.back().tensor.get();
    }

    std::vector<ParamRef>& params() { return params_; }
    const std::vector<ParamRef>& params() const { return params_; }
    std::vector<BufferRef> buffers() const {
        std::vector<BufferRef> out;
        for (const auto& b : buffers_) out.push_back({b.name, b.tensor.get()});
        return out;
    }

    int64_t num_params() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p.var->value.numel();
        return n;
    }

private:
    Var add(const std::string& name, Tensor t) {
        Var v = make_leaf(std::move(t), true);
        params_.push_back({name, v});
        return v;
    }

    struct OwnedBuffer {
        std::string name;
        std::unique_ptr<Tensor> tensor;
    };
    std::vector<ParamRef> params_;
    std::vector<OwnedBuffer> buffers_;
};

inline float he_std(int fan_in) { return std::sqrt(2.0f / static_cast<float>(fan_in)); }

struct Conv2dLayer {
    Var w, b;
    int stride = 1, pad = 1;

    static Conv2dLayer make(ParamRegistry& reg, const std::string& name, int cin, int cout, int k,
                            int stride, int pad, bool bias, Rng& rng) {
        Conv2dLayer l;
        l.stride = stride;
        l.pad = pad;
        l.w = reg.param(name + ".w", {cout, cin, k, k}, he_std(cin * k * k), rng);
        if (bias) l.b = reg.param_const(name + ".b", {cout}, 0.0f);
        return l;
    }
    Var operator()(const Var& x) const { return conv2d(x, w, b, stride, pad); }
};

struct BatchNorm2dLayer {
    Var gamma, beta;
    Tensor* running_mean = nullptr;
    Tensor* running_var = nullptr;

    static BatchNorm2dLayer make(ParamRegistry& reg, const std::string& name, int c) {
        BatchNorm2dLayer l;
        l.gamma = reg.param_const(name + ".gamma", {c}, 1.0f);
        l.beta = reg.param_const(name + ".beta", {c}, 0.0f);
        l.running_mean = reg.buffer(name + ".running_mean", {c}, 0.0f);
        l.running_var = reg.buffer(name + ".running_var", {c}, 1.0f);
        return l;
    }
    Var operator()(const Var& x, bool training) const {
        return batch_norm2d(x, gamma, beta, *running_mean, *running_var, training);
    }
};

// conv 3x3 + batch norm + relu
struct ConvBlock {
    Conv2dLayer conv;
    BatchNorm2dLayer bn;

    static ConvBlock make(ParamRegistry& reg, const std::string& name, int cin, int cout,
                          int stride, Rng& rng) {
        ConvBlock b;
        b.conv = Conv2dLayer::make(reg, name + ".conv", cin, cout, 3, stride, 1, false, rng);
        b.bn = BatchNorm2dLayer::make(reg, name + ".bn", cout);
        return b;
    }
    Var operator()(const Var& x, bool training) const { return relu(bn(conv(x), training)); }
};

// transposed conv 3x3 stride 2 (doubles the spatial size) + batch norm + relu
struct TConvBlock {
    Var w;
    BatchNorm2dLayer bn;

    static TConvBlock make(ParamRegistry& reg, const std::string& name, int cin, int cout, Rng& rng) {
        TConvBlock b;
        b.w = reg.param(name + ".w", {cin, cout, 3, 3}, he_std(cin * 9), rng);
        b.bn = BatchNorm2dLayer::make(reg, name + ".bn", cout);
        return b;
    }
    Var operator()(const Var& x, bool training) const {
        return relu(bn(conv_transpose2d(x, w, 2, 1, 1), training));
    }
};

// Two basic residual units; the first one downsamples and projects the
// shortcut with a strided 1x1 convolution.
struct ResidualStage {
    Conv2dLayer c1a, c1b, proj, c2a, c2b;
    BatchNorm2dLayer b1a, b1b, bproj, b2a, b2b;

    static ResidualStage make(ParamRegistry& reg, const std::string& name, int cin, int cout,
                              int stride, Rng& rng) {
        ResidualStage s;
        s.c1a = Conv2dLayer::make(reg, name + ".u1.conv1", cin, cout, 3, stride, 1, false, rng);
        s.b1a = BatchNorm2dLayer::make(reg, name + ".u1.bn1", cout);
        s.c1b = Conv2dLayer::make(reg, name + ".u1.conv2", cout, cout, 3, 1, 1, false, rng);
        s.b1b = BatchNorm2dLayer::make(reg, name + ".u1.bn2", cout);
        s.proj = Conv2dLayer::make(reg, name + ".u1.proj", cin, cout, 1, stride, 0, false, rng);
        s.bproj = BatchNorm2dLayer::make(reg, name + ".u1.bnproj", cout);
        s.c2a = Conv2dLayer::make(reg, name + ".u2.conv1", cout, cout, 3, 1, 1, false, rng);
        s.b2a = BatchNorm2dLayer::make(reg, name + ".u2.bn1", cout);
        s.c2b = Conv2dLayer::make(reg, name + ".u2.conv2", cout, cout, 3, 1, 1, false, rng);
        s.b2b = BatchNorm2dLayer::make(reg, name + ".u2.bn2", cout);
        return s;
    }

    Var operator()(const Var& x, bool training) const {
        Var h = relu(b1a(c1a(x), training));
        h = b1b(c1b(h), training);
        Var sc = bproj(proj(x), training);
        Var u1 = relu(add(h, sc));
        Var h2 = relu(b2a(c2a(u1), training));
        h2 = b2b(c2b(h2), training);
        return relu(add(h2, u1));
    }
};

// Fusion junction. Both flavors concatenate to 2C and map back to C:
// the plain one with a single 3x3 convolution, the adaptive one with a
// depthwise 3x3 followed by a pointwise 1x1.
struct FuseBlock {
    bool adaptive = false;
    Conv2dLayer conv;      // plain path
    Var dw;                // depthwise weights {2C,1,3,3}
    Conv2dLayer pw;        // pointwise 1x1, 2C -> C
    BatchNorm2dLayer bn;

    static FuseBlock make(ParamRegistry& reg, const std::string& name, int c, bool adaptive,
                          Rng& rng) {
        FuseBlock f;
        f.adaptive = adaptive;
        if (adaptive) {
            f.dw = reg.param(name + ".dw", {2 * c, 1, 3, 3}, he_std(9), rng);
            f.pw = Conv2dLayer::make(reg, name + ".pw", 2 * c, c, 1, 1, 0, false, rng);
        } else {
            f.conv = Conv2dLayer::make(reg, name + ".conv", 2 * c, c, 3, 1, 1, false, rng);
        }
        f.bn = BatchNorm2dLayer::make(reg, name + ".bn", c);
        return f;
    }

    Var operator()(const Var& a, const Var& b, bool training) const {
        Var cat = concat_channels(a, b);
        Var h = adaptive ? pw(conv2d_depthwise(cat, dw, 1, 1)) : conv(cat);
        return relu(bn(h, training));
    }
};

}  // namespace lanefusion
