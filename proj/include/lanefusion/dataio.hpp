#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lanefusion/geometry.hpp"
#include "lanefusion/png_io.hpp"
#include "lanefusion/rng.hpp"
#include "lanefusion/tensor.hpp"

namespace lanefusion {

struct Mask {
    int width = 0, height = 0;
    std::vector<uint8_t> v;  // strictly 0/1

    Mask() = default;
    Mask(int w, int h) : width(w), height(h), v(static_cast<size_t>(w) * h, 0) {}
    bool empty() const { return v.empty(); }
    uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * width + x]; }
    uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * width + x]; }
};

// One aligned sample. The lidar tensor is the projected + composed pseudo
// image; it is empty until a preprocessing step fills it, and geometric
// augmentation warps it together with the image so the modalities stay
// registered.
struct FrameRecord {
    Tensor image;      // {3,H,W}, values in [0,1]
    PointCloud cloud;
    Calibration calib;
    Tensor lidar;      // {3,H,W} or empty
    Mask lane_mask;
    Mask road_mask;    // optional, empty when absent
};

inline void validate_frame(const FrameRecord& f) {
    if (f.image.ndim() != 3 || f.image.dim(0) != 3)
        throw std::invalid_argument("FrameRecord: image must be {3,H,W}");
    const int h = f.image.dim(1), w = f.image.dim(2);
    if (f.lane_mask.height != h || f.lane_mask.width != w)
        throw std::invalid_argument("FrameRecord: lane mask size mismatch");
    if (!f.road_mask.empty() && (f.road_mask.height != h || f.road_mask.width != w))
        throw std::invalid_argument("FrameRecord: road mask size mismatch");
    if (!f.lidar.empty() && f.lidar.shape() != std::vector<int>{3, h, w})
        throw std::invalid_argument("FrameRecord: lidar map size mismatch");
    for (int64_t i = 0; i < f.image.numel(); ++i)
        if (!(f.image[i] >= 0.0f && f.image[i] <= 1.0f))
            throw std::invalid_argument("FrameRecord: image values outside [0,1]");
    for (uint8_t m : f.lane_mask.v)
        if (m > 1) throw std::invalid_argument("FrameRecord: lane mask not binary");
    for (uint8_t m : f.road_mask.v)
        if (m > 1) throw std::invalid_argument("FrameRecord: road mask not binary");
}

// ---------------------------------------------------------------------------
// calibration files
// ---------------------------------------------------------------------------

namespace detail {
inline bool parse_row(const std::string& text, const std::string& key, std::vector<double>& out,
                      size_t want) {
    std::istringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        if (line.rfind(key + ":", 0) != 0) continue;
        std::istringstream ls(line.substr(key.size() + 1));
        out.clear();
        double v;
        while (ls >> v) out.push_back(v);
        return out.size() == want;
    }
    return false;
}
}  // namespace detail

// Supports two layouts: native rows "K:" (9), "R:" (9), "T:" (3), or the
// KITTI pair "P2:" (12) and "Tr_velo_to_cam:" (12). The KITTI projection
// P2 * [Tr; 0 0 0 1] factors into K [R|T] with K = P2[:,:3] and the extra
// camera-frame offset K^-1 * P2[:,3] folded into T.
inline Calibration parse_calibration(const std::string& text) {
    if (text.empty()) throw std::runtime_error("parse_calibration: empty input");
    std::vector<double> k, r, t;
    const bool native = detail::parse_row(text, "K", k, 9);
    Calibration c;
    if (native) {
        if (!detail::parse_row(text, "R", r, 9))
            throw std::runtime_error("parse_calibration: missing or malformed row R");
        if (!detail::parse_row(text, "T", t, 3))
            throw std::runtime_error("parse_calibration: missing or malformed row T");
        c.K = Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(k.data());
        c.R = Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(r.data());
        c.T = Eigen::Map<Eigen::Vector3d>(t.data());
    } else {
        std::vector<double> p2, tr;
        if (!detail::parse_row(text, "P2", p2, 12))
            throw std::runtime_error("parse_calibration: missing or malformed row K (or P2)");
        if (!detail::parse_row(text, "Tr_velo_to_cam", tr, 12) && !detail::parse_row(text, "Tr", tr, 12))
            throw std::runtime_error("parse_calibration: missing or malformed row Tr_velo_to_cam");
        Eigen::Map<Eigen::Matrix<double, 3, 4, Eigen::RowMajor>> P2(p2.data());
        Eigen::Map<Eigen::Matrix<double, 3, 4, Eigen::RowMajor>> Tr(tr.data());
        c.K = P2.leftCols<3>();
        c.R = Tr.leftCols<3>();
        c.T = Tr.col(3) + c.K.inverse() * P2.col(3);
    }
    c.validate();
    return c;
}

inline std::string serialize_calibration(const Calibration& c) {
    std::ostringstream ss;
    ss.precision(17);
    ss << "K:";
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) ss << " " << c.K(i, j);
    ss << "\nR:";
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) ss << " " << c.R(i, j);
    ss << "\nT:";
    for (int i = 0; i < 3; ++i) ss << " " << c.T(i);
    ss << "\n";
    return ss.str();
}

// ---------------------------------------------------------------------------
// point cloud binary (packed little-endian x,y,z,reflectance float32)
// ---------------------------------------------------------------------------

inline PointCloud load_point_cloud(const std::vector<uint8_t>& bytes) {
    if (bytes.size() % 16 != 0)
        throw std::runtime_error("load_point_cloud: truncated record, size " +
                                 std::to_string(bytes.size()) + " is not a multiple of 16");
    PointCloud cloud;
    cloud.points.reserve(bytes.size() / 16);
    for (size_t off = 0; off < bytes.size(); off += 16) {
        float v[4];
        std::memcpy(v, bytes.data() + off, 16);
        if (!std::isfinite(v[0]) || !std::isfinite(v[1]) || !std::isfinite(v[2])) continue;
        LidarPoint p;
        p.x = v[0];
        p.y = v[1];
        p.z = v[2];
        p.reflectance = std::isfinite(v[3]) ? std::clamp(v[3], 0.0f, 1.0f) : 0.0f;
        cloud.points.push_back(p);
    }
    return cloud;
}

inline std::vector<uint8_t> serialize_point_cloud(const PointCloud& cloud) {
    std::vector<uint8_t> bytes(cloud.points.size() * 16);
    for (size_t i = 0; i < cloud.points.size(); ++i) {
        float v[4] = {cloud.points[i].x, cloud.points[i].y, cloud.points[i].z,
                      cloud.points[i].reflectance};
        std::memcpy(bytes.data() + i * 16, v, 16);
    }
    return bytes;
}

// ---------------------------------------------------------------------------
// dataset split
// ---------------------------------------------------------------------------

struct DatasetSplit {
    std::vector<int> train, val, test;
};

// 60/10/30 with floor rounding for train and val; the remainder tests.
inline DatasetSplit split_dataset(int n, uint64_t seed) {
    if (n < 10) throw std::invalid_argument("split_dataset: need at least 10 records");
    std::vector<int> perm(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
    Rng rng(seed);
    rng.shuffle(perm);
    const int ntrain = static_cast<int>(std::floor(0.6 * n));
    const int nval = static_cast<int>(std::floor(0.1 * n));
    DatasetSplit s;
    s.train.assign(perm.begin(), perm.begin() + ntrain);
    s.val.assign(perm.begin() + ntrain, perm.begin() + ntrain + nval);
    s.test.assign(perm.begin() + ntrain + nval, perm.end());
    return s;
}

// ---------------------------------------------------------------------------
// image / mask PNG carriers
// ---------------------------------------------------------------------------

inline void save_image_tensor(const std::string& path, const Tensor& img) {
    if (img.ndim() != 3 || img.dim(0) != 3) throw std::invalid_argument("save_image_tensor: want {3,H,W}");
    const int h = img.dim(1), w = img.dim(2);
    PngImage out;
    out.width = w;
    out.height = h;
    out.channels = 3;
    out.pixels.resize(static_cast<size_t>(w) * h * 3);
    const int64_t plane = static_cast<int64_t>(h) * w;
    for (int64_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c) {
            const float v = std::clamp(img[c * plane + i], 0.0f, 1.0f);
            out.pixels[static_cast<size_t>(i) * 3 + c] = static_cast<uint8_t>(std::lround(v * 255.0f));
        }
    write_png(path, out);
}

inline Tensor load_image_tensor(const std::string& path) {
    PngImage in = read_png(path);
    Tensor img({3, in.height, in.width});
    const int64_t plane = static_cast<int64_t>(in.height) * in.width;
    for (int64_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c) {
            const int src = in.channels == 3 ? static_cast<int>(i * 3 + c) : static_cast<int>(i);
            img[c * plane + i] = static_cast<float>(in.pixels[static_cast<size_t>(src)]) / 255.0f;
        }
    return img;
}

inline void save_mask(const std::string& path, const Mask& m) {
    PngImage out;
    out.width = m.width;
    out.height = m.height;
    out.channels = 1;
    out.pixels.resize(m.v.size());
    for (size_t i = 0; i < m.v.size(); ++i) out.pixels[i] = m.v[i] ? 255 : 0;
    write_png(path, out);
}

inline Mask load_mask(const std::string& path) {
    PngImage in = read_png(path);
    Mask m(in.width, in.height);
    const size_t stride = static_cast<size_t>(in.channels);
    for (size_t i = 0; i < m.v.size(); ++i) m.v[i] = in.pixels[i * stride] >= 128 ? 1 : 0;
    return m;
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

struct ManifestEntry {
    std::string image, cloud, calib, lane_mask;
    std::string road_mask;  // optional
    std::string lidar_map;  // optional, written by preprocessing
};

struct Manifest {
    std::vector<ManifestEntry> frames;
};

inline void write_manifest(const std::string& path, const Manifest& m) {
    nlohmann::json j;
    j["frames"] = nlohmann::json::array();
    for (const auto& e : m.frames) {
        nlohmann::json f;
        f["image"] = e.image;
        f["cloud"] = e.cloud;
        f["calib"] = e.calib;
        f["lane_mask"] = e.lane_mask;
        if (!e.road_mask.empty()) f["road_mask"] = e.road_mask;
        if (!e.lidar_map.empty()) f["lidar_map"] = e.lidar_map;
        j["frames"].push_back(f);
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_manifest: cannot open " + path);
    out << j.dump(2) << "\n";
}

inline Manifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_manifest: cannot open " + path);
    nlohmann::json j;
    in >> j;
    Manifest m;
    for (const auto& f : j.at("frames")) {
        ManifestEntry e;
        e.image = f.at("image").get<std::string>();
        e.cloud = f.at("cloud").get<std::string>();
        e.calib = f.at("calib").get<std::string>();
        e.lane_mask = f.at("lane_mask").get<std::string>();
        if (f.contains("road_mask")) e.road_mask = f.at("road_mask").get<std::string>();
        if (f.contains("lidar_map")) e.lidar_map = f.at("lidar_map").get<std::string>();
        m.frames.push_back(e);
    }
    return m;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::vector<uint8_t> read_binary_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_binary_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline FrameRecord load_frame(const std::string& manifest_dir, const ManifestEntry& e) {
    namespace fs = std::filesystem;
    auto resolve = [&](const std::string& rel) { return (fs::path(manifest_dir) / rel).string(); };
    FrameRecord f;
    f.image = load_image_tensor(resolve(e.image));
    f.cloud = load_point_cloud(read_binary_file(resolve(e.cloud)));
    f.calib = parse_calibration(read_text_file(resolve(e.calib)));
    f.lane_mask = load_mask(resolve(e.lane_mask));
    if (!e.road_mask.empty()) f.road_mask = load_mask(resolve(e.road_mask));
    if (!e.lidar_map.empty()) f.lidar = load_image_tensor(resolve(e.lidar_map));
    validate_frame(f);
    return f;
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

enum class AugKind {
    Perspective,    // corner jitter, fraction of image size in [lo,hi]
    Rotation,       // angle in degrees drawn from [lo,hi]
    Flip,           // horizontal mirror with probability hi
    Brightness,     // multiplicative factor in [lo,hi]
    Contrast,       // factor in [lo,hi] around the image mean
    GaussianNoise,  // sigma in [lo,hi]
    RandomCrop,     // window scale in [lo,hi], resized back
    LaneErase       // erased box half-size in pixels, in [lo,hi]
};

struct AugOp {
    AugKind kind;
    double lo = 0.0, hi = 0.0;
};

struct AugmentationPlan {
    std::vector<AugOp> ops;
    uint64_t seed = 0;
};

inline AugmentationPlan default_augmentation_plan(uint64_t seed) {
    AugmentationPlan p;
    p.seed = seed;
    p.ops = {
        {AugKind::Perspective, 0.0, 0.04},   {AugKind::Rotation, -6.0, 6.0},
        {AugKind::Flip, 0.0, 0.5},           {AugKind::Brightness, 0.75, 1.25},
        {AugKind::Contrast, 0.75, 1.25},     {AugKind::GaussianNoise, 0.005, 0.02},
        {AugKind::RandomCrop, 0.8, 0.95},    {AugKind::LaneErase, 6.0, 18.0},
    };
    return p;
}

namespace detail {

// Sample all float planes with bilinear interpolation and the masks with
// nearest neighbor, through the output-to-source homography. Out-of-frame
// samples become zero (background).
inline void warp_frame(FrameRecord& f, const Eigen::Matrix3d& h_out_to_src) {
    const int H = f.image.dim(1), W = f.image.dim(2);
    const int64_t plane = static_cast<int64_t>(H) * W;
    const bool has_lidar = !f.lidar.empty();
    Tensor img({3, H, W}), lid;
    if (has_lidar) lid = Tensor({3, H, W});
    Mask lane(W, H), road;
    if (!f.road_mask.empty()) road = Mask(W, H);

    auto bilinear = [&](const Tensor& src, int c, double sx, double sy) -> float {
        const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
        const double fx = sx - x0, fy = sy - y0;
        auto px = [&](int xx, int yy) -> double {
            if (xx < 0 || xx >= W || yy < 0 || yy >= H) return 0.0;
            return src[c * plane + static_cast<int64_t>(yy) * W + xx];
        };
        const double v = (1 - fx) * (1 - fy) * px(x0, y0) + fx * (1 - fy) * px(x0 + 1, y0) +
                         (1 - fx) * fy * px(x0, y0 + 1) + fx * fy * px(x0 + 1, y0 + 1);
        return static_cast<float>(v);
    };

    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const Eigen::Vector3d s = h_out_to_src * Eigen::Vector3d(x, y, 1.0);
            const double sx = s.x() / s.z(), sy = s.y() / s.z();
            const int64_t o = static_cast<int64_t>(y) * W + x;
            for (int c = 0; c < 3; ++c) {
                img[c * plane + o] = bilinear(f.image, c, sx, sy);
                if (has_lidar) lid[c * plane + o] = bilinear(f.lidar, c, sx, sy);
            }
            const int nx = static_cast<int>(std::lround(sx)), ny = static_cast<int>(std::lround(sy));
            const bool inside = nx >= 0 && nx < W && ny >= 0 && ny < H;
            lane.v[static_cast<size_t>(o)] = inside ? f.lane_mask.at(ny, nx) : 0;
            if (!road.empty()) road.v[static_cast<size_t>(o)] = inside ? f.road_mask.at(ny, nx) : 0;
        }
    f.image = std::move(img);
    if (has_lidar) f.lidar = std::move(lid);
    f.lane_mask = std::move(lane);
    if (!road.empty()) f.road_mask = std::move(road);
}

inline void flip_horizontal(FrameRecord& f) {
    const int H = f.image.dim(1), W = f.image.dim(2);
    const int64_t plane = static_cast<int64_t>(H) * W;
    auto flip_tensor = [&](Tensor& t) {
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < H; ++y) {
                float* row = t.data() + c * plane + static_cast<int64_t>(y) * W;
                std::reverse(row, row + W);
            }
    };
    flip_tensor(f.image);
    if (!f.lidar.empty()) flip_tensor(f.lidar);
    auto flip_mask = [&](Mask& m) {
        for (int y = 0; y < H; ++y) {
            uint8_t* row = m.v.data() + static_cast<size_t>(y) * W;
            std::reverse(row, row + W);
        }
    };
    flip_mask(f.lane_mask);
    if (!f.road_mask.empty()) flip_mask(f.road_mask);
}

// homography sending each dst corner to the given src corner
inline Eigen::Matrix3d homography_from_corners(const std::array<Eigen::Vector2d, 4>& dst,
                                               const std::array<Eigen::Vector2d, 4>& src) {
    Eigen::Matrix<double, 8, 8> A = Eigen::Matrix<double, 8, 8>::Zero();
    Eigen::Matrix<double, 8, 1> b;
    for (int i = 0; i < 4; ++i) {
        const double x = dst[i].x(), y = dst[i].y();
        const double u = src[i].x(), v = src[i].y();
        A.row(2 * i) << x, y, 1, 0, 0, 0, -u * x, -u * y;
        A.row(2 * i + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y;
        b(2 * i) = u;
        b(2 * i + 1) = v;
    }
    const Eigen::Matrix<double, 8, 1> h = A.colPivHouseholderQr().solve(b);
    Eigen::Matrix3d Hm;
    Hm << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0;
    return Hm;
}

inline void clamp_image(Tensor& t) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = std::clamp(t[i], 0.0f, 1.0f);
}

}  // namespace detail

// Geometric ops warp image, lidar planes and masks together; photometric
// ops touch the image only. Replayable: results depend only on the frame
// and the plan seed.
inline FrameRecord augment_frame(const FrameRecord& frame, const AugmentationPlan& plan) {
    validate_frame(frame);
    FrameRecord f = frame;
    Rng rng(plan.seed);
    const int H = f.image.dim(1), W = f.image.dim(2);
    const int64_t plane = static_cast<int64_t>(H) * W;

    for (const auto& op : plan.ops) {
        switch (op.kind) {
            case AugKind::Flip: {
                if (rng.uniform() < op.hi) detail::flip_horizontal(f);
                break;
            }
            case AugKind::Rotation: {
                const double deg = rng.uniform(op.lo, op.hi);
                const double a = -deg * M_PI / 180.0;  // inverse rotation
                const double cx = (W - 1) / 2.0, cy = (H - 1) / 2.0;
                Eigen::Matrix3d Hm;
                Hm << std::cos(a), -std::sin(a), cx - cx * std::cos(a) + cy * std::sin(a),
                      std::sin(a), std::cos(a), cy - cx * std::sin(a) - cy * std::cos(a),
                      0, 0, 1;
                detail::warp_frame(f, Hm);
                break;
            }
            case AugKind::Perspective: {
                const double j = rng.uniform(op.lo, op.hi);
                std::array<Eigen::Vector2d, 4> dst = {
                    Eigen::Vector2d(0, 0), Eigen::Vector2d(W - 1, 0), Eigen::Vector2d(0, H - 1),
                    Eigen::Vector2d(W - 1, H - 1)};
                std::array<Eigen::Vector2d, 4> src;
                for (int i = 0; i < 4; ++i)
                    src[i] = dst[i] + Eigen::Vector2d(rng.uniform(-j, j) * W, rng.uniform(-j, j) * H);
                detail::warp_frame(f, detail::homography_from_corners(dst, src));
                break;
            }
            case AugKind::RandomCrop: {
                const double s = rng.uniform(op.lo, op.hi);
                const double ox = rng.uniform(0.0, (1.0 - s) * W);
                const double oy = rng.uniform(0.0, (1.0 - s) * H);
                Eigen::Matrix3d Hm = Eigen::Matrix3d::Identity();
                Hm(0, 0) = s;
                Hm(1, 1) = s;
                Hm(0, 2) = ox;
                Hm(1, 2) = oy;
                detail::warp_frame(f, Hm);
                break;
            }
            case AugKind::Brightness: {
                const float b = static_cast<float>(rng.uniform(op.lo, op.hi));
                for (int64_t i = 0; i < f.image.numel(); ++i) f.image[i] *= b;
                detail::clamp_image(f.image);
                break;
            }
            case AugKind::Contrast: {
                const float c = static_cast<float>(rng.uniform(op.lo, op.hi));
                double mean = 0.0;
                for (int64_t i = 0; i < f.image.numel(); ++i) mean += f.image[i];
                const float m = static_cast<float>(mean / f.image.numel());
                for (int64_t i = 0; i < f.image.numel(); ++i)
                    f.image[i] = (f.image[i] - m) * c + m;
                detail::clamp_image(f.image);
                break;
            }
            case AugKind::GaussianNoise: {
                const double sigma = rng.uniform(op.lo, op.hi);
                for (int64_t i = 0; i < f.image.numel(); ++i)
                    f.image[i] += static_cast<float>(rng.normal(0.0, sigma));
                detail::clamp_image(f.image);
                break;
            }
            case AugKind::LaneErase: {
                std::vector<int64_t> lane_px;
                for (int64_t i = 0; i < plane; ++i)
                    if (f.lane_mask.v[static_cast<size_t>(i)]) lane_px.push_back(i);
                if (lane_px.empty()) break;
                const int64_t pick = lane_px[rng.below(lane_px.size())];
                const int py = static_cast<int>(pick / W), px = static_cast<int>(pick % W);
                const int r = static_cast<int>(std::lround(rng.uniform(op.lo, op.hi)));
                for (int y = std::max(0, py - r); y <= std::min(H - 1, py + r); ++y)
                    for (int x = std::max(0, px - r); x <= std::min(W - 1, px + r); ++x) {
                        const int64_t o = static_cast<int64_t>(y) * W + x;
                        if (!f.lane_mask.v[static_cast<size_t>(o)]) continue;
                        for (int c = 0; c < 3; ++c) f.image[c * plane + o] = 0.0f;
                    }
                break;
            }
        }
    }
    return f;
}

// ---------------------------------------------------------------------------
// synthetic frames
// ---------------------------------------------------------------------------

struct SyntheticConfig {
    int height = 128;
    int width = 256;
    int lane_count = 3;            // parallel stripes, at least 2
    double coverage_ratio = 0.015;  // projected lidar pixels / image pixels
};

// Renders a perspective road scene by casting a ray per pixel onto the
// ground plane. The masks come from the same geometry, so they are
// consistent with the image by construction, and the simulated cloud is
// sampled from ground hits so its projection matches the requested
// coverage.
inline FrameRecord generate_synthetic_frame(uint64_t seed, const SyntheticConfig& cfg = {}) {
    if (cfg.lane_count < 2) throw std::invalid_argument("generate_synthetic_frame: lane_count >= 2");
    if (cfg.width <= 0 || cfg.height <= 0)
        throw std::invalid_argument("generate_synthetic_frame: bad image size");
    if (cfg.coverage_ratio < 0.0 || cfg.coverage_ratio > 1.0)
        throw std::invalid_argument("generate_synthetic_frame: coverage_ratio in [0,1]");
    Rng rng(seed);
    const int W = cfg.width, H = cfg.height;
    const int64_t plane = static_cast<int64_t>(H) * W;

    FrameRecord f;
    f.calib.K << rng.uniform(110, 135), 0, W / 2.0 + rng.uniform(-4, 4),
                 0, rng.uniform(110, 135), H / 2.0 + rng.uniform(-4, 4),
                 0, 0, 1;
    f.calib.R << 0, -1, 0,
                 0, 0, -1,
                 1, 0, 0;   // sensor x forward, y left, z up -> camera x right, y down, z forward
    f.calib.T = Eigen::Vector3d(rng.uniform(-0.05, 0.05), rng.uniform(-0.2, 0.1),
                                rng.uniform(-0.3, 0.3));
    f.calib.validate();

    const double sensor_h = rng.uniform(1.55, 1.85);
    const double half_width = rng.uniform(3.2, 5.0);
    const double c0 = rng.uniform(-0.8, 0.8);
    const double c1 = rng.uniform(-0.02, 0.02);
    const double c2 = rng.uniform(-0.0012, 0.0012);
    const double x_near = 1.0, x_far = 120.0;

    const int stripes = cfg.lane_count;
    std::vector<double> offset(stripes), stripe_w(stripes), dash_phase(stripes);
    std::vector<bool> dashed(stripes);
    const double lane_span = half_width - rng.uniform(0.6, 1.0);
    for (int i = 0; i < stripes; ++i) {
        offset[static_cast<size_t>(i)] = -lane_span + 2.0 * lane_span * i / (stripes - 1);
        stripe_w[static_cast<size_t>(i)] = rng.uniform(0.16, 0.26);
        dashed[static_cast<size_t>(i)] = i != 0 && i != stripes - 1;
        dash_phase[static_cast<size_t>(i)] = rng.uniform(0.0, 6.0);
    }

    const std::array<double, 3> asphalt = {0.30 + rng.uniform(-0.04, 0.04),
                                           0.30 + rng.uniform(-0.04, 0.04),
                                           0.33 + rng.uniform(-0.04, 0.04)};
    const std::array<double, 3> paint = {0.90 + rng.uniform(-0.05, 0.03),
                                         0.88 + rng.uniform(-0.05, 0.03),
                                         0.78 + rng.uniform(-0.05, 0.03)};
    const std::array<double, 3> terrain = {0.16 + rng.uniform(-0.04, 0.04),
                                           0.24 + rng.uniform(-0.04, 0.04),
                                           0.12 + rng.uniform(-0.03, 0.03)};
    const std::array<double, 3> sky_top = {0.50, 0.62, 0.82};
    const std::array<double, 3> sky_low = {0.74, 0.78, 0.84};

    f.image = Tensor({3, H, W});
    f.lane_mask = Mask(W, H);
    f.road_mask = Mask(W, H);

    const Eigen::Matrix3d Kinv = f.calib.K.inverse();
    const Eigen::Matrix3d Rt = f.calib.R.transpose();
    const Eigen::Vector3d origin = -Rt * f.calib.T;  // camera center, sensor frame

    enum class Material { Sky, Terrain, Road, Stripe };
    struct GroundHit {
        Eigen::Vector3d p;
        Material mat;
        int64_t pixel;
    };
    std::vector<GroundHit> hits;
    hits.reserve(static_cast<size_t>(plane) / 2);

    auto classify = [&](const Eigen::Vector3d& g) -> Material {
        if (g.x() < x_near || g.x() > x_far) return Material::Terrain;
        const double center = c0 + c1 * g.x() + c2 * g.x() * g.x();
        const double lat = g.y() - center;
        if (std::abs(lat) > half_width) return Material::Terrain;
        for (int i = 0; i < stripes; ++i) {
            if (std::abs(lat - offset[static_cast<size_t>(i)]) > stripe_w[static_cast<size_t>(i)] / 2)
                continue;
            if (dashed[static_cast<size_t>(i)]) {
                const double t = std::fmod(g.x() + dash_phase[static_cast<size_t>(i)], 6.0);
                if (t > 3.0) continue;  // 3 m dash, 3 m gap
            }
            return Material::Stripe;
        }
        return Material::Road;
    };

    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const int64_t o = static_cast<int64_t>(y) * W + x;
            const Eigen::Vector3d dir = Rt * (Kinv * Eigen::Vector3d(x + 0.5, y + 0.5, 1.0));
            std::array<double, 3> col;
            Material mat = Material::Sky;
            Eigen::Vector3d g = Eigen::Vector3d::Zero();
            if (dir.z() < -1e-9) {
                const double t = (-sensor_h - origin.z()) / dir.z();
                g = origin + t * dir;
                if (t > 0 && g.x() > 0.3) mat = classify(g);
            }
            switch (mat) {
                case Material::Sky: {
                    const double a = static_cast<double>(y) / H;
                    for (int c = 0; c < 3; ++c) col[static_cast<size_t>(c)] =
                        sky_top[static_cast<size_t>(c)] * (1 - a) + sky_low[static_cast<size_t>(c)] * a;
                    break;
                }
                case Material::Terrain: col = terrain; break;
                case Material::Road: col = asphalt; break;
                case Material::Stripe: col = paint; break;
            }
            if (mat != Material::Sky) {
                const double fade = std::clamp(1.0 - g.norm() / 400.0, 0.6, 1.0);
                for (auto& v : col) v *= fade;
                hits.push_back({g, mat, o});
            }
            for (int c = 0; c < 3; ++c) {
                const double noisy = col[static_cast<size_t>(c)] + rng.uniform(-0.02, 0.02);
                f.image[c * plane + o] = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
            }
            f.lane_mask.v[static_cast<size_t>(o)] = mat == Material::Stripe ? 1 : 0;
            f.road_mask.v[static_cast<size_t>(o)] =
                (mat == Material::Stripe || mat == Material::Road) ? 1 : 0;
        }

    // Simulated returns: one per sampled ground-hit pixel, so the projected
    // coverage tracks the requested ratio.
    size_t want = static_cast<size_t>(std::llround(cfg.coverage_ratio * static_cast<double>(plane)));
    rng.shuffle(hits);
    want = std::min(want, hits.size());
    f.cloud.points.reserve(want);
    for (size_t i = 0; i < want; ++i) {
        const auto& hit = hits[i];
        LidarPoint p;
        p.x = static_cast<float>(hit.p.x() + rng.normal(0.0, 0.008));
        p.y = static_cast<float>(hit.p.y() + rng.normal(0.0, 0.008));
        p.z = static_cast<float>(hit.p.z() + rng.normal(0.0, 0.008));
        double refl = 0.0;
        switch (hit.mat) {
            case Material::Stripe: refl = rng.uniform(0.75, 0.95); break;
            case Material::Road: refl = rng.uniform(0.10, 0.28); break;
            default: refl = rng.uniform(0.30, 0.50); break;
        }
        p.reflectance = static_cast<float>(std::clamp(refl, 0.0, 1.0));
        f.cloud.points.push_back(p);
    }
    validate_frame(f);
    return f;
}

// Bilinear resize for the float planes, nearest for masks, intrinsics
// rescaled to keep the projection consistent.
inline FrameRecord resize_frame(const FrameRecord& src, int new_h, int new_w) {
    validate_frame(src);
    const int H = src.image.dim(1), W = src.image.dim(2);
    if (new_h <= 0 || new_w <= 0) throw std::invalid_argument("resize_frame: bad target size");
    const double sx = static_cast<double>(W) / new_w, sy = static_cast<double>(H) / new_h;
    FrameRecord f = src;
    Eigen::Matrix3d Hm = Eigen::Matrix3d::Identity();
    Hm(0, 0) = sx;
    Hm(1, 1) = sy;
    Hm(0, 2) = 0.5 * sx - 0.5;
    Hm(1, 2) = 0.5 * sy - 0.5;
    // reuse the warp with target-sized outputs
    FrameRecord tmp;
    tmp.image = Tensor({3, new_h, new_w});
    tmp.lane_mask = Mask(new_w, new_h);
    if (!src.road_mask.empty()) tmp.road_mask = Mask(new_w, new_h);
    if (!src.lidar.empty()) tmp.lidar = Tensor({3, new_h, new_w});
    const int64_t plane_src = static_cast<int64_t>(H) * W;
    const int64_t plane_dst = static_cast<int64_t>(new_h) * new_w;
    for (int y = 0; y < new_h; ++y)
        for (int x = 0; x < new_w; ++x) {
            const Eigen::Vector3d s = Hm * Eigen::Vector3d(x, y, 1.0);
            const double px = s.x(), py = s.y();
            const int64_t o = static_cast<int64_t>(y) * new_w + x;
            auto bilinear = [&](const Tensor& t, int c) -> float {
                const int x0 = static_cast<int>(std::floor(px)), y0 = static_cast<int>(std::floor(py));
                const double fx = px - x0, fy = py - y0;
                auto at = [&](int xx, int yy) -> double {
                    xx = std::clamp(xx, 0, W - 1);
                    yy = std::clamp(yy, 0, H - 1);
                    return t[c * plane_src + static_cast<int64_t>(yy) * W + xx];
                };
                return static_cast<float>((1 - fx) * (1 - fy) * at(x0, y0) + fx * (1 - fy) * at(x0 + 1, y0) +
                                          (1 - fx) * fy * at(x0, y0 + 1) + fx * fy * at(x0 + 1, y0 + 1));
            };
            for (int c = 0; c < 3; ++c) {
                tmp.image[c * plane_dst + o] = bilinear(src.image, c);
                if (!src.lidar.empty()) tmp.lidar[c * plane_dst + o] = bilinear(src.lidar, c);
            }
            const int nx = std::clamp(static_cast<int>(std::lround(px)), 0, W - 1);
            const int ny = std::clamp(static_cast<int>(std::lround(py)), 0, H - 1);
            tmp.lane_mask.v[static_cast<size_t>(o)] = src.lane_mask.at(ny, nx);
            if (!tmp.road_mask.empty()) tmp.road_mask.v[static_cast<size_t>(o)] = src.road_mask.at(ny, nx);
        }
    f.image = std::move(tmp.image);
    f.lidar = std::move(tmp.lidar);
    f.lane_mask = std::move(tmp.lane_mask);
    f.road_mask = std::move(tmp.road_mask);
    f.calib.K(0, 0) /= sx;
    f.calib.K(0, 2) = (f.calib.K(0, 2) + 0.5) / sx - 0.5;
    f.calib.K(1, 1) /= sy;
    f.calib.K(1, 2) = (f.calib.K(1, 2) + 0.5) / sy - 0.5;
    return f;
}

}  // namespace lanefusion
