#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "lanefusion/tensor.hpp"

namespace lanefusion {

// Pinhole projection model: pixel = K * (R * p + T), followed by the
// homogeneous division. K is in pixels, R maps sensor to camera axes,
// T is in meters.
struct Calibration {
    Eigen::Matrix3d K = Eigen::Matrix3d::Identity();
    Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
    Eigen::Vector3d T = Eigen::Vector3d::Zero();

    void validate() const {
        if (std::abs(K(2, 2) - 1.0) > 1e-9)
            throw std::invalid_argument("Calibration: K[2][2] must be 1");
        if (K(1, 0) != 0.0 || K(2, 0) != 0.0 || K(2, 1) != 0.0)
            throw std::invalid_argument("Calibration: K must be upper triangular");
        if (K(0, 0) <= 0.0 || K(1, 1) <= 0.0)
            throw std::invalid_argument("Calibration: focal lengths must be positive");
        if (std::abs(R.determinant() - 1.0) > 1e-6)
            throw std::invalid_argument("Calibration: rotation determinant must be 1");
        if (((R.transpose() * R) - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-6)
            throw std::invalid_argument("Calibration: rotation is not orthonormal");
    }
};

struct LidarPoint {
    float x = 0, y = 0, z = 0;
    float reflectance = 0;
};

struct PointCloud {
    std::vector<LidarPoint> points;
    size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }
};

// Channel indices of the pseudo image.
enum ModalChannel { kReflectance = 0, kHeight = 1, kDistance = 2 };

struct SparseModalMap {
    int width = 0, height = 0;
    std::array<std::vector<float>, 3> channels;  // reflectance, height, distance
    std::vector<uint8_t> known;

    SparseModalMap() = default;
    SparseModalMap(int w, int h) : width(w), height(h) {
        for (auto& c : channels) c.assign(static_cast<size_t>(w) * h, 0.0f);
        known.assign(static_cast<size_t>(w) * h, 0);
    }
    double coverage() const {
        if (known.empty()) return 0.0;
        size_t n = 0;
        for (uint8_t k : known) n += k != 0;
        return static_cast<double>(n) / static_cast<double>(known.size());
    }
};

struct DenseModalMap {
    int width = 0, height = 0;
    std::array<std::vector<float>, 3> channels;
    bool degenerate = false;  // set when the sparse input had no known pixel

    DenseModalMap() = default;
    DenseModalMap(int w, int h) : width(w), height(h) {
        for (auto& c : channels) c.assign(static_cast<size_t>(w) * h, 0.0f);
    }
    Tensor to_tensor() const {
        Tensor t({3, height, width});
        for (int c = 0; c < 3; ++c)
            std::copy(channels[c].begin(), channels[c].end(),
                      t.data() + static_cast<int64_t>(c) * height * width);
        return t;
    }
};

// Per-channel normalization ranges for compose_modal_image. Defaults cover
// road scenes: reflectance is already unit range, height spans +-3 m around
// the sensor, distance caps at 80 m.
struct NormalizationBounds {
    std::array<std::pair<float, float>, 3> minmax = {
        std::pair<float, float>{0.0f, 1.0f},
        std::pair<float, float>{-3.0f, 3.0f},
        std::pair<float, float>{0.0f, 80.0f}};
};

// Project every point onto the image plane. Points behind the camera or
// outside the frame are dropped; when two points land on one pixel the
// nearer one wins. The height channel keeps the sensor-frame z, the
// distance channel the euclidean range.
inline SparseModalMap project_points(const PointCloud& cloud, const Calibration& calib, int width,
                                     int height) {
    if (width <= 0 || height <= 0)
        throw std::invalid_argument("project_points: image size must be positive");
    calib.validate();
    SparseModalMap out(width, height);
    for (const auto& p : cloud.points) {
        if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) continue;
        const Eigen::Vector3d ps(p.x, p.y, p.z);
        const Eigen::Vector3d pc = calib.R * ps + calib.T;
        if (pc.z() <= 0.0) continue;
        const Eigen::Vector3d uvw = calib.K * pc;
        const double u = uvw.x() / uvw.z();
        const double v = uvw.y() / uvw.z();
        const int px = static_cast<int>(std::floor(u));
        const int py = static_cast<int>(std::floor(v));
        if (px < 0 || px >= width || py < 0 || py >= height) continue;
        const size_t idx = static_cast<size_t>(py) * width + px;
        const float dist = static_cast<float>(ps.norm());
        if (out.known[idx] && out.channels[kDistance][idx] <= dist) continue;
        out.known[idx] = 1;
        out.channels[kReflectance][idx] = p.reflectance;
        out.channels[kHeight][idx] = p.z;
        out.channels[kDistance][idx] = dist;
    }
    return out;
}

namespace detail {

struct Neighbor {
    float d2;
    int32_t idx;
    bool operator<(const Neighbor& o) const {
        return d2 != o.d2 ? d2 < o.d2 : idx < o.idx;
    }
};

// Exact k nearest known pixels by euclidean pixel distance, found by
// scanning Chebyshev rings outward. Ties at the kth distance break on the
// lower linear index so results are deterministic.
inline void nearest_known(const SparseModalMap& m, int x, int y, int k, std::vector<Neighbor>& out) {
    out.clear();
    const int w = m.width, h = m.height;
    const int rmax = std::max(std::max(x, w - 1 - x), std::max(y, h - 1 - y));
    auto consider = [&](int cx, int cy) {
        const int32_t idx = cy * w + cx;
        if (!m.known[static_cast<size_t>(idx)]) return;
        const float dx = static_cast<float>(cx - x), dy = static_cast<float>(cy - y);
        Neighbor cand{dx * dx + dy * dy, idx};
        if (static_cast<int>(out.size()) < k) {
            out.push_back(cand);
            std::push_heap(out.begin(), out.end());
        } else if (cand < out.front()) {
            std::pop_heap(out.begin(), out.end());
            out.back() = cand;
            std::push_heap(out.begin(), out.end());
        }
    };
    for (int r = 1; r <= rmax; ++r) {
        if (static_cast<int>(out.size()) == k) {
            // every pixel in ring r is at least distance r away
            const float rr = static_cast<float>(r) * r;
            if (out.front().d2 < rr) break;
        }
        const int y0 = y - r, y1 = y + r, x0 = x - r, x1 = x + r;
        if (y0 >= 0)
            for (int cx = std::max(0, x0); cx <= std::min(w - 1, x1); ++cx) consider(cx, y0);
        if (y1 < h)
            for (int cx = std::max(0, x0); cx <= std::min(w - 1, x1); ++cx) consider(cx, y1);
        if (x0 >= 0)
            for (int cy = std::max(0, y0 + 1); cy <= std::min(h - 1, y1 - 1); ++cy) consider(x0, cy);
        if (x1 < w)
            for (int cy = std::max(0, y0 + 1); cy <= std::min(h - 1, y1 - 1); ++cy) consider(x1, cy);
    }
    std::sort_heap(out.begin(), out.end());
}

}  // namespace detail

// Fill every blank pixel with the inverse-distance weighted average of its
// k nearest known pixels. Known pixels are copied through untouched. With
// no known pixels at all the output is zero and flagged degenerate.
inline DenseModalMap knn_complete(const SparseModalMap& sparse, int k = 3) {
    if (k < 1) throw std::invalid_argument("knn_complete: k must be >= 1");
    DenseModalMap out(sparse.width, sparse.height);
    const size_t total = static_cast<size_t>(sparse.width) * sparse.height;
    size_t known_count = 0;
    for (size_t i = 0; i < total; ++i) known_count += sparse.known[i] != 0;
    if (known_count == 0) {
        out.degenerate = true;
        return out;
    }
    const int keff = static_cast<int>(std::min<size_t>(static_cast<size_t>(k), known_count));

#pragma omp parallel for schedule(static)
    for (int y = 0; y < sparse.height; ++y) {
        std::vector<detail::Neighbor> nbs;
        nbs.reserve(static_cast<size_t>(keff) + 4);
        for (int x = 0; x < sparse.width; ++x) {
            const size_t idx = static_cast<size_t>(y) * sparse.width + x;
            if (sparse.known[idx]) {
                for (int c = 0; c < 3; ++c) out.channels[c][idx] = sparse.channels[c][idx];
                continue;
            }
            detail::nearest_known(sparse, x, y, keff, nbs);
            double wsum = 0.0;
            std::array<double, 3> acc = {0.0, 0.0, 0.0};
            bool coincident = false;
            for (const auto& nb : nbs) {
                const double d = std::sqrt(static_cast<double>(nb.d2));
                if (d == 0.0) {
                    for (int c = 0; c < 3; ++c) out.channels[c][idx] = sparse.channels[c][nb.idx];
                    coincident = true;
                    break;
                }
                const double w = 1.0 / d;
                wsum += w;
                for (int c = 0; c < 3; ++c) acc[c] += w * sparse.channels[c][nb.idx];
            }
            if (!coincident)
                for (int c = 0; c < 3; ++c)
                    out.channels[c][idx] = static_cast<float>(acc[c] / wsum);
        }
    }
    return out;
}

// Rescale each channel with (v - min) / (max - min) and clamp to [0,1].
// Channel order stays (reflectance, height, distance).
inline DenseModalMap compose_modal_image(const DenseModalMap& dense,
                                         const NormalizationBounds& bounds = {}) {
    for (int c = 0; c < 3; ++c)
        if (!(bounds.minmax[c].first < bounds.minmax[c].second))
            throw std::invalid_argument("compose_modal_image: degenerate bounds for channel " +
                                        std::to_string(c));
    DenseModalMap out(dense.width, dense.height);
    out.degenerate = dense.degenerate;
    for (int c = 0; c < 3; ++c) {
        const float lo = bounds.minmax[c].first;
        const float inv = 1.0f / (bounds.minmax[c].second - lo);
        const auto& src = dense.channels[c];
        auto& dst = out.channels[c];
        for (size_t i = 0; i < src.size(); ++i)
            dst[i] = std::clamp((src[i] - lo) * inv, 0.0f, 1.0f);
    }
    return out;
}

// Normalized pseudo image straight from a sparse map: blank pixels stay
// zero when densify is off, otherwise they are completed first.
inline Tensor modal_tensor(const SparseModalMap& sparse, const NormalizationBounds& bounds,
                           bool densify, int k = 3) {
    if (densify) return compose_modal_image(knn_complete(sparse, k), bounds).to_tensor();
    DenseModalMap raw(sparse.width, sparse.height);
    for (int c = 0; c < 3; ++c) raw.channels[c] = sparse.channels[c];
    DenseModalMap scaled = compose_modal_image(raw, bounds);
    const size_t total = static_cast<size_t>(sparse.width) * sparse.height;
    for (size_t i = 0; i < total; ++i)
        if (!sparse.known[i])
            for (int c = 0; c < 3; ++c) scaled.channels[c][i] = 0.0f;
    return scaled.to_tensor();
}

}  // namespace lanefusion
