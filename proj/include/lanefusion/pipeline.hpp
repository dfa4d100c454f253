#pragma once

#include "lanefusion/dataio.hpp"
#include "lanefusion/geometry.hpp"
#include "lanefusion/network.hpp"
#include "lanefusion/training.hpp"

namespace lanefusion {

// The pseudo-image input a variant expects: a precomputed dense map when
// the frame carries one, otherwise projection plus completion (or the raw
// sparse map for the sparse-input variant).
inline Tensor lidar_input_for(const FrameRecord& f, const ArchitectureConfig& cfg,
                              const NormalizationBounds& bounds = {}) {
    if (!cfg.has_lidar()) return {};
    const std::vector<int> want{3, cfg.input_height, cfg.input_width};
    if (cfg.dense_lidar && !f.lidar.empty()) {
        if (f.lidar.shape() != want)
            throw std::invalid_argument("lidar_input_for: precomputed map size mismatch");
        return f.lidar;
    }
    SparseModalMap sp = project_points(f.cloud, f.calib, cfg.input_width, cfg.input_height);
    return modal_tensor(sp, bounds, cfg.dense_lidar);
}

inline Tensor mask_to_target(const Mask& m) {
    Tensor t({m.height, m.width});
    for (size_t i = 0; i < m.v.size(); ++i) t[static_cast<int64_t>(i)] = m.v[i] ? 1.0f : 0.0f;
    return t;
}

inline TrainSample make_train_sample(const FrameRecord& f, const ArchitectureConfig& cfg,
                                     const NormalizationBounds& bounds = {}) {
    validate_frame(f);
    if (f.image.dim(1) != cfg.input_height || f.image.dim(2) != cfg.input_width)
        throw std::invalid_argument("make_train_sample: frame size does not match the model input");
    if (cfg.multitask && f.road_mask.empty())
        throw std::invalid_argument("make_train_sample: multitask variant needs a road mask");
    TrainSample s;
    s.image = f.image;
    s.lidar = lidar_input_for(f, cfg, bounds);
    s.lane = mask_to_target(f.lane_mask);
    if (!f.road_mask.empty()) s.road = mask_to_target(f.road_mask);
    return s;
}

}  // namespace lanefusion
