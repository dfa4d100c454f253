#pragma once

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "lanefusion/pipeline.hpp"

namespace lanefusion {

struct ConfusionMatrix {
    uint64_t tp = 0, tn = 0, fp = 0, fn = 0;

    uint64_t total() const { return tp + tn + fp + fn; }
    ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
        tp += o.tp;
        tn += o.tn;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
    friend ConfusionMatrix operator+(ConfusionMatrix a, const ConfusionMatrix& b) { return a += b; }
    bool operator==(const ConfusionMatrix&) const = default;
};

// Exact pixel counts; positive class = lane.
inline ConfusionMatrix accumulate_confusion(const Mask& pred, const Mask& gt) {
    if (pred.width != gt.width || pred.height != gt.height)
        throw std::invalid_argument("accumulate_confusion: shape mismatch");
    ConfusionMatrix cm;
    for (size_t i = 0; i < pred.v.size(); ++i) {
        if (pred.v[i] > 1 || gt.v[i] > 1)
            throw std::invalid_argument("accumulate_confusion: masks must be binary");
        const bool p = pred.v[i] != 0, g = gt.v[i] != 0;
        if (p && g)
            ++cm.tp;
        else if (p && !g)
            ++cm.fp;
        else if (!p && g)
            ++cm.fn;
        else
            ++cm.tn;
    }
    return cm;
}

// All metrics as fractions in [0,1]; degenerate denominators report 0 and
// drop the corresponding *_defined flag.
struct MetricsReport {
    double precision = 0.0;
    double lacc = 0.0;  // lane recall
    double acc = 0.0;
    double macc = 0.0;
    double f2 = 0.0;
    bool precision_defined = true, lacc_defined = true, f2_defined = true, bg_recall_defined = true;
    ConfusionMatrix cm;
    std::string model, mode;
    double frames_per_second = 0.0;  // wall-clock local measure, machine dependent
};

inline MetricsReport compute_metrics(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw std::invalid_argument("compute_metrics: empty confusion matrix");
    MetricsReport r;
    r.cm = cm;
    const double tp = static_cast<double>(cm.tp), tn = static_cast<double>(cm.tn);
    const double fp = static_cast<double>(cm.fp), fn = static_cast<double>(cm.fn);
    if (cm.tp + cm.fp > 0)
        r.precision = tp / (tp + fp);
    else
        r.precision_defined = false;
    if (cm.tp + cm.fn > 0)
        r.lacc = tp / (tp + fn);
    else
        r.lacc_defined = false;
    r.acc = (tp + tn) / static_cast<double>(cm.total());
    double bg_recall = 0.0;
    if (cm.tn + cm.fp > 0)
        bg_recall = tn / (tn + fp);
    else
        r.bg_recall_defined = false;
    r.macc = (r.lacc + bg_recall) / 2.0;
    const double denom = 4.0 * r.precision + r.lacc;
    if (r.precision_defined && r.lacc_defined && denom > 0.0)
        r.f2 = 5.0 * r.precision * r.lacc / denom;
    else
        r.f2_defined = false;
    return r;
}

inline Mask threshold_lane(const Tensor& prob, double threshold = 0.5) {
    if (prob.ndim() != 2) throw std::invalid_argument("threshold_lane: want {H,W}");
    Mask m(prob.dim(1), prob.dim(0));
    for (size_t i = 0; i < m.v.size(); ++i)
        m.v[i] = prob[static_cast<int64_t>(i)] > threshold ? 1 : 0;
    return m;
}

enum class EvalMode { Both, OnlyImage, OnlyPoints };

inline const char* eval_mode_name(EvalMode m) {
    switch (m) {
        case EvalMode::Both: return "both";
        case EvalMode::OnlyImage: return "only_image";
        case EvalMode::OnlyPoints: return "only_points";
    }
    return "?";
}

inline EvalMode eval_mode_from_name(std::string s) {
    for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (s == "both") return EvalMode::Both;
    if (s == "only_image") return EvalMode::OnlyImage;
    if (s == "only_points") return EvalMode::OnlyPoints;
    throw std::invalid_argument("unknown eval mode: " + s);
}

// Lane-probability map {H,W} for one frame. The lidar pointer is null for
// image-only models.
using Predictor = std::function<Tensor(const Tensor& image, const Tensor* lidar)>;

struct EvalSample {
    Tensor image;
    Tensor lidar;  // may be empty
    Mask gt;
};

inline ConfusionMatrix confusion_for_sample(const Predictor& predict, const EvalSample& s,
                                            EvalMode mode, double threshold = 0.5) {
    ModalityMask which = ModalityMask::None;
    if (mode == EvalMode::OnlyImage) which = ModalityMask::Lidar;
    if (mode == EvalMode::OnlyPoints) which = ModalityMask::Image;
    auto [img, lid] = mask_modality(s.image, s.lidar, which);
    const Tensor prob = predict(img, lid.empty() ? nullptr : &lid);
    return accumulate_confusion(threshold_lane(prob, threshold), s.gt);
}

inline MetricsReport evaluate_samples(const Predictor& predict, const std::vector<EvalSample>& samples,
                                      EvalMode mode, double threshold = 0.5) {
    if (samples.empty()) throw std::invalid_argument("evaluate_samples: no samples");
    std::vector<ConfusionMatrix> per_frame(samples.size());
    const auto t0 = std::chrono::steady_clock::now();
#pragma omp parallel for schedule(dynamic)
    for (size_t i = 0; i < samples.size(); ++i)
        per_frame[i] = confusion_for_sample(predict, samples[i], mode, threshold);
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ConfusionMatrix cm;
    for (const auto& f : per_frame) cm += f;  // fixed merge order
    MetricsReport r = compute_metrics(cm);
    r.mode = eval_mode_name(mode);
    r.frames_per_second = dt > 0.0 ? static_cast<double>(samples.size()) / dt : 0.0;
    return r;
}

// Whole-dataset evaluation of a trained model. Confusion is pooled over
// frames, the lane probability thresholded at 0.5.
inline MetricsReport evaluate(Model& model, const std::vector<FrameRecord>& frames, EvalMode mode,
                              const NormalizationBounds& bounds = {}) {
    const auto& cfg = model.config();
    if (mode == EvalMode::OnlyPoints && !cfg.has_lidar())
        throw std::invalid_argument(std::string("evaluate: variant ") + variant_name(cfg.variant) +
                                    " has no point-cloud pipeline, only_points is undefined");
    std::vector<EvalSample> samples;
    samples.reserve(frames.size());
    for (const auto& f : frames) {
        EvalSample s;
        s.image = f.image;
        s.lidar = lidar_input_for(f, cfg, bounds);
        s.gt = f.lane_mask;
        samples.push_back(std::move(s));
    }
    const int64_t plane = static_cast<int64_t>(cfg.input_height) * cfg.input_width;
    Predictor predict = [&model, plane](const Tensor& img, const Tensor* lid) {
        SegmentationOutput out = model.infer(img, lid);
        Tensor prob({out.lane_logprob.dim(1), out.lane_logprob.dim(2)});
        for (int64_t i = 0; i < plane; ++i)
            prob[i] = std::exp(out.lane_logprob[plane + i]);
        return prob;
    };
    MetricsReport r = evaluate_samples(predict, samples, mode);
    r.model = variant_name(cfg.variant);
    return r;
}

// Reports render metrics as percentages to one hundredth, matching the
// usual presentation. JSON is byte-stable across runs (no timing field).
inline nlohmann::json metrics_to_json(const MetricsReport& r) {
    auto pct = [](double v) { return std::round(v * 10000.0) / 100.0; };
    nlohmann::json j;
    j["model"] = r.model;
    j["mode"] = r.mode;
    j["LAcc"] = pct(r.lacc);
    j["Acc"] = pct(r.acc);
    j["mAcc"] = pct(r.macc);
    j["F2"] = pct(r.f2);
    j["precision"] = pct(r.precision);
    j["counts"] = {{"tp", r.cm.tp}, {"tn", r.cm.tn}, {"fp", r.cm.fp}, {"fn", r.cm.fn}};
    nlohmann::json undef = nlohmann::json::array();
    if (!r.precision_defined) undef.push_back("precision");
    if (!r.lacc_defined) undef.push_back("LAcc");
    if (!r.f2_defined) undef.push_back("F2");
    if (!r.bg_recall_defined) undef.push_back("background_recall");
    j["undefined"] = undef;
    return j;
}

inline std::string metrics_csv_header() {
    return "model,mode,LAcc,Acc,mAcc,F2,fps\n";
}

// fps is measured locally and is not comparable across machines.
inline std::string metrics_to_csv_row(const MetricsReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%s,%.2f,%.2f,%.2f,%.2f,%.1f\n", r.model.c_str(),
                  r.mode.c_str(), r.lacc * 100.0, r.acc * 100.0, r.macc * 100.0, r.f2 * 100.0,
                  r.frames_per_second);
    return buf;
}

}  // namespace lanefusion
