#pragma once

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "lanefusion/dataio.hpp"
#include "lanefusion/network.hpp"

namespace lanefusion {

// Cyclical decayed rate: halving-decay by 0.8 every 10 epochs with a 2x
// reset every 50, so the rate sawtooths downward.
inline double learning_rate(int epoch, double lr0 = 1e-4) {
    if (epoch < 0) throw std::invalid_argument("learning_rate: epoch must be >= 0");
    if (!(lr0 > 0.0)) throw std::invalid_argument("learning_rate: lr0 must be positive");
    return std::pow(2.0, epoch / 50) * std::pow(0.8, epoch / 10) * lr0;
}

struct ClassWeights {
    double lane = 0.5;
    double background = 0.5;
};

inline ClassWeights normalize_class_weights(double raw_lane, double raw_background) {
    if (raw_lane < 0.0 || raw_background < 0.0 || raw_lane + raw_background <= 0.0)
        throw std::invalid_argument("class weights must be non-negative and not both zero");
    const double s = raw_lane + raw_background;
    return {raw_lane / s, raw_background / s};
}

// Balanced for the first 20 epochs, afterwards the inverse of the class
// frequencies seen in the previous epoch's predictions.
inline ClassWeights class_weights(double prev_lane_fraction, int epoch) {
    if (!(prev_lane_fraction >= 0.0 && prev_lane_fraction <= 1.0))
        throw std::invalid_argument("class_weights: fraction must be in [0,1]");
    if (epoch < 20) return {0.5, 0.5};
    constexpr double kEps = 1e-4;
    return normalize_class_weights(1.0 / std::max(prev_lane_fraction, kEps),
                                   1.0 / std::max(1.0 - prev_lane_fraction, kEps));
}

// Functional form used by tests and evaluation; the training loop runs the
// autodiff twin in ops.hpp. logprob {2,H,W}, target 0/1.
inline double weighted_nll_loss(const Tensor& logprob, const Mask& target, const ClassWeights& w) {
    if (logprob.ndim() != 3 || logprob.dim(0) != 2)
        throw std::invalid_argument("weighted_nll_loss: logprob must be {2,H,W}");
    const int h = logprob.dim(1), wd = logprob.dim(2);
    if (target.height != h || target.width != wd)
        throw std::invalid_argument("weighted_nll_loss: target shape mismatch");
    const int64_t plane = static_cast<int64_t>(h) * wd;
    double loss = 0.0;
    for (int64_t i = 0; i < plane; ++i) {
        const double sum = std::exp(static_cast<double>(logprob[i])) +
                           std::exp(static_cast<double>(logprob[plane + i]));
        if (std::abs(sum - 1.0) > 1e-3)
            throw std::invalid_argument("weighted_nll_loss: log probabilities are not normalized");
        const bool lane = target.v[static_cast<size_t>(i)] != 0;
        loss -= (lane ? w.lane : w.background) * (lane ? logprob[plane + i] : logprob[i]);
    }
    return loss / static_cast<double>(plane);
}

class Adam {
public:
    explicit Adam(std::vector<ParamRef>& params, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : params_) {
            m_.emplace_back(p.var->value.shape());
            v_.emplace_back(p.var->value.shape());
        }
    }

    void zero_grad() {
        for (auto& p : params_) {
            p.var->ensure_grad();
            p.var->zero_grad();
        }
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i].var->value;
            const Tensor& g = params_[i].var->grad;
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            for (int64_t j = 0; j < p.numel(); ++j) {
                const double gj = g[j];
                m[j] = static_cast<float>(beta1_ * m[j] + (1.0 - beta1_) * gj);
                v[j] = static_cast<float>(beta2_ * v[j] + (1.0 - beta2_) * gj * gj);
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                p[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

private:
    std::vector<ParamRef>& params_;
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

// Flattened, network-ready sample. lane/road are {H,W} float 0/1 targets.
struct TrainSample {
    Tensor image;
    Tensor lidar;  // empty for image-only variants
    Tensor lane;
    Tensor road;   // empty unless available
};

struct EpochStats {
    int epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
    double lane_acc = 0.0;  // lane recall on the train split, training-mode predictions
    double k = 0.0;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    bool multitask = false;

    std::string to_csv() const {
        std::string out = "epoch,lr,loss,lane_acc,k\n";
        char buf[160];
        for (const auto& e : epochs) {
            if (multitask)
                std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.lr, e.loss,
                              e.lane_acc, e.k);
            else
                std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,\n", e.epoch, e.lr, e.loss,
                              e.lane_acc);
            out += buf;
        }
        return out;
    }
};

struct FitOptions {
    int epochs = 100;
    uint64_t seed = 0;
    int batch_size = 4;
    double lr0 = 1e-4;
    // invoked after each epoch, e.g. for periodic checkpoints
    std::function<void(int /*epoch*/, Model&)> epoch_hook;
};

// Epoch loop: per-epoch schedule, adaptive class weights fed by the
// previous epoch's predicted class frequencies over the whole train split,
// equally weighted lane+road losses when multitask. Deterministic per
// (model init, data, seed). A non-finite loss aborts immediately.
inline TrainReport fit(Model& model, const std::vector<TrainSample>& train,
                       const std::vector<TrainSample>& val, const FitOptions& opt) {
    (void)val;  // reserved for schedule-free model selection
    if (train.empty()) throw std::invalid_argument("fit: empty training set");
    if (opt.epochs < 1) throw std::invalid_argument("fit: epochs must be >= 1");
    if (opt.batch_size < 1) throw std::invalid_argument("fit: batch_size must be >= 1");
    const auto& cfg = model.config();
    const int H = cfg.input_height, W = cfg.input_width;
    const int64_t plane = static_cast<int64_t>(H) * W;
    const bool needs_lidar = cfg.has_lidar();
    for (const auto& s : train) {
        check_shape(s.image, {3, H, W}, "fit sample image");
        check_shape(s.lane, {H, W}, "fit sample lane target");
        if (needs_lidar) check_shape(s.lidar, {3, H, W}, "fit sample lidar");
        if (cfg.multitask) check_shape(s.road, {H, W}, "fit sample road target");
    }

    Adam adam(model.parameters());
    TrainReport report;
    report.multitask = cfg.multitask;

    double prev_lane_fraction = 0.5;
    double prev_road_fraction = 0.5;
    std::vector<size_t> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        const double lr = learning_rate(epoch, opt.lr0);
        const ClassWeights wl = class_weights(prev_lane_fraction, epoch);
        const ClassWeights wr = class_weights(prev_road_fraction, epoch);

        Rng shuffle_rng(derive_seed(opt.seed, static_cast<uint64_t>(epoch) + 1));
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        uint64_t lane_tp = 0, lane_fn = 0, lane_pred = 0, road_pred = 0, seen_px = 0;

        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(opt.batch_size)) {
            const int B = static_cast<int>(
                std::min<size_t>(static_cast<size_t>(opt.batch_size), order.size() - start));
            Tensor images({B, 3, H, W}), lane_t({B, H, W});
            Tensor lidar, road_t;
            if (needs_lidar) lidar = Tensor({B, 3, H, W});
            if (cfg.multitask) road_t = Tensor({B, H, W});
            for (int b = 0; b < B; ++b) {
                const TrainSample& s = train[order[start + b]];
                std::copy(s.image.data(), s.image.data() + s.image.numel(),
                          images.data() + static_cast<int64_t>(b) * 3 * plane);
                std::copy(s.lane.data(), s.lane.data() + plane,
                          lane_t.data() + static_cast<int64_t>(b) * plane);
                if (needs_lidar)
                    std::copy(s.lidar.data(), s.lidar.data() + s.lidar.numel(),
                              lidar.data() + static_cast<int64_t>(b) * 3 * plane);
                if (cfg.multitask)
                    std::copy(s.road.data(), s.road.data() + plane,
                              road_t.data() + static_cast<int64_t>(b) * plane);
            }

            adam.zero_grad();
            ForwardVars fv = model.forward_batch(images, needs_lidar ? &lidar : nullptr, true);
            Var loss = weighted_nll(fv.lane_logprob, lane_t,
                                    static_cast<float>(wl.background), static_cast<float>(wl.lane));
            if (cfg.multitask) {
                Var road_loss = weighted_nll(fv.road_logprob, road_t,
                                             static_cast<float>(wr.background),
                                             static_cast<float>(wr.lane));
                loss = add(loss, road_loss);
            }
            const double batch_loss = loss->value[0];
            if (!std::isfinite(batch_loss))
                throw std::runtime_error("fit: diverged, non-finite loss at epoch " +
                                         std::to_string(epoch));
            loss_sum += batch_loss * B;

            // training-set prediction statistics for this epoch's report and
            // the next epoch's class weights
            const Tensor& lp = fv.lane_logprob->value;
            for (int b = 0; b < B; ++b) {
                const float* l0 = lp.data() + (static_cast<int64_t>(b) * 2) * plane;
                const float* l1 = l0 + plane;
                const float* gt = lane_t.data() + static_cast<int64_t>(b) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    const bool pred = l1[i] > l0[i];
                    lane_pred += pred;
                    if (gt[i] != 0.0f) {
                        if (pred)
                            ++lane_tp;
                        else
                            ++lane_fn;
                    }
                }
            }
            if (cfg.multitask) {
                const Tensor& rp = fv.road_logprob->value;
                for (int b = 0; b < B; ++b) {
                    const float* r0 = rp.data() + (static_cast<int64_t>(b) * 2) * plane;
                    const float* r1 = r0 + plane;
                    for (int64_t i = 0; i < plane; ++i) road_pred += r1[i] > r0[i];
                }
            }
            seen_px += static_cast<uint64_t>(B) * static_cast<uint64_t>(plane);

            backward(loss);
            adam.step(lr);
            model.clamp_k();
        }

        prev_lane_fraction = static_cast<double>(lane_pred) / static_cast<double>(seen_px);
        if (cfg.multitask)
            prev_road_fraction = static_cast<double>(road_pred) / static_cast<double>(seen_px);

        EpochStats st;
        st.epoch = epoch;
        st.lr = lr;
        st.loss = loss_sum / static_cast<double>(train.size());
        st.lane_acc = (lane_tp + lane_fn) > 0
                          ? static_cast<double>(lane_tp) / static_cast<double>(lane_tp + lane_fn)
                          : 0.0;
        st.k = model.k_value();
        report.epochs.push_back(st);
        if (opt.epoch_hook) opt.epoch_hook(epoch, model);
    }
    return report;
}

}  // namespace lanefusion
