#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <json.hpp>

#include <array>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace lanefusion {

// Binary membership of the seven fusion ingredients in the seven fusion
// models. Rows are models (V2, V3, V4, V5, V3r, V4r, V6), columns are
// factors (LiDAR input, densified input, early, middle, late fusion, road
// task, adaptive block). Rank 6: early+middle+late-LiDAR-adaptive is not
// separable, which is why solves pick the minimum-norm member.
struct FactorDesign {
    static constexpr int kSize = 7;
    std::array<std::string, kSize> factor_names = {"LiDAR", "dense",    "early", "middle",
                                                   "late",  "road",     "adaptive"};
    std::array<std::string, kSize> model_names = {"V2", "V3", "V4", "V5", "V3r", "V4r", "V6"};
    Eigen::Matrix<double, kSize, kSize> matrix;

    // the one-dimensional null space direction
    Eigen::Matrix<double, kSize, 1> null_vector() const {
        Eigen::Matrix<double, kSize, 1> n;
        n << 1, 0, -1, -1, -1, 0, 1;
        return n;
    }
};

inline FactorDesign build_design_matrix() {
    FactorDesign d;
    d.matrix << 1, 0, 1, 0, 0, 0, 0,   // V2
                1, 1, 1, 0, 0, 0, 0,   // V3
                1, 1, 0, 1, 0, 0, 0,   // V4
                1, 1, 0, 0, 1, 0, 0,   // V5
                1, 1, 1, 0, 0, 1, 0,   // V3r
                1, 1, 0, 1, 0, 1, 0,   // V4r
                1, 1, 1, 1, 0, 1, 1;   // V6
    return d;
}

struct AttributionResult {
    Eigen::VectorXd contributions;  // per factor, minimum-norm least squares
    Eigen::VectorXd residuals;      // design * x - deltas, per model
    Eigen::VectorXd normalized;     // (x - min) / sum(x - min); empty when x is constant
    int rank = 0;
};

// Shift-to-zero normalization; rejects an all-equal vector (zero spread).
inline Eigen::VectorXd normalize_contributions(const Eigen::VectorXd& x) {
    if (x.size() == 0) throw std::invalid_argument("normalize_contributions: empty input");
    const double mn = x.minCoeff();
    Eigen::VectorXd shifted = x.array() - mn;
    const double s = shifted.sum();
    if (s <= 0.0)
        throw std::invalid_argument("normalize_contributions: all entries equal, zero denominator");
    return shifted / s;
}

// Minimum-norm least-squares solve via SVD pseudoinverse. The design has
// rank 6, so the solution family is a line; the pseudoinverse picks the
// member orthogonal to the null space.
inline AttributionResult solve_attribution(const FactorDesign& design,
                                           const Eigen::VectorXd& deltas) {
    if (deltas.size() != FactorDesign::kSize)
        throw std::invalid_argument("solve_attribution: expected 7 deltas");
    if (!deltas.allFinite()) throw std::invalid_argument("solve_attribution: deltas must be finite");
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(design.matrix, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::VectorXd& sv = svd.singularValues();
    const double tol = 1e-10 * sv(0);
    Eigen::VectorXd inv = Eigen::VectorXd::Zero(sv.size());
    int rank = 0;
    for (int i = 0; i < sv.size(); ++i)
        if (sv(i) > tol) {
            inv(i) = 1.0 / sv(i);
            ++rank;
        }
    AttributionResult r;
    r.rank = rank;
    r.contributions = svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose() * deltas;
    r.residuals = design.matrix * r.contributions - deltas;
    const double spread = r.contributions.maxCoeff() - r.contributions.minCoeff();
    if (spread > 0.0) r.normalized = normalize_contributions(r.contributions);
    return r;
}

// ---------------------------------------------------------------------------
// delta tables: CSV rows (model, metric, delta), deltas relative to V1
// ---------------------------------------------------------------------------

struct DeltaTable {
    // metric name -> per-model delta, in design row order
    std::vector<std::string> metrics;                       // first-seen order
    std::map<std::string, std::array<double, 7>> values;
    std::map<std::string, std::array<bool, 7>> present;
};

inline DeltaTable parse_delta_csv(const std::string& text) {
    const FactorDesign design = build_design_matrix();
    DeltaTable t;
    std::istringstream ss(text);
    std::string line;
    bool first = true;
    size_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream ls(line);
        std::string model, metric, delta;
        if (!std::getline(ls, model, ',') || !std::getline(ls, metric, ',') ||
            !std::getline(ls, delta))
            throw std::runtime_error("delta csv: malformed line " + std::to_string(lineno));
        if (first && model == "model") {
            first = false;
            continue;  // header
        }
        first = false;
        int row = -1;
        for (int i = 0; i < FactorDesign::kSize; ++i)
            if (design.model_names[static_cast<size_t>(i)] == model) row = i;
        if (row < 0) continue;  // V1 baseline rows and unknown models are ignored
        if (!t.values.count(metric)) {
            t.metrics.push_back(metric);
            t.values[metric] = {};
            t.present[metric] = {};
        }
        t.values[metric][static_cast<size_t>(row)] = std::stod(delta);
        t.present[metric][static_cast<size_t>(row)] = true;
    }
    for (const auto& m : t.metrics)
        for (int i = 0; i < FactorDesign::kSize; ++i)
            if (!t.present.at(m)[static_cast<size_t>(i)])
                throw std::runtime_error("delta csv: metric " + m + " is missing model " +
                                         design.model_names[static_cast<size_t>(i)]);
    return t;
}

// factor-by-metric contribution table, one solve per metric column
inline std::string contributions_to_csv(const FactorDesign& design,
                                        const std::vector<std::string>& metrics,
                                        const std::vector<AttributionResult>& results) {
    std::ostringstream out;
    out << "factor";
    for (const auto& m : metrics) out << "," << m;
    out << "\n";
    char buf[64];
    for (int i = 0; i < FactorDesign::kSize; ++i) {
        out << design.factor_names[static_cast<size_t>(i)];
        for (const auto& r : results) {
            std::snprintf(buf, sizeof(buf), "%.4f", r.contributions(i));
            out << "," << buf;
        }
        out << "\n";
    }
    return out.str();
}

inline nlohmann::json contributions_to_json(const FactorDesign& design,
                                            const std::vector<std::string>& metrics,
                                            const std::vector<AttributionResult>& results) {
    nlohmann::json j;
    for (size_t m = 0; m < metrics.size(); ++m) {
        nlohmann::json entry;
        for (int i = 0; i < FactorDesign::kSize; ++i) {
            const auto& f = design.factor_names[static_cast<size_t>(i)];
            entry["contributions"][f] = std::round(results[m].contributions(i) * 1e4) / 1e4;
            if (results[m].normalized.size())
                entry["normalized"][f] = std::round(results[m].normalized(i) * 1e4) / 1e4;
        }
        for (int i = 0; i < FactorDesign::kSize; ++i)
            entry["residuals"][design.model_names[static_cast<size_t>(i)]] =
                std::round(results[m].residuals(i) * 1e4) / 1e4;
        entry["rank"] = results[m].rank;
        entry["null_space_dot"] = results[m].contributions.dot(design.null_vector());
        j[metrics[m]] = entry;
    }
    return j;
}

}  // namespace lanefusion
