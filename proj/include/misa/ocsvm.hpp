#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "misa/attribution.hpp"
#include "misa/io.hpp"

namespace misa {

struct OcsvmConfig {
    double nu = 0.7;
    double gamma = 0.2;
    bool standardize = false;  // z-score features from the training set
    // Stop when the max KKT violation falls below this. Small gamma values
    // flatten the decision function, so a loose tolerance in gradient units
    // smears into a wide spatial band of sign-ambiguous near-boundary points;
    // the tight default keeps that band to a handful of samples.
    double kkt_tolerance = 1e-6;
    std::size_t max_iterations = 2'000'000;
};

// One-class nu-SVM with Gaussian kernel, fit on flattened attribution maps.
// Stored coefficients satisfy 0 <= alpha_i <= 1/(nu*n) and sum alpha = 1;
// only strictly positive coefficients (the support vectors) are kept.
struct OneClassSvmModel {
    int boundary = -1;  // activation boundary the maps came from; -1 for raw vectors
    int feature_dim = 0;
    double nu = 0.7;
    double gamma = 0.2;
    double rho = 0.0;
    double kkt_residual = 0.0;
    std::uint64_t iterations = 0;
    bool standardized = false;
    std::vector<float> feat_mean, feat_scale;  // per-dimension z-score stats
    std::vector<double> alpha;
    std::vector<std::vector<float>> support_vectors;
};

struct SvmDecision {
    int status = 1;  // +1 inlier, -1 anomaly
    double score = 0.0;
};

// exp(-gamma * ||a-b||^2), accumulated in double.
double rbf_kernel(const std::vector<float>& a, const std::vector<float>& b, double gamma);

// SMO-style max-violating-pair solver for the one-class dual:
// minimize 1/2 a^T K a subject to 0 <= a_i <= 1/(nu*n), sum a_i = 1.
// Throws on non-convergence, carrying the final KKT residual.
OneClassSvmModel fit_one_class_svm(const std::vector<std::vector<float>>& features,
                                   const OcsvmConfig& config, int boundary = -1);
OneClassSvmModel fit_one_class_svm(const std::vector<AttributionMap>& maps,
                                   const OcsvmConfig& config);

// score = sum_i alpha_i k(sv_i, x) - rho; status +1 iff score >= 0.
SvmDecision decide(const OneClassSvmModel& model, const std::vector<float>& features);
SvmDecision decide(const OneClassSvmModel& model, const AttributionMap& map);

void save_svm_model(const OneClassSvmModel& model, const std::string& path);
OneClassSvmModel load_svm_model(const std::string& path);

// Per-boundary SVMs for one classifier, plus the provenance needed to
// reproduce the attribution maps they were fit on.
struct SvmBank {
    std::map<int, OneClassSvmModel> models;
    json provenance;  // classifier hash, baseline policy, steps, seeds

    const OneClassSvmModel& at(int boundary) const;
};

// Directory layout: bank.json plus one boundary_<index>.svm file per model.
void save_svm_bank(const SvmBank& bank, const std::string& dir);
SvmBank load_svm_bank(const std::string& dir);

}  // namespace misa
