#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "misa/datakit.hpp"
#include "misa/io.hpp"
#include "misa/misa.hpp"
#include "misa/nnet.hpp"
#include "misa/rng.hpp"
#include "misa/tensor.hpp"

namespace misa {

// Detection rates of both stages over a labeled probe set. The confirmation
// stage only filters anomaly-stage positives, so final rates can never exceed
// the svm rates.
struct RatesReport {
    double svm_tpr = 0.0, svm_fpr = 0.0;
    double final_tpr = 0.0, final_fpr = 0.0;
    std::size_t trojaned_count = 0, clean_count = 0;
    std::size_t svm_tp = 0, svm_fp = 0, final_tp = 0, final_fp = 0;
    std::string model_id, trigger_id;

    json to_json() const;
    static RatesReport from_json(const json& j);
};

// `trojaned[i]` is the ground truth for `verdicts[i]`. A probe counts as an
// anomaly-stage positive when any scanned boundary's gate fired, and as a
// final positive when the verdict status is -1.
RatesReport rates(const std::vector<Verdict>& verdicts, const std::vector<bool>& trojaned,
                  const std::string& model_id = "", const std::string& trigger_id = "");

struct RocPoint {
    double threshold = 0.0;  // NaN on the synthetic (0,0) / (1,1) anchor points
    double fpr = 0.0;
    double tpr = 0.0;
};

struct RocCurve {
    std::vector<RocPoint> points;  // sorted by fpr, then tpr; anchors included
    double auc = 0.0;              // trapezoidal rule over the sorted points

    std::string to_csv() const;  // header threshold,fpr,tpr; NaN prints as an empty field
    json to_json() const;
};

// Sweeps a thresholded detector over the probe set. `fires(th, i)` reports
// whether probe i is called trojaned at threshold th. The grid must cover
// [0, 1]; both probe classes must be non-empty. (0,0) and (1,1) anchors are
// appended when the sweep itself does not reach them.
RocCurve roc_sweep(const std::function<bool(double threshold, std::size_t probe)>& fires,
                   const std::vector<bool>& trojaned, const std::vector<double>& thresholds);

// Convenience sweep for score-based detectors: fires when score >= th
// (fire_above) or score <= th.
RocCurve roc_from_scores(const std::vector<double>& scores, const std::vector<bool>& trojaned,
                         const std::vector<double>& thresholds, bool fire_above = true);

// Evenly spaced grid {0, 1/(n-1), ..., 1} used by the threshold sweeps.
std::vector<double> threshold_grid(int point_count = 21);

// Shannon entropy (natural log) of the model's softmax on one input, computed
// in double from the logits.
double prediction_entropy(const NetworkModel& model, const Tensor& input);

// Mean prediction entropy over `overlay_count` clean images superimposed onto
// x: z = clamp(x + overlay, 0, 1). Overlays are drawn without replacement.
double strip_entropy(const NetworkModel& model, const Tensor& image,
                     const LabeledDataset& overlay_set, int overlay_count, Rng& rng);

// Entropy cutoff for a false-positive budget: the ceil(budget * n)-th smallest
// calibration entropy. Budget 0 gives -infinity (never fires).
double strip_threshold(const std::vector<double>& clean_entropies, double fpr_budget);

struct StripConfig {
    int overlay_count = 100;
    double fpr_budget = 0.01;
};

struct StripResult {
    int status = 1;  // -1 trojaned, +1 clean
    double entropy = 0.0;
    double threshold = 0.0;
    bool calibration_warning = false;  // calibration set smaller than 1/budget
};

// Flags the input as trojaned when its overlay entropy falls strictly below
// the budget quantile of the clean calibration entropies.
StripResult strip_detect(const NetworkModel& model, const Tensor& image,
                         const LabeledDataset& overlay_set,
                         const std::vector<double>& clean_entropies, Rng& rng,
                         const StripConfig& config = {});

}  // namespace misa
