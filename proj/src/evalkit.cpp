#include "misa/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace misa {

namespace {

bool svm_positive(const Verdict& v) {
    for (const LayerTrace& row : v.trace)
        if (row.svm_status == -1) return true;
    return false;
}

double ratio(std::size_t num, std::size_t den) {
    return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

json RatesReport::to_json() const {
    return json{{"kind", "rates_report"},
                {"model_id", model_id},
                {"trigger_id", trigger_id},
                {"svm_tpr", svm_tpr},
                {"svm_fpr", svm_fpr},
                {"final_tpr", final_tpr},
                {"final_fpr", final_fpr},
                {"trojaned_count", trojaned_count},
                {"clean_count", clean_count},
                {"svm_tp", svm_tp},
                {"svm_fp", svm_fp},
                {"final_tp", final_tp},
                {"final_fp", final_fp}};
}

RatesReport RatesReport::from_json(const json& j) {
    if (j.value("kind", "") != "rates_report")
        throw std::runtime_error("rates record has wrong kind");
    RatesReport r;
    r.model_id = j.at("model_id").get<std::string>();
    r.trigger_id = j.at("trigger_id").get<std::string>();
    r.svm_tpr = j.at("svm_tpr").get<double>();
    r.svm_fpr = j.at("svm_fpr").get<double>();
    r.final_tpr = j.at("final_tpr").get<double>();
    r.final_fpr = j.at("final_fpr").get<double>();
    r.trojaned_count = j.at("trojaned_count").get<std::size_t>();
    r.clean_count = j.at("clean_count").get<std::size_t>();
    r.svm_tp = j.at("svm_tp").get<std::size_t>();
    r.svm_fp = j.at("svm_fp").get<std::size_t>();
    r.final_tp = j.at("final_tp").get<std::size_t>();
    r.final_fp = j.at("final_fp").get<std::size_t>();
    return r;
}

RatesReport rates(const std::vector<Verdict>& verdicts, const std::vector<bool>& trojaned,
                  const std::string& model_id, const std::string& trigger_id) {
    if (verdicts.size() != trojaned.size())
        throw std::invalid_argument("rates: verdicts and ground-truth labels differ in length");
    RatesReport r;
    r.model_id = model_id;
    r.trigger_id = trigger_id;
    for (std::size_t i = 0; i < verdicts.size(); ++i) {
        const bool svm_pos = svm_positive(verdicts[i]);
        const bool final_pos = verdicts[i].status == -1;
        if (final_pos && !svm_pos)
            throw std::logic_error("rates: verdict confirmed without an anomaly-stage fire");
        if (trojaned[i]) {
            ++r.trojaned_count;
            if (svm_pos) ++r.svm_tp;
            if (final_pos) ++r.final_tp;
        } else {
            ++r.clean_count;
            if (svm_pos) ++r.svm_fp;
            if (final_pos) ++r.final_fp;
        }
    }
    if (r.trojaned_count == 0)
        throw std::invalid_argument("rates: probe set contains no trojaned images");
    if (r.clean_count == 0)
        throw std::invalid_argument("rates: probe set contains no clean images");
    r.svm_tpr = ratio(r.svm_tp, r.trojaned_count);
    r.svm_fpr = ratio(r.svm_fp, r.clean_count);
    r.final_tpr = ratio(r.final_tp, r.trojaned_count);
    r.final_fpr = ratio(r.final_fp, r.clean_count);
    return r;
}

std::string RocCurve::to_csv() const {
    std::ostringstream out;
    out << "threshold,fpr,tpr\n";
    out.precision(17);
    for (const RocPoint& p : points) {
        if (std::isnan(p.threshold)) out << "";
        else out << p.threshold;
        out << "," << p.fpr << "," << p.tpr << "\n";
    }
    return out.str();
}

json RocCurve::to_json() const {
    json pts = json::array();
    for (const RocPoint& p : points) {
        json row{{"fpr", p.fpr}, {"tpr", p.tpr}};
        row["threshold"] = std::isnan(p.threshold) ? json(nullptr) : json(p.threshold);
        pts.push_back(row);
    }
    return json{{"kind", "roc_curve"}, {"auc", auc}, {"points", pts}};
}

RocCurve roc_sweep(const std::function<bool(double threshold, std::size_t probe)>& fires,
                   const std::vector<bool>& trojaned, const std::vector<double>& thresholds) {
    if (!fires) throw std::invalid_argument("roc_sweep: detector closure is empty");
    if (thresholds.empty()) throw std::invalid_argument("roc_sweep: threshold grid is empty");
    const auto [lo, hi] = std::minmax_element(thresholds.begin(), thresholds.end());
    if (*lo > 0.0 || *hi < 1.0)
        throw std::invalid_argument("roc_sweep: threshold grid must cover [0, 1]");
    std::size_t pos = 0, neg = 0;
    for (bool t : trojaned) (t ? pos : neg) += 1;
    if (pos == 0) throw std::invalid_argument("roc_sweep: probe set contains no trojaned images");
    if (neg == 0) throw std::invalid_argument("roc_sweep: probe set contains no clean images");

    RocCurve curve;
    for (double th : thresholds) {
        std::size_t tp = 0, fp = 0;
        for (std::size_t i = 0; i < trojaned.size(); ++i) {
            if (!fires(th, i)) continue;
            (trojaned[i] ? tp : fp) += 1;
        }
        curve.points.push_back({th, ratio(fp, neg), ratio(tp, pos)});
    }
    const auto by_rate = [](const RocPoint& a, const RocPoint& b) {
        return a.fpr != b.fpr ? a.fpr < b.fpr : a.tpr < b.tpr;
    };
    std::sort(curve.points.begin(), curve.points.end(), by_rate);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (curve.points.front().fpr != 0.0 || curve.points.front().tpr != 0.0)
        curve.points.insert(curve.points.begin(), {nan, 0.0, 0.0});
    if (curve.points.back().fpr != 1.0 || curve.points.back().tpr != 1.0)
        curve.points.push_back({nan, 1.0, 1.0});

    double auc = 0.0;
    for (std::size_t i = 1; i < curve.points.size(); ++i) {
        const RocPoint& a = curve.points[i - 1];
        const RocPoint& b = curve.points[i];
        auc += (b.fpr - a.fpr) * (a.tpr + b.tpr) * 0.5;
    }
    curve.auc = auc;
    return curve;
}

RocCurve roc_from_scores(const std::vector<double>& scores, const std::vector<bool>& trojaned,
                         const std::vector<double>& thresholds, bool fire_above) {
    if (scores.size() != trojaned.size())
        throw std::invalid_argument("roc_from_scores: scores and labels differ in length");
    return roc_sweep(
        [&](double th, std::size_t i) {
            return fire_above ? scores[i] >= th : scores[i] <= th;
        },
        trojaned, thresholds);
}

std::vector<double> threshold_grid(int point_count) {
    if (point_count < 2) throw std::invalid_argument("threshold_grid: need at least 2 points");
    std::vector<double> grid(static_cast<std::size_t>(point_count));
    for (int i = 0; i < point_count; ++i)
        grid[static_cast<std::size_t>(i)] =
            static_cast<double>(i) / static_cast<double>(point_count - 1);
    return grid;
}

double prediction_entropy(const NetworkModel& model, const Tensor& input) {
    const ForwardResult fwd = forward_with_taps(model, input, {});
    double max_logit = -std::numeric_limits<double>::infinity();
    for (float l : fwd.logits.data) max_logit = std::max(max_logit, static_cast<double>(l));
    double z = 0.0;
    for (float l : fwd.logits.data) z += std::exp(static_cast<double>(l) - max_logit);
    double h = 0.0;
    for (float l : fwd.logits.data) {
        const double p = std::exp(static_cast<double>(l) - max_logit) / z;
        if (p > 0.0) h -= p * std::log(p);
    }
    return h;
}

double strip_entropy(const NetworkModel& model, const Tensor& image,
                     const LabeledDataset& overlay_set, int overlay_count, Rng& rng) {
    if (overlay_count < 1)
        throw std::invalid_argument("strip_entropy: overlay count must be positive");
    if (image.shape != model.input_shape)
        throw std::invalid_argument("strip_entropy: image shape " +
                                    shape_to_string(image.shape) + " does not match model input");
    const std::size_t n = static_cast<std::size_t>(overlay_count);
    if (overlay_set.images.size() < n)
        throw std::invalid_argument("strip_entropy: overlay set holds " +
                                    std::to_string(overlay_set.images.size()) +
                                    " images, need " + std::to_string(n));
    const auto picks = rng.sample_without_replacement(overlay_set.images.size(), n);
    double total = 0.0;
    for (std::size_t pick : picks) {
        const Tensor& overlay = overlay_set.images[pick];
        if (overlay.shape != image.shape)
            throw std::invalid_argument("strip_entropy: overlay shape mismatch");
        Tensor z = image;
        for (std::size_t i = 0; i < z.data.size(); ++i)
            z.data[i] = std::clamp(z.data[i] + overlay.data[i], 0.0f, 1.0f);
        total += prediction_entropy(model, z);
    }
    return total / static_cast<double>(n);
}

double strip_threshold(const std::vector<double>& clean_entropies, double fpr_budget) {
    if (clean_entropies.empty())
        throw std::invalid_argument("strip_threshold: calibration set is empty");
    if (fpr_budget < 0.0 || fpr_budget > 1.0)
        throw std::invalid_argument("strip_threshold: budget must lie in [0, 1]");
    if (fpr_budget == 0.0) return -std::numeric_limits<double>::infinity();
    std::vector<double> sorted = clean_entropies;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    std::size_t k = static_cast<std::size_t>(
        std::ceil(fpr_budget * static_cast<double>(n)));
    if (k < 1) k = 1;
    if (k > n) k = n;
    return sorted[k - 1];
}

StripResult strip_detect(const NetworkModel& model, const Tensor& image,
                         const LabeledDataset& overlay_set,
                         const std::vector<double>& clean_entropies, Rng& rng,
                         const StripConfig& config) {
    StripResult result;
    result.threshold = strip_threshold(clean_entropies, config.fpr_budget);
    if (config.fpr_budget > 0.0)
        result.calibration_warning =
            static_cast<double>(clean_entropies.size()) < 1.0 / config.fpr_budget;
    result.entropy = strip_entropy(model, image, overlay_set, config.overlay_count, rng);
    result.status = result.entropy < result.threshold ? -1 : 1;
    return result;
}

}  // namespace misa
