#include "misa/misa.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace misa {

namespace {

void check_trigger_shape(const NetworkModel& model, const CandidateTrigger& trigger) {
    if (trigger.boundary < 0 || trigger.boundary > model.layer_count())
        throw std::invalid_argument("trigger boundary " + std::to_string(trigger.boundary) +
                                    " out of range for a " + std::to_string(model.layer_count()) +
                                    "-layer network");
    if (!trigger.mask.same_shape(trigger.values))
        throw std::invalid_argument("trigger mask and values must share a shape");
    const Tensor probe(model.boundary_shapes[static_cast<std::size_t>(trigger.boundary)]);
    if (!trigger.mask.same_shape(probe))
        throw std::invalid_argument("trigger shape " + shape_to_string(trigger.mask.shape) +
                                    " does not match boundary activation shape " +
                                    shape_to_string(probe.shape));
}

json tensor_shape_json(const Tensor& t) {
    json a = json::array();
    for (int d : t.shape) a.push_back(d);
    return a;
}

std::vector<int> shape_from_json(const json& a) {
    std::vector<int> shape;
    for (const auto& d : a) shape.push_back(d.get<int>());
    return shape;
}

}  // namespace

std::size_t CandidateTrigger::active_count() const {
    std::size_t n = 0;
    for (float v : mask.data)
        if (v != 0.0f) ++n;
    return n;
}

json CandidateTrigger::to_json() const {
    json cells_idx = json::array();
    json cells_val = json::array();
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
        if (mask.data[i] != 0.0f) {
            cells_idx.push_back(i);
            cells_val.push_back(values.data[i]);
        }
    }
    return json{{"kind", "candidate_trigger"}, {"boundary", boundary},
                {"source_id", source_id},      {"att_mean", att_mean},
                {"att_sd", att_sd},            {"shape", tensor_shape_json(mask)},
                {"indices", cells_idx},        {"values", cells_val}};
}

CandidateTrigger CandidateTrigger::from_json(const json& j) {
    if (j.value("kind", "") != "candidate_trigger")
        throw std::runtime_error("candidate trigger record has wrong kind");
    CandidateTrigger t;
    t.boundary = j.at("boundary").get<int>();
    t.source_id = j.at("source_id").get<std::string>();
    t.att_mean = j.at("att_mean").get<double>();
    t.att_sd = j.at("att_sd").get<double>();
    const std::vector<int> shape = shape_from_json(j.at("shape"));
    t.mask = Tensor(shape);
    t.values = Tensor(shape);
    const auto& idx = j.at("indices");
    const auto& val = j.at("values");
    if (idx.size() != val.size())
        throw std::runtime_error("candidate trigger record has mismatched cell arrays");
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const std::size_t cell = idx[i].get<std::size_t>();
        if (cell >= t.mask.data.size())
            throw std::runtime_error("candidate trigger cell index out of range");
        t.mask.data[cell] = 1.0f;
        t.values.data[cell] = val[i].get<float>();
    }
    return t;
}

CandidateTrigger extract_candidate_trigger(const Tensor& activation, const AttributionMap& att,
                                           const std::string& source_id) {
    if (!activation.same_shape(att.values))
        throw std::invalid_argument(
            "extract_candidate_trigger: activation shape " + shape_to_string(activation.shape) +
            " does not match attribution shape " + shape_to_string(att.values.shape));
    const std::size_t n = att.values.data.size();
    double mean = 0.0;
    for (float v : att.values.data) mean += static_cast<double>(v);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (float v : att.values.data) {
        const double d = static_cast<double>(v) - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    const double sd = std::sqrt(var);
    const double cutoff = mean + 2.0 * sd;

    CandidateTrigger trigger;
    trigger.boundary = att.boundary;
    trigger.source_id = source_id;
    trigger.att_mean = mean;
    trigger.att_sd = sd;
    trigger.mask = Tensor(activation.shape);
    trigger.values = Tensor(activation.shape);
    for (std::size_t i = 0; i < n; ++i) {
        if (static_cast<double>(att.values.data[i]) > cutoff) {
            trigger.mask.data[i] = 1.0f;
            trigger.values.data[i] = activation.data[i];
        }
    }
    return trigger;
}

double evaluate_trigger(const NetworkModel& model, const LabeledDataset& clean_set,
                        const CandidateTrigger& trigger, int target, Rng& rng,
                        const TriggerEvalConfig& config) {
    check_trigger_shape(model, trigger);
    if (target < 0 || target >= model.class_count)
        throw std::invalid_argument("evaluate_trigger: target class " + std::to_string(target) +
                                    " out of range");
    if (config.sample_count < 1)
        throw std::invalid_argument("evaluate_trigger: sample_count must be positive");

    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < clean_set.labels.size(); ++i)
        if (clean_set.labels[i] != target) eligible.push_back(i);
    const std::size_t k = static_cast<std::size_t>(config.sample_count);
    if (eligible.size() < k)
        throw std::runtime_error("evaluate_trigger: only " + std::to_string(eligible.size()) +
                                 " eligible images (label != " + std::to_string(target) +
                                 "), need " + std::to_string(k));

    const std::vector<std::size_t> draw = rng.sample_without_replacement(eligible.size(), k);
    std::size_t flips = 0;
    for (std::size_t pick : draw) {
        const Tensor& image = clean_set.images[eligible[pick]];
        int predicted = -1;
        if (trigger.boundary == 0) {
            Tensor stamped = image;
            for (std::size_t i = 0; i < stamped.data.size(); ++i) {
                if (trigger.mask.data[i] == 0.0f) continue;
                const float v = config.mode == InjectMode::add_clamped
                                    ? stamped.data[i] + trigger.values.data[i]
                                    : trigger.values.data[i];
                stamped.data[i] = std::clamp(v, 0.0f, 1.0f);
            }
            predicted = predict(model, stamped);
        } else {
            Tensor act = boundary_activation(model, image, trigger.boundary);
            for (std::size_t i = 0; i < act.data.size(); ++i) {
                if (trigger.mask.data[i] == 0.0f) continue;
                act.data[i] = config.mode == InjectMode::add_clamped
                                  ? act.data[i] + trigger.values.data[i]
                                  : trigger.values.data[i];
            }
            predicted = suffix_predict(model, trigger.boundary, act);
        }
        if (predicted == target) ++flips;
    }
    return static_cast<double>(flips) / static_cast<double>(k);
}

json LayerTrace::to_json() const {
    return json{{"boundary", boundary},
                {"svm_status", svm_status},
                {"svm_score", svm_score},
                {"extracted", extracted},
                {"att_mean", att_mean},
                {"att_sd", att_sd},
                {"mask_active", mask_active},
                {"evaluated", evaluated},
                {"flip_fraction", flip_fraction}};
}

LayerTrace LayerTrace::from_json(const json& j) {
    LayerTrace t;
    t.boundary = j.at("boundary").get<int>();
    t.svm_status = j.at("svm_status").get<int>();
    t.svm_score = j.at("svm_score").get<double>();
    t.extracted = j.at("extracted").get<bool>();
    t.att_mean = j.at("att_mean").get<double>();
    t.att_sd = j.at("att_sd").get<double>();
    t.mask_active = j.at("mask_active").get<std::size_t>();
    t.evaluated = j.at("evaluated").get<bool>();
    t.flip_fraction = j.at("flip_fraction").get<double>();
    return t;
}

double Verdict::max_flip() const {
    double best = -1.0;
    for (const LayerTrace& row : trace)
        if (row.evaluated && row.flip_fraction > best) best = row.flip_fraction;
    return best;
}

json Verdict::to_json() const {
    json rows = json::array();
    for (const LayerTrace& row : trace) rows.push_back(row.to_json());
    json j{{"kind", "verdict"},
           {"status", status},
           {"predicted_label", predicted_label},
           {"flagged_boundary", flagged_boundary},
           {"flip_fraction", flip_fraction},
           {"max_flip", max_flip()},
           {"trace", rows}};
    j["trigger"] = status == -1 ? trigger.to_json() : json(nullptr);
    return j;
}

Verdict Verdict::from_json(const json& j) {
    if (j.value("kind", "") != "verdict") throw std::runtime_error("verdict record has wrong kind");
    Verdict v;
    v.status = j.at("status").get<int>();
    v.predicted_label = j.at("predicted_label").get<int>();
    v.flagged_boundary = j.at("flagged_boundary").get<int>();
    v.flip_fraction = j.at("flip_fraction").get<double>();
    for (const auto& row : j.at("trace")) v.trace.push_back(LayerTrace::from_json(row));
    if (!j.at("trigger").is_null()) v.trigger = CandidateTrigger::from_json(j.at("trigger"));
    return v;
}

Verdict detect(const NetworkModel& model, const SvmBank& bank, const Tensor& image,
               const LabeledDataset& clean_set, const std::vector<Tensor>& baselines,
               const DetectConfig& config) {
    if (image.shape != model.input_shape)
        throw std::invalid_argument("detect: image shape " + shape_to_string(image.shape) +
                                    " does not match model input " +
                                    shape_to_string(model.input_shape));
    if (bank.models.empty()) throw std::invalid_argument("detect: anomaly bank is empty");
    if (baselines.empty()) throw std::invalid_argument("detect: need at least one baseline");
    if (config.flip_threshold < 0.0 || config.flip_threshold > 1.0)
        throw std::invalid_argument("detect: flip threshold must lie in [0, 1]");

    Verdict verdict;
    verdict.predicted_label = predict(model, image);
    const Rng seed_root(config.eval_seed);

    for (const auto& [boundary, svm] : bank.models) {
        LayerTrace row;
        row.boundary = boundary;
        try {
            const AttributionMap att = integrated_gradients(model, image, verdict.predicted_label,
                                                            boundary, baselines, config.steps,
                                                            "scan");
            const SvmDecision gate = decide(svm, att);
            row.svm_status = gate.status;
            row.svm_score = gate.score;
            if (gate.status == -1) {
                const Tensor act = boundary_activation(model, image, boundary);
                const CandidateTrigger candidate = extract_candidate_trigger(act, att, "scan");
                row.extracted = true;
                row.att_mean = candidate.att_mean;
                row.att_sd = candidate.att_sd;
                row.mask_active = candidate.active_count();
                if (!candidate.empty()) {
                    Rng eval_rng = seed_root.split(static_cast<std::uint64_t>(boundary));
                    const TriggerEvalConfig eval_cfg{config.eval_sample_count, config.inject_mode};
                    row.evaluated = true;
                    row.flip_fraction = evaluate_trigger(model, clean_set, candidate,
                                                         verdict.predicted_label, eval_rng,
                                                         eval_cfg);
                    if (verdict.status == 1 && row.flip_fraction >= config.flip_threshold) {
                        verdict.status = -1;
                        verdict.flagged_boundary = boundary;
                        verdict.flip_fraction = row.flip_fraction;
                        verdict.trigger = candidate;
                    }
                }
            }
        } catch (const std::exception& e) {
            throw std::runtime_error("detect: boundary " + std::to_string(boundary) + ": " +
                                     e.what());
        }
        verdict.trace.push_back(row);
        if (verdict.status == -1 && !config.exhaustive_trace) break;
    }
    return verdict;
}

SvmBank fit_bank(const NetworkModel& model, const LabeledDataset& reference,
                 const FitBankConfig& config, const AttributionSink& map_sink) {
    if (reference.images.empty()) throw std::invalid_argument("fit_bank: reference set is empty");
    if (config.map_count < 2)
        throw std::invalid_argument("fit_bank: need at least 2 attribution maps per boundary");
    if (config.steps < 1) throw std::invalid_argument("fit_bank: steps must be positive");

    std::vector<int> boundaries = config.boundaries.empty() ? model.monitored : config.boundaries;
    std::sort(boundaries.begin(), boundaries.end());
    for (std::size_t i = 0; i + 1 < boundaries.size(); ++i)
        if (boundaries[i] == boundaries[i + 1])
            throw std::invalid_argument("fit_bank: duplicate boundary " +
                                        std::to_string(boundaries[i]));
    for (int b : boundaries)
        if (!model.is_monitored(b))
            throw std::invalid_argument("fit_bank: boundary " + std::to_string(b) +
                                        " is not monitored");

    const std::size_t want = std::min<std::size_t>(static_cast<std::size_t>(config.map_count),
                                                   reference.images.size());
    if (want < 2) throw std::invalid_argument("fit_bank: reference set has fewer than 2 images");
    Rng sampler(config.sample_seed);
    std::vector<std::size_t> chosen =
        sampler.sample_without_replacement(reference.images.size(), want);
    std::sort(chosen.begin(), chosen.end());

    std::vector<Tensor> images;
    images.reserve(chosen.size());
    for (std::size_t i : chosen) images.push_back(reference.images[i]);

    const std::vector<Tensor> baselines =
        resolve_baselines(config.baseline_policy, model.input_shape, &reference);

    SvmBank bank;
    for (int b : boundaries) {
        try {
            const std::vector<AttributionMap> maps =
                batch_attribute(model, images, {}, b, baselines, config.steps,
                                config.baseline_policy.id());
            if (map_sink) map_sink(b, maps);
            bank.models.emplace(b, fit_one_class_svm(maps, config.svm));
        } catch (const std::exception& e) {
            throw std::runtime_error("fit_bank: boundary " + std::to_string(b) + ": " + e.what());
        }
    }

    json prov{{"classifier_hash", hash_hex(model_param_hash(model))},
              {"baseline_policy", config.baseline_policy.to_json()},
              {"steps", config.steps},
              {"map_count", want},
              {"sample_seed", config.sample_seed},
              {"nu", config.svm.nu},
              {"gamma", config.svm.gamma},
              {"standardize", config.svm.standardize},
              {"kkt_tolerance", config.svm.kkt_tolerance},
              {"boundaries", boundaries}};
    bank.provenance = prov;
    return bank;
}

}  // namespace misa
