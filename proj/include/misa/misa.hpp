#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "misa/attribution.hpp"
#include "misa/datakit.hpp"
#include "misa/io.hpp"
#include "misa/nnet.hpp"
#include "misa/ocsvm.hpp"
#include "misa/rng.hpp"
#include "misa/triggers.hpp"

namespace misa {

// A candidate trigger recovered from an anomalous attribution map: the binary
// mask of cells whose attribution exceeds mean + 2 sd, and the activation
// values those cells carried in the probe input.
struct CandidateTrigger {
    int boundary = 0;
    Tensor mask;    // 1.0 where selected, 0.0 elsewhere; same shape as the boundary activation
    Tensor values;  // mask * activation
    std::string source_id;   // free-form provenance of the probe input
    double att_mean = 0.0;   // population mean of the attribution map
    double att_sd = 0.0;     // population standard deviation
    std::size_t active_count() const;
    bool empty() const { return active_count() == 0; }

    json to_json() const;
    static CandidateTrigger from_json(const json& j);
};

// Mask/value extraction. Statistics are computed in double over the whole map
// (population variance); the mask keeps cells strictly above mean + 2 sd.
CandidateTrigger extract_candidate_trigger(const Tensor& activation, const AttributionMap& att,
                                           const std::string& source_id = "");

struct TriggerEvalConfig {
    int sample_count = 100;  // images drawn per evaluation
    // paste overwrites masked cells with the stored values; add_clamped adds
    // them instead (clamping applies only at the pixel boundary, where the
    // [0, 1] range is meaningful).
    InjectMode mode = InjectMode::paste;
};

// Fraction of held-out images (true label != target) that the model assigns
// to `target` once the candidate trigger is stamped in. Input-boundary
// triggers are pasted into pixels and clamped to [0, 1]; deeper triggers
// overwrite the boundary activation and run the remaining layers.
double evaluate_trigger(const NetworkModel& model, const LabeledDataset& clean_set,
                        const CandidateTrigger& trigger, int target, Rng& rng,
                        const TriggerEvalConfig& config = {});

// One row of the per-layer scan record.
struct LayerTrace {
    int boundary = 0;
    int svm_status = 1;
    double svm_score = 0.0;
    bool extracted = false;        // stage 2 ran
    double att_mean = 0.0;
    double att_sd = 0.0;
    std::size_t mask_active = 0;
    bool evaluated = false;        // stage 3 ran
    double flip_fraction = -1.0;   // valid when evaluated

    json to_json() const;
    static LayerTrace from_json(const json& j);
};

struct Verdict {
    int status = 1;                 // +1 clean, -1 trojaned
    int predicted_label = -1;       // class whose attribution was scanned
    int flagged_boundary = -1;      // first boundary that confirmed, -1 if none
    double flip_fraction = -1.0;    // flip rate at the flagged boundary
    CandidateTrigger trigger;       // populated when status == -1
    std::vector<LayerTrace> trace;  // one row per scanned boundary, ascending

    // Highest flip fraction observed across evaluated layers, -1.0 if stage 3
    // never ran. A threshold-free score for ROC sweeps.
    double max_flip() const;

    json to_json() const;
    static Verdict from_json(const json& j);
};

struct DetectConfig {
    double flip_threshold = 0.5;    // confirm when flip fraction reaches this
    int steps = 64;                 // integration steps per attribution map
    int eval_sample_count = 100;    // images drawn per trigger evaluation
    InjectMode inject_mode = InjectMode::paste;
    std::uint64_t eval_seed = 1;    // base seed; each boundary gets a substream
    // When true the scan keeps extracting and evaluating after the first
    // confirmation so every anomalous layer carries a flip fraction (used for
    // score sweeps). The verdict is identical either way.
    bool exhaustive_trace = false;
};

// Full three-stage scan of one input: anomaly gate per monitored boundary,
// trigger extraction on the gated ones, flip-rate confirmation. Boundaries
// are scanned in ascending order; with exhaustive_trace unset the scan stops
// at the first confirmed layer.
Verdict detect(const NetworkModel& model, const SvmBank& bank, const Tensor& image,
               const LabeledDataset& clean_set, const std::vector<Tensor>& baselines,
               const DetectConfig& config = {});

struct FitBankConfig {
    std::vector<int> boundaries;   // empty means every monitored boundary
    OcsvmConfig svm;
    BaselinePolicy baseline_policy;
    int steps = 64;
    int map_count = 512;           // attribution maps per boundary (capped at the set size)
    std::uint64_t sample_seed = 1; // which reference images get attributed
};

// Trains the per-boundary anomaly models on attribution maps of clean
// reference images (targets = model predictions). Provenance records the
// classifier hash and every knob needed to reproduce the bank. `map_sink`,
// when set, receives each boundary's attribution maps before fitting (used to
// persist them for audit).
using AttributionSink = std::function<void(int boundary, const std::vector<AttributionMap>&)>;
SvmBank fit_bank(const NetworkModel& model, const LabeledDataset& reference,
                 const FitBankConfig& config = {}, const AttributionSink& map_sink = {});

}  // namespace misa
