#pragma once

#include <functional>
#include <string>
#include <vector>

#include "misa/datakit.hpp"
#include "misa/evalkit.hpp"
#include "misa/io.hpp"
#include "misa/misa.hpp"
#include "misa/nnet.hpp"
#include "misa/triggers.hpp"

namespace misa {

// Receives one structured progress record per step; the CLI renders them as
// JSON lines or terse human text. Null sinks are allowed.
using EventSink = std::function<void(const json&)>;

// Experiment description: one JSON document naming every artifact, knob, and
// seed, so a rerun reproduces the outputs byte for byte. File references and
// the output directory resolve relative to the manifest's own directory.
struct Manifest {
    json doc;
    std::string dir;  // directory the manifest was loaded from

    static Manifest load(const std::string& path);
    static Manifest from_json(const json& doc, const std::string& dir);

    // Dotted-path override, e.g. "svm.nu=0.5". The value is parsed as JSON
    // when possible and kept as a string otherwise. The path must already
    // exist in the manifest.
    void apply_override(const std::string& assignment);

    std::string name() const;
    std::string output_dir() const;  // absolute or manifest-relative, resolved
    std::string models_dir() const;
    std::string banks_dir() const;
    std::string attributions_dir() const;
    std::string verdicts_dir() const;
    std::string reports_dir() const;

    const json& section(const std::string& key) const;  // throws if absent
    json section_or(const std::string& key, json fallback) const;
    bool has_poison() const;
    // "trojaned" when a poison plan is present, else "clean".
    std::string subject_model() const;
};

// Deterministic dataset splits described by the manifest's dataset section.
struct DatasetBundle {
    LabeledDataset train, validation, holdout;
};
DatasetBundle load_dataset(const Manifest& manifest);

TrainConfig train_config_from(const json& section);
OcsvmConfig svm_config_from(const json& section);
BaselinePolicy baseline_policy_from(const json& section);
DetectConfig detect_config_from(const json& section);

// The labeled stream detect and evaluate walk: clean holdout draws followed
// by trigger-stamped draws, both pinned by the probes seed.
struct ProbeSet {
    std::vector<Tensor> images;
    std::vector<int> true_labels;
    std::vector<bool> trojaned;
    std::vector<std::string> ids;
};
ProbeSet build_probes(const Manifest& manifest, const LabeledDataset& source);

struct TrainOutcome {
    bool accepted = true;
    json report;
};

// Trains the clean reference model and, when a poison plan is present, the
// trojaned model. Models land in models/, the gate report in reports/. A
// trojaned model failing the attack-success or accuracy-drop gate flips
// `accepted` (artifacts are still written).
TrainOutcome run_train(const Manifest& manifest, const EventSink& events = {});

// Fits the per-boundary anomaly bank for the subject model from clean
// validation attributions; writes banks/<model>/.
json run_fit(const Manifest& manifest, const EventSink& events = {});

// Scans the probe stream with the subject model and its bank; writes a
// provenance line (classifier hash, probe-stream fingerprint) followed by one
// JSON line per probe to verdicts/verdicts.jsonl. Refuses to run when the
// bank's recorded classifier hash does not match the model file.
json run_detect(const Manifest& manifest, const EventSink& events = {});

// Aggregates the verdict log into detection rates and threshold-sweep curves,
// runs the entropy-overlay baseline on the same probes, and writes
// reports/evaluation.json plus the ROC CSVs.
json run_evaluate(const Manifest& manifest, const EventSink& events = {});

// Numerical self-checks (gradients, attribution completeness, anomaly-model
// solver, extraction rule). Returns true when every check passes.
bool run_doctor(const EventSink& events = {});

}  // namespace misa
