#include "misa/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "misa/attribution.hpp"
#include "misa/ocsvm.hpp"

namespace fs = std::filesystem;

namespace misa {

namespace {

void emit(const EventSink& events, json record) {
    if (events) events(std::move(record));
}

std::string join(const std::string& base, const std::string& leaf) {
    return (fs::path(base) / leaf).string();
}

std::string resolve_path(const std::string& dir, const std::string& p) {
    const fs::path candidate(p);
    if (candidate.is_absolute()) return candidate.string();
    return (fs::path(dir) / candidate).lexically_normal().string();
}

void require_keys(const json& obj, const std::set<std::string>& allowed,
                  const std::string& what) {
    for (const auto& [key, value] : obj.items())
        if (allowed.count(key) == 0)
            throw std::invalid_argument("manifest: unknown key \"" + key + "\" in " + what);
}

InjectMode inject_mode_from_name(const std::string& name) {
    if (name == "paste") return InjectMode::paste;
    if (name == "add_clamped" || name == "add") return InjectMode::add_clamped;
    throw std::invalid_argument("manifest: unknown inject mode \"" + name + "\"");
}

std::string probe_id(const char* prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s/%04zu", prefix, i);
    return std::string(buf);
}

// Content hash of the whole probe stream. Probe ids are positional, so only
// this ties a verdict log to the images it was actually computed from.
std::string probe_fingerprint(const ProbeSet& probes) {
    std::vector<std::uint8_t> blob;
    for (std::size_t i = 0; i < probes.images.size(); ++i) {
        const std::vector<float>& px = probes.images[i].data;
        const auto* p = reinterpret_cast<const std::uint8_t*>(px.data());
        blob.insert(blob.end(), p, p + px.size() * sizeof(float));
        const auto label = static_cast<std::uint32_t>(probes.true_labels[i]);
        for (int b = 0; b < 4; ++b) blob.push_back(static_cast<std::uint8_t>(label >> (8 * b)));
        blob.push_back(probes.trojaned[i] ? 1 : 0);
    }
    return hash_hex(fnv1a64(blob.data(), blob.size()));
}

const LabeledDataset& pick_split(const DatasetBundle& bundle, const std::string& name,
                                 const std::string& what) {
    if (name == "train") return bundle.train;
    if (name == "validation") return bundle.validation;
    if (name == "holdout") return bundle.holdout;
    throw std::invalid_argument("manifest: unknown split \"" + name + "\" for " + what);
}

std::string model_path_for(const Manifest& m, const std::string& which) {
    return join(m.models_dir(), which + ".model");
}

NetworkModel load_subject_model(const Manifest& m, const std::string& which,
                                const std::string& needed_by) {
    const std::string path = model_path_for(m, which);
    if (!fs::exists(path))
        throw std::runtime_error(needed_by + ": missing model file " + path +
                                 " (run the train command first)");
    return load_model(path);
}

// ---- manifest-section decoding ----------------------------------------------

int require_int(const json& obj, const std::string& key, const std::string& what) {
    if (!obj.contains(key))
        throw std::invalid_argument("manifest: " + what + " is missing \"" + key + "\"");
    return obj.at(key).get<int>();
}

}  // namespace

Manifest Manifest::load(const std::string& path) {
    if (!fs::exists(path)) throw std::runtime_error("manifest not found: " + path);
    json doc;
    try {
        doc = json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw std::runtime_error("manifest " + path + " is not valid JSON: " + e.what());
    }
    return from_json(doc, fs::path(path).parent_path().string());
}

Manifest Manifest::from_json(const json& doc, const std::string& dir) {
    if (!doc.is_object()) throw std::invalid_argument("manifest: top level must be an object");
    require_keys(doc,
                 {"schema_version", "name", "output_dir", "dataset", "model", "poison",
                  "attribution", "svm", "detection", "probes", "strip", "evaluate"},
                 "the top level");
    if (!doc.contains("schema_version") || !doc.at("schema_version").is_number_integer() ||
        doc.at("schema_version").get<int>() != 1)
        throw std::invalid_argument("manifest: schema_version must be the integer 1");
    for (const char* key : {"name", "output_dir"})
        if (!doc.contains(key) || !doc.at(key).is_string())
            throw std::invalid_argument(std::string("manifest: \"") + key +
                                        "\" must be a string");
    for (const char* key : {"dataset", "model"})
        if (!doc.contains(key) || !doc.at(key).is_object())
            throw std::invalid_argument(std::string("manifest: \"") + key +
                                        "\" must be an object");
    Manifest m;
    m.doc = doc;
    m.dir = dir.empty() ? "." : dir;
    return m;
}

void Manifest::apply_override(const std::string& assignment) {
    const std::size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw std::invalid_argument("override must look like section.key=value, got \"" +
                                    assignment + "\"");
    const std::string path = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);

    std::vector<std::string> parts;
    std::istringstream in(path);
    std::string part;
    while (std::getline(in, part, '.')) parts.push_back(part);
    if (parts.empty()) throw std::invalid_argument("override path is empty");

    json* node = &doc;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->is_object() || !node->contains(parts[i]))
            throw std::invalid_argument("override path \"" + path +
                                        "\" does not exist in the manifest");
        node = &node->at(parts[i]);
    }
    if (!node->is_object() || !node->contains(parts.back()))
        throw std::invalid_argument("override path \"" + path +
                                    "\" does not exist in the manifest");
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::parse_error&) {
        parsed = value;  // bare strings stay strings
    }
    (*node)[parts.back()] = parsed;
}

std::string Manifest::name() const { return doc.at("name").get<std::string>(); }

std::string Manifest::output_dir() const {
    return resolve_path(dir, doc.at("output_dir").get<std::string>());
}

std::string Manifest::models_dir() const { return join(output_dir(), "models"); }
std::string Manifest::banks_dir() const { return join(output_dir(), "banks"); }
std::string Manifest::attributions_dir() const { return join(output_dir(), "attributions"); }
std::string Manifest::verdicts_dir() const { return join(output_dir(), "verdicts"); }
std::string Manifest::reports_dir() const { return join(output_dir(), "reports"); }

const json& Manifest::section(const std::string& key) const {
    if (!doc.contains(key))
        throw std::invalid_argument("manifest: missing required section \"" + key + "\"");
    return doc.at(key);
}

json Manifest::section_or(const std::string& key, json fallback) const {
    return doc.contains(key) ? doc.at(key) : fallback;
}

bool Manifest::has_poison() const { return doc.contains("poison"); }

std::string Manifest::subject_model() const { return has_poison() ? "trojaned" : "clean"; }

DatasetBundle load_dataset(const Manifest& manifest) {
    const json& ds = manifest.section("dataset");
    require_keys(ds,
                 {"kind", "class_count", "height", "width", "channels", "per_class", "rng_seed",
                  "images", "labels", "split"},
                 "dataset");
    const std::string kind = ds.value("kind", "synthetic");
    LabeledDataset all;
    if (kind == "synthetic") {
        all = generate_synthetic_dataset(
            require_int(ds, "class_count", "dataset"), require_int(ds, "height", "dataset"),
            require_int(ds, "width", "dataset"), require_int(ds, "channels", "dataset"),
            require_int(ds, "per_class", "dataset"), ds.value("rng_seed", 1ULL));
    } else if (kind == "idx") {
        if (!ds.contains("images") || !ds.contains("labels"))
            throw std::invalid_argument("manifest: idx dataset needs \"images\" and \"labels\"");
        all = load_idx_dataset(resolve_path(manifest.dir, ds.at("images").get<std::string>()),
                               resolve_path(manifest.dir, ds.at("labels").get<std::string>()));
    } else {
        throw std::invalid_argument("manifest: unknown dataset kind \"" + kind + "\"");
    }

    SplitSpec spec;
    if (ds.contains("split")) {
        const json& sp = ds.at("split");
        require_keys(sp, {"train", "validation", "holdout", "rng_seed"}, "dataset.split");
        spec.train = sp.value("train", spec.train);
        spec.validation = sp.value("validation", spec.validation);
        spec.holdout = sp.value("holdout", spec.holdout);
        spec.rng_seed = sp.value("rng_seed", spec.rng_seed);
    }
    const SplitResult parts = split(all, spec);
    return DatasetBundle{parts.train, parts.validation, parts.holdout};
}

TrainConfig train_config_from(const json& section) {
    require_keys(section,
                 {"epochs", "batch_size", "learning_rate", "optimizer", "momentum", "beta1",
                  "beta2", "adam_eps", "rng_seed"},
                 "model.train");
    TrainConfig tc;
    tc.epochs = section.value("epochs", tc.epochs);
    tc.batch_size = section.value("batch_size", tc.batch_size);
    tc.learning_rate = section.value("learning_rate", tc.learning_rate);
    tc.optimizer = section.value("optimizer", tc.optimizer);
    tc.momentum = section.value("momentum", tc.momentum);
    tc.beta1 = section.value("beta1", tc.beta1);
    tc.beta2 = section.value("beta2", tc.beta2);
    tc.adam_eps = section.value("adam_eps", tc.adam_eps);
    tc.rng_seed = section.value("rng_seed", tc.rng_seed);
    return tc;
}

OcsvmConfig svm_config_from(const json& section) {
    require_keys(section,
                 {"nu", "gamma", "standardize", "kkt_tolerance", "max_iterations", "map_count",
                  "sample_seed", "boundaries"},
                 "svm");
    OcsvmConfig cfg;
    cfg.nu = section.value("nu", cfg.nu);
    cfg.gamma = section.value("gamma", cfg.gamma);
    cfg.standardize = section.value("standardize", cfg.standardize);
    cfg.kkt_tolerance = section.value("kkt_tolerance", cfg.kkt_tolerance);
    cfg.max_iterations = section.value("max_iterations", cfg.max_iterations);
    return cfg;
}

BaselinePolicy baseline_policy_from(const json& section) {
    if (section.contains("baseline")) return BaselinePolicy::from_json(section.at("baseline"));
    return BaselinePolicy{};
}

DetectConfig detect_config_from(const json& section) {
    require_keys(section,
                 {"flip_threshold", "eval_sample_count", "inject_mode", "eval_seed",
                  "exhaustive_trace"},
                 "detection");
    DetectConfig cfg;
    cfg.flip_threshold = section.value("flip_threshold", cfg.flip_threshold);
    cfg.eval_sample_count = section.value("eval_sample_count", cfg.eval_sample_count);
    cfg.inject_mode = inject_mode_from_name(section.value("inject_mode", std::string("paste")));
    cfg.eval_seed = section.value("eval_seed", cfg.eval_seed);
    // Pipelines default to full traces so threshold sweeps see every layer.
    cfg.exhaustive_trace = section.value("exhaustive_trace", true);
    return cfg;
}

ProbeSet build_probes(const Manifest& manifest, const LabeledDataset& source) {
    const json probes = manifest.section_or("probes", json::object());
    require_keys(probes, {"clean", "trojaned", "rng_seed", "source"}, "probes");
    const std::size_t clean_count = probes.value("clean", 200);
    const std::size_t troj_count = manifest.has_poison() ? probes.value("trojaned", 200) : 0;
    const Rng root(probes.value("rng_seed", 1ULL));

    ProbeSet set;
    if (source.images.size() < clean_count)
        throw std::runtime_error("probe stream: split holds " +
                                 std::to_string(source.images.size()) + " images, need " +
                                 std::to_string(clean_count) + " clean probes");
    Rng clean_rng = root.split(0);
    for (std::size_t pick : clean_rng.sample_without_replacement(source.images.size(),
                                                                 clean_count)) {
        set.images.push_back(source.images[pick]);
        set.true_labels.push_back(source.labels[pick]);
        set.trojaned.push_back(false);
        set.ids.push_back(probe_id("clean", set.ids.size()));
    }

    if (troj_count > 0) {
        const json& poison = manifest.section("poison");
        const TriggerSpec trigger = TriggerSpec::from_json(poison.at("trigger"));
        const int target = poison.value("target_label", 0);
        std::vector<std::size_t> eligible;
        for (std::size_t i = 0; i < source.labels.size(); ++i)
            if (source.labels[i] != target) eligible.push_back(i);
        if (eligible.size() < troj_count)
            throw std::runtime_error("probe stream: split holds " +
                                     std::to_string(eligible.size()) +
                                     " images with label != " + std::to_string(target) +
                                     ", need " + std::to_string(troj_count));
        Rng troj_rng = root.split(1);
        Rng inject_rng = root.split(2);
        std::size_t k = 0;
        for (std::size_t pick : troj_rng.sample_without_replacement(eligible.size(),
                                                                    troj_count)) {
            set.images.push_back(inject(source.images[eligible[pick]], trigger, inject_rng));
            set.true_labels.push_back(source.labels[eligible[pick]]);
            set.trojaned.push_back(true);
            set.ids.push_back(probe_id("troj", k++));
        }
    }
    return set;
}

TrainOutcome run_train(const Manifest& manifest, const EventSink& events) {
    const DatasetBundle bundle = load_dataset(manifest);
    const json& model_section = manifest.section("model");
    require_keys(model_section, {"architecture", "init_seed", "train"}, "model");
    const std::string arch = model_section.value("architecture", std::string("cnn_small"));
    const std::vector<int> input_shape{bundle.train.channels, bundle.train.height,
                                       bundle.train.width};
    const TrainConfig tc = train_config_from(model_section.value("train", json::object()));

    fs::create_directories(manifest.models_dir());
    fs::create_directories(manifest.reports_dir());

    emit(events, {{"event", "train_started"},
                  {"name", manifest.name()},
                  {"architecture", arch},
                  {"train_images", bundle.train.images.size()},
                  {"epochs", tc.epochs}});

    NetworkModel clean = make_architecture(arch, input_shape, bundle.train.class_count);
    init_params(clean, model_section.value("init_seed", 1ULL));
    NetworkModel trojaned = clean;  // same initialization, different corpus

    train_classifier(clean, bundle.train, tc);
    const double clean_acc = evaluate_accuracy(clean, bundle.holdout);
    save_model(clean, model_path_for(manifest, "clean"));
    emit(events, {{"event", "clean_model_trained"},
                  {"holdout_accuracy", clean_acc},
                  {"hash", hash_hex(model_param_hash(clean))}});

    json report{{"kind", "train_report"},
                {"name", manifest.name()},
                {"architecture", arch},
                {"train_images", bundle.train.images.size()},
                {"validation_images", bundle.validation.images.size()},
                {"holdout_images", bundle.holdout.images.size()},
                {"clean_accuracy", clean_acc},
                {"clean_hash", hash_hex(model_param_hash(clean))},
                {"accepted", true}};

    TrainOutcome outcome;
    if (manifest.has_poison()) {
        const json& poison = manifest.section("poison");
        require_keys(poison,
                     {"trigger", "target_label", "fraction", "rng_seed", "asr_seed", "gates"},
                     "poison");
        PoisonPlan plan;
        plan.trigger = TriggerSpec::from_json(poison.at("trigger"));
        plan.target_label = poison.value("target_label", 0);
        plan.fraction = poison.value("fraction", 0.01);
        plan.rng_seed = poison.value("rng_seed", 1ULL);
        const auto [poisoned, changed] = poison_dataset(bundle.train, plan);

        train_classifier(trojaned, poisoned, tc);
        const double troj_acc = evaluate_accuracy(trojaned, bundle.holdout);
        Rng asr_rng(poison.value("asr_seed", 1ULL));
        const double asr = attack_success_rate(trojaned, bundle.holdout, plan.trigger,
                                               plan.target_label, asr_rng);
        save_model(trojaned, model_path_for(manifest, "trojaned"));

        const json gates = poison.value("gates", json::object());
        require_keys(gates, {"asr_min", "accuracy_drop_max"}, "poison.gates");
        const double asr_min = gates.value("asr_min", 0.9);
        const double drop_max = gates.value("accuracy_drop_max", 0.02);
        const double drop = clean_acc - troj_acc;
        const bool accepted = tc.epochs > 0 && asr >= asr_min && drop <= drop_max;

        report["trigger"] = plan.trigger.to_json();
        report["target_label"] = plan.target_label;
        report["poisoned_count"] = changed.size();
        report["trojaned_clean_accuracy"] = troj_acc;
        report["accuracy_drop"] = drop;
        report["attack_success_rate"] = asr;
        report["trojaned_hash"] = hash_hex(model_param_hash(trojaned));
        report["gates"] = json{{"asr_min", asr_min}, {"accuracy_drop_max", drop_max}};
        report["accepted"] = accepted;
        outcome.accepted = accepted;

        emit(events, {{"event", "trojaned_model_trained"},
                      {"attack_success_rate", asr},
                      {"holdout_accuracy", troj_acc},
                      {"accuracy_drop", drop},
                      {"accepted", accepted}});
    }

    write_text_file(join(manifest.reports_dir(), "train.json"), report.dump(2) + "\n");
    outcome.report = report;
    emit(events, {{"event", "train_finished"}, {"accepted", outcome.accepted}});
    return outcome;
}

json run_fit(const Manifest& manifest, const EventSink& events) {
    const DatasetBundle bundle = load_dataset(manifest);
    const std::string subject = manifest.subject_model();
    const NetworkModel model = load_subject_model(manifest, subject, "fit");

    const json svm_section = manifest.section_or("svm", json::object());
    const json att_section = manifest.section_or("attribution", json::object());
    require_keys(att_section, {"steps", "baseline"}, "attribution");

    FitBankConfig cfg;
    cfg.svm = svm_config_from(svm_section);
    cfg.baseline_policy = baseline_policy_from(att_section);
    cfg.steps = att_section.value("steps", 64);
    cfg.map_count = svm_section.value("map_count", 256);
    cfg.sample_seed = svm_section.value("sample_seed", 1ULL);
    if (svm_section.contains("boundaries"))
        cfg.boundaries = svm_section.at("boundaries").get<std::vector<int>>();

    emit(events, {{"event", "fit_started"},
                  {"model", subject},
                  {"nu", cfg.svm.nu},
                  {"gamma", cfg.svm.gamma},
                  {"steps", cfg.steps},
                  {"map_count", cfg.map_count}});

    const std::string att_dir = join(manifest.attributions_dir(), subject);
    fs::create_directories(att_dir);
    const AttributionSink sink = [&](int boundary, const std::vector<AttributionMap>& maps) {
        save_attribution_maps(maps, join(att_dir, "boundary_" + std::to_string(boundary) +
                                                      ".att"));
        emit(events, {{"event", "boundary_attributed"},
                      {"boundary", boundary},
                      {"maps", maps.size()}});
    };

    const SvmBank bank = fit_bank(model, bundle.validation, cfg, sink);
    const std::string bank_dir = join(manifest.banks_dir(), subject);
    save_svm_bank(bank, bank_dir);

    json summary{{"kind", "fit_summary"},
                 {"model", subject},
                 {"bank_dir", bank_dir},
                 {"boundaries", bank.provenance.at("boundaries")},
                 {"classifier_hash", bank.provenance.at("classifier_hash")}};
    emit(events, {{"event", "fit_finished"}, {"bank_dir", bank_dir}});
    return summary;
}

json run_detect(const Manifest& manifest, const EventSink& events) {
    const DatasetBundle bundle = load_dataset(manifest);
    const std::string subject = manifest.subject_model();
    const NetworkModel model = load_subject_model(manifest, subject, "detect");

    const std::string bank_dir = join(manifest.banks_dir(), subject);
    if (!fs::exists(join(bank_dir, "bank.json")))
        throw std::runtime_error("detect: missing bank " + bank_dir +
                                 " (run the fit command first)");
    const SvmBank bank = load_svm_bank(bank_dir);

    const std::string model_hash = hash_hex(model_param_hash(model));
    const std::string bank_hash = bank.provenance.value("classifier_hash", std::string("?"));
    if (model_hash != bank_hash)
        throw std::runtime_error("detect: bank " + bank_dir + " was fitted for classifier " +
                                 bank_hash + " but the model file hashes to " + model_hash);

    const json att_section = manifest.section_or("attribution", json::object());
    const BaselinePolicy policy = baseline_policy_from(att_section);
    const LabeledDataset& policy_source = pick_split(bundle, policy.source_split,
                                                     "attribution baseline");
    const std::vector<Tensor> baselines =
        resolve_baselines(policy, model.input_shape, &policy_source);

    DetectConfig cfg = detect_config_from(manifest.section_or("detection", json::object()));
    cfg.steps = att_section.value("steps", 64);

    const json probes_section = manifest.section_or("probes", json::object());
    const std::string probe_split = probes_section.value("source", std::string("holdout"));
    const ProbeSet probes = build_probes(manifest, pick_split(bundle, probe_split, "probes"));

    // Flip-rate draws come from the validation split: online, the detector
    // only has clean reference data, never the probe stream itself.
    const LabeledDataset& flip_pool = bundle.validation;

    emit(events, {{"event", "detect_started"},
                  {"model", subject},
                  {"probes", probes.images.size()},
                  {"flip_threshold", cfg.flip_threshold}});

    std::ostringstream lines;
    const json head{{"kind", "verdict_log"},
                    {"classifier", model_hash},
                    {"probe_fingerprint", probe_fingerprint(probes)},
                    {"probes", probes.images.size()}};
    lines << head.dump() << "\n";
    std::size_t flagged = 0;
    for (std::size_t i = 0; i < probes.images.size(); ++i) {
        const Verdict v = detect(model, bank, probes.images[i], flip_pool, baselines, cfg);
        if (v.status == -1) ++flagged;
        json row{{"id", probes.ids[i]},
                 {"trojaned", static_cast<bool>(probes.trojaned[i])},
                 {"true_label", probes.true_labels[i]},
                 {"verdict", v.to_json()}};
        lines << row.dump() << "\n";
        if ((i + 1) % 50 == 0)
            emit(events, {{"event", "detect_progress"},
                          {"scanned", i + 1},
                          {"flagged", flagged}});
    }

    fs::create_directories(manifest.verdicts_dir());
    const std::string log_path = join(manifest.verdicts_dir(), "verdicts.jsonl");
    write_text_file(log_path, lines.str());

    json summary{{"kind", "detect_summary"},
                 {"model", subject},
                 {"probes", probes.images.size()},
                 {"flagged", flagged},
                 {"verdict_log", log_path}};
    emit(events, {{"event", "detect_finished"},
                  {"probes", probes.images.size()},
                  {"flagged", flagged}});
    return summary;
}

json run_evaluate(const Manifest& manifest, const EventSink& events) {
    const std::string log_path = join(manifest.verdicts_dir(), "verdicts.jsonl");
    if (!fs::exists(log_path))
        throw std::runtime_error("evaluate: missing verdict log " + log_path +
                                 " (run the detect command first)");

    std::vector<Verdict> verdicts;
    std::vector<bool> truth;
    std::vector<std::string> ids;
    std::string log_fingerprint;
    {
        std::istringstream in(read_text_file(log_path));
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const json row = json::parse(line);
            if (row.value("kind", std::string()) == "verdict_log") {
                log_fingerprint = row.value("probe_fingerprint", std::string());
                continue;
            }
            verdicts.push_back(Verdict::from_json(row.at("verdict")));
            truth.push_back(row.at("trojaned").get<bool>());
            ids.push_back(row.at("id").get<std::string>());
        }
    }
    if (log_fingerprint.empty())
        throw std::runtime_error("evaluate: verdict log " + log_path +
                                 " carries no probe fingerprint; rerun the detect command");
    emit(events, {{"event", "evaluate_started"}, {"verdicts", verdicts.size()}});

    const std::string subject = manifest.subject_model();
    const std::string trigger_id =
        manifest.has_poison()
            ? manifest.section("poison").at("trigger").value("kind", std::string("?"))
            : "none";
    const RatesReport misa_rates = rates(verdicts, truth, manifest.name() + "/" + subject,
                                         trigger_id);

    const json eval_section = manifest.section_or("evaluate", json::object());
    require_keys(eval_section, {"roc_points"}, "evaluate");
    const std::vector<double> grid = threshold_grid(eval_section.value("roc_points", 21));

    std::vector<double> flip_scores;
    for (const Verdict& v : verdicts) flip_scores.push_back(v.max_flip());
    const RocCurve misa_roc = roc_from_scores(flip_scores, truth, grid, true);

    // Entropy-overlay baseline on the identical probe stream.
    const DatasetBundle bundle = load_dataset(manifest);
    const json strip_section = manifest.section_or("strip", json::object());
    require_keys(strip_section,
                 {"overlay_count", "fpr_budget", "calibration_count", "rng_seed",
                  "overlay_split"},
                 "strip");
    const int overlay_count = strip_section.value("overlay_count", 100);
    const double budget = strip_section.value("fpr_budget", 0.01);
    const std::size_t calibration_count = strip_section.value("calibration_count", 100);
    const std::string overlay_split = strip_section.value("overlay_split",
                                                          std::string("validation"));
    const LabeledDataset& overlays = pick_split(bundle, overlay_split, "strip overlays");

    const json probes_section = manifest.section_or("probes", json::object());
    const std::string probe_split = probes_section.value("source", std::string("holdout"));
    const ProbeSet probes = build_probes(manifest, pick_split(bundle, probe_split, "probes"));
    if (probes.ids != ids || probe_fingerprint(probes) != log_fingerprint)
        throw std::runtime_error(
            "evaluate: the manifest's probe stream no longer matches the verdict log; rerun "
            "the detect command");

    const NetworkModel model = load_subject_model(manifest, subject, "evaluate");
    const Rng strip_root(strip_section.value("rng_seed", 1ULL));

    if (overlays.images.size() < calibration_count)
        throw std::runtime_error("evaluate: overlay split holds " +
                                 std::to_string(overlays.images.size()) +
                                 " images, need " + std::to_string(calibration_count) +
                                 " for calibration");
    std::vector<double> calibration;
    Rng calib_pick = strip_root.split(1);
    const auto calib_idx =
        calib_pick.sample_without_replacement(overlays.images.size(), calibration_count);
    for (std::size_t i = 0; i < calib_idx.size(); ++i) {
        Rng sub = strip_root.split(2).split(i);
        calibration.push_back(
            strip_entropy(model, overlays.images[calib_idx[i]], overlays, overlay_count, sub));
    }
    emit(events, {{"event", "strip_calibrated"},
                  {"images", calibration.size()},
                  {"threshold", strip_threshold(calibration, budget)}});

    std::vector<double> entropies;
    for (std::size_t i = 0; i < probes.images.size(); ++i) {
        Rng sub = strip_root.split(3).split(i);
        entropies.push_back(strip_entropy(model, probes.images[i], overlays, overlay_count,
                                          sub));
        if ((i + 1) % 100 == 0)
            emit(events, {{"event", "strip_progress"}, {"scanned", i + 1}});
    }

    const double strip_cut = strip_threshold(calibration, budget);
    std::size_t strip_tp = 0, strip_fp = 0, pos = 0, neg = 0;
    for (std::size_t i = 0; i < entropies.size(); ++i) {
        const bool fire = entropies[i] < strip_cut;
        if (truth[i]) {
            ++pos;
            strip_tp += fire;
        } else {
            ++neg;
            strip_fp += fire;
        }
    }
    std::map<double, double> budget_cuts;
    for (double b : grid) budget_cuts.emplace(b, strip_threshold(calibration, b));
    const RocCurve strip_roc = roc_sweep(
        [&](double b, std::size_t i) { return entropies[i] < budget_cuts.at(b); }, truth, grid);

    json evaluation{
        {"kind", "evaluation"},
        {"name", manifest.name()},
        {"model", subject},
        {"trigger", trigger_id},
        {"misa",
         json{{"rates", misa_rates.to_json()},
              {"auc", misa_roc.auc},
              {"flip_threshold",
               manifest.section_or("detection", json::object()).value("flip_threshold", 0.5)}}},
        {"strip", json{{"tpr", static_cast<double>(strip_tp) / static_cast<double>(pos)},
                       {"fpr", static_cast<double>(strip_fp) / static_cast<double>(neg)},
                       {"auc", strip_roc.auc},
                       {"entropy_threshold", strip_cut},
                       {"fpr_budget", budget},
                       {"overlay_count", overlay_count},
                       {"calibration_warning",
                        budget > 0.0 &&
                            static_cast<double>(calibration.size()) < 1.0 / budget}}}};

    fs::create_directories(manifest.reports_dir());
    write_text_file(join(manifest.reports_dir(), "evaluation.json"), evaluation.dump(2) + "\n");
    write_text_file(join(manifest.reports_dir(), "roc_misa.csv"), misa_roc.to_csv());
    write_text_file(join(manifest.reports_dir(), "roc_strip.csv"), strip_roc.to_csv());

    emit(events, {{"event", "evaluate_finished"},
                  {"misa_final_tpr", misa_rates.final_tpr},
                  {"misa_final_fpr", misa_rates.final_fpr},
                  {"misa_auc", misa_roc.auc},
                  {"strip_auc", strip_roc.auc}});
    return evaluation;
}

namespace {

bool doctor_gradients(const EventSink& events) {
    NetworkModel m = make_architecture("mlp_small", {1, 8, 8}, 3);
    init_params(m, 404);
    Rng rng(405);
    double worst = 0.0;
    std::size_t checked = 0, skipped = 0;
    for (int boundary : m.monitored) {
        Tensor act(m.boundary_shapes[static_cast<std::size_t>(boundary)]);
        for (auto& v : act.data) v = rng.uniform_f(0.05f, 1.0f);
        const Tensor grad = suffix_logit_grad(m, boundary, act, 0);
        const double f0 = static_cast<double>(suffix_logits(m, boundary, act).data[0]);
        const std::size_t dims = act.data.size();
        for (std::size_t i = 0; i < dims; i += std::max<std::size_t>(1, dims / 16)) {
            const double eps = 1e-3;
            Tensor hi = act, lo = act;
            hi.data[i] += static_cast<float>(eps);
            lo.data[i] -= static_cast<float>(eps);
            const double fhi = static_cast<double>(suffix_logits(m, boundary, hi).data[0]);
            const double flo = static_cast<double>(suffix_logits(m, boundary, lo).data[0]);
            const double fd = (fhi - flo) / (2.0 * eps);
            // The suffix is piecewise linear per coordinate: one-sided
            // differences only disagree when (x-eps, x+eps) straddles a relu
            // or maxpool kink, where the central difference is meaningless.
            const double one_sided_gap = std::abs((fhi - f0) / eps - (f0 - flo) / eps);
            if (one_sided_gap > 5e-3 * std::max(1.0, std::abs(fd))) {
                ++skipped;
                continue;
            }
            ++checked;
            const double denom = std::max(std::abs(fd), 0.05);
            worst = std::max(worst, std::abs(static_cast<double>(grad.data[i]) - fd) / denom);
        }
    }
    const bool ok = worst <= 1e-3 && checked > 4 * skipped && checked >= 16;
    emit(events, {{"event", "doctor_check"},
                  {"check", "analytic gradients vs finite differences"},
                  {"worst_rel_err", worst},
                  {"coords_checked", checked},
                  {"coords_straddling_kinks", skipped},
                  {"ok", ok}});
    return ok;
}

bool doctor_attribution(const EventSink& events) {
    // Exactness on a linear logit: the map must equal weight * (x - baseline).
    NetworkModel m = make_network({1, 3, 3}, 2, {flatten_layer(), dense_layer(9, 2),
                                                 softmax_layer()});
    Rng rng(406);
    for (auto& w : m.params[1].w) w = rng.uniform_f(-1.0f, 1.0f);
    for (auto& b : m.params[1].b) b = rng.uniform_f(-0.5f, 0.5f);
    Tensor x({1, 3, 3});
    for (auto& v : x.data) v = rng.uniform_f(0.0f, 1.0f);
    const std::vector<Tensor> black{Tensor({1, 3, 3})};
    const AttributionMap map = integrated_gradients(m, x, 1, 0, black, 32, "doctor");
    double worst = 0.0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const double expect = static_cast<double>(m.params[1].w[9 + i]) *
                              static_cast<double>(x.data[i]);
        worst = std::max(worst, std::abs(static_cast<double>(map.values.data[i]) - expect));
    }
    const AttributionMap null_map = integrated_gradients(m, x, 1, 0, {x}, 8, "doctor");
    double null_worst = 0.0;
    for (float v : null_map.values.data)
        null_worst = std::max(null_worst, std::abs(static_cast<double>(v)));
    const bool ok = worst <= 1e-6 && null_worst == 0.0;
    emit(events, {{"event", "doctor_check"},
                  {"check", "attribution exactness on a linear logit and zero-path nullity"},
                  {"worst_abs_err", worst},
                  {"zero_path_max", null_worst},
                  {"ok", ok}});
    return ok;
}

bool doctor_svm(const EventSink& events) {
    OcsvmConfig cfg;
    cfg.nu = 1.0;
    cfg.gamma = 1.0;
    const OneClassSvmModel twin = fit_one_class_svm(
        std::vector<std::vector<float>>{{0.0f, 0.0f}, {0.0f, 0.0f}}, cfg);
    const bool closed_form = std::abs(twin.rho - 1.0) <= 1e-6 && twin.alpha.size() == 2 &&
                             std::abs(twin.alpha[0] - 0.5) <= 1e-6 &&
                             std::abs(twin.alpha[1] - 0.5) <= 1e-6;

    Rng rng(407);
    std::vector<std::vector<float>> cloud;
    for (int i = 0; i < 200; ++i)
        cloud.push_back({static_cast<float>(rng.normal()), static_cast<float>(rng.normal())});
    OcsvmConfig gauss;
    gauss.nu = 0.3;
    gauss.gamma = 0.5;
    const OneClassSvmModel model = fit_one_class_svm(cloud, gauss);
    std::size_t rejected = 0;
    for (const auto& p : cloud)
        if (decide(model, p).status == -1) ++rejected;
    const double reject_frac = static_cast<double>(rejected) / 200.0;
    const double support_frac = static_cast<double>(model.alpha.size()) / 200.0;
    const bool nu_property = reject_frac <= gauss.nu + 0.05 && support_frac >= gauss.nu - 0.05;

    const bool ok = closed_form && nu_property;
    emit(events, {{"event", "doctor_check"},
                  {"check", "anomaly solver closed form and nu bounds"},
                  {"rho", twin.rho},
                  {"reject_fraction", reject_frac},
                  {"support_fraction", support_frac},
                  {"ok", ok}});
    return ok;
}

bool doctor_extraction(const EventSink& events) {
    Rng rng(408);
    bool ok = true;
    for (int trial = 0; trial < 50 && ok; ++trial) {
        const int n = 4 + static_cast<int>(rng.below(60));
        AttributionMap map;
        map.values = Tensor({n});
        const bool constant = trial % 10 == 0;
        for (auto& v : map.values.data)
            v = constant ? 0.75f : rng.uniform_f(-2.0f, 2.0f);
        Tensor act({n});
        for (auto& v : act.data) v = rng.uniform_f(0.0f, 1.0f);

        double mean = 0.0;
        for (float v : map.values.data) mean += v;
        mean /= n;
        double var = 0.0;
        for (float v : map.values.data) var += (v - mean) * (v - mean);
        var /= n;
        const double cutoff = mean + 2.0 * std::sqrt(var);

        const CandidateTrigger t = extract_candidate_trigger(act, map);
        for (int i = 0; i < n && ok; ++i) {
            const bool expect = static_cast<double>(map.values.data[static_cast<std::size_t>(i)]) >
                                cutoff;
            if (t.mask.data[static_cast<std::size_t>(i)] != (expect ? 1.0f : 0.0f)) ok = false;
        }
        if (constant && !t.empty()) ok = false;
    }
    emit(events, {{"event", "doctor_check"},
                  {"check", "mask extraction vs brute-force threshold"},
                  {"ok", ok}});
    return ok;
}

}  // namespace

bool run_doctor(const EventSink& events) {
    bool ok = true;
    ok = doctor_gradients(events) && ok;
    ok = doctor_attribution(events) && ok;
    ok = doctor_svm(events) && ok;
    ok = doctor_extraction(events) && ok;
    emit(events, {{"event", "doctor_finished"}, {"ok", ok}});
    return ok;
}

}  // namespace misa
