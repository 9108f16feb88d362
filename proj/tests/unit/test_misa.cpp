#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <vector>

#include "doctest.h"
#include "misa/misa.hpp"
#include "support/testnets.hpp"

using namespace misa;
using doctest::Approx;

namespace {

AttributionMap map_of(std::vector<float> vals) {
    AttributionMap m;
    m.boundary = 0;
    m.target_class = 0;
    m.steps = 1;
    m.baseline_id = "test";
    m.values = Tensor({static_cast<int>(vals.size())});
    m.values.data = std::move(vals);
    return m;
}

// One trojaned classifier shared by the scan tests: 4-class synthetic data, a
// 3x3 white corner patch mapping everything to class 0, and an anomaly bank
// fitted on clean attribution maps. Built once; everything downstream is
// deterministic.
struct ScanFixture {
    LabeledDataset train;         // poisoned
    LabeledDataset clean_pool;    // clean images for bank fitting and flip draws
    LabeledDataset probes;        // held-out clean images
    NetworkModel model;
    TriggerSpec patch;
    SvmBank bank;                 // nu = 0.7 detector bank
    SvmBank lenient_bank;         // nu = 0.1, accepts most clean probes
    std::vector<Tensor> baselines;
    DetectConfig config;
};

const ScanFixture& scan_fixture() {
    static const ScanFixture fx = [] {
        ScanFixture f;
        const LabeledDataset all = generate_synthetic_dataset(4, 16, 16, 1, 110, 201);
        SplitSpec spec;
        spec.train = 0.6;
        spec.validation = 0.25;
        spec.holdout = 0.15;
        spec.rng_seed = 7;
        const SplitResult parts = split(all, spec);
        f.clean_pool = parts.validation;
        f.probes = parts.holdout;

        f.patch = make_solid_patch(1, 3, 3, 1.0f, PatchLocation::bottom_right);
        PoisonPlan plan;
        plan.trigger = f.patch;
        plan.target_label = 0;
        plan.fraction = 0.08;
        plan.rng_seed = 11;
        f.train = poison_dataset(parts.train, plan).first;

        f.model = make_architecture("mlp_small", {1, 16, 16}, 4);
        init_params(f.model, 31);
        TrainConfig tc;
        tc.epochs = 10;
        tc.batch_size = 32;
        tc.learning_rate = 0.05f;
        tc.optimizer = "sgd_momentum";
        tc.rng_seed = 13;
        train_classifier(f.model, f.train, tc);

        FitBankConfig bc;
        bc.baseline_policy.kind = BaselinePolicy::Kind::black;
        bc.steps = 16;
        bc.map_count = 90;
        bc.sample_seed = 17;
        bc.svm.nu = 0.7;
        bc.svm.gamma = 0.2;
        f.bank = fit_bank(f.model, f.clean_pool, bc);
        bc.svm.nu = 0.1;
        f.lenient_bank = fit_bank(f.model, f.clean_pool, bc);

        f.baselines = resolve_baselines(bc.baseline_policy, f.model.input_shape, nullptr);
        f.config.flip_threshold = 0.5;
        f.config.steps = 16;
        f.config.eval_sample_count = 60;
        f.config.eval_seed = 23;
        return f;
    }();
    return fx;
}

void check_trace_invariants(const Verdict& v, const SvmBank& bank, const DetectConfig& cfg) {
    std::set<int> bank_keys;
    for (const auto& [b, m] : bank.models) bank_keys.insert(b);
    int prev = -1;
    for (const LayerTrace& row : v.trace) {
        CHECK(row.boundary > prev);
        prev = row.boundary;
        CHECK(bank_keys.count(row.boundary) == 1);
        if (row.svm_status == 1) {
            CHECK_FALSE(row.extracted);
            CHECK_FALSE(row.evaluated);
        }
        if (row.extracted && row.mask_active == 0) CHECK_FALSE(row.evaluated);
        if (row.evaluated) {
            CHECK(row.flip_fraction >= 0.0);
            CHECK(row.flip_fraction <= 1.0);
        } else {
            CHECK(row.flip_fraction == -1.0);
        }
    }
    if (v.status == -1) {
        CHECK(v.flagged_boundary >= 0);
        CHECK(v.flip_fraction >= cfg.flip_threshold);
        CHECK(v.trigger.boundary == v.flagged_boundary);
        CHECK(v.trigger.active_count() > 0);
        bool found = false;
        for (const LayerTrace& row : v.trace) {
            if (row.boundary == v.flagged_boundary) {
                found = true;
                CHECK(row.evaluated);
                CHECK(row.flip_fraction == v.flip_fraction);
            }
        }
        CHECK(found);
    } else {
        CHECK(v.flagged_boundary == -1);
        CHECK(v.flip_fraction == -1.0);
        // No evaluated layer may sit at or above the confirmation threshold.
        for (const LayerTrace& row : v.trace)
            if (row.evaluated) CHECK(row.flip_fraction < cfg.flip_threshold);
    }
}

}  // namespace

TEST_CASE("extraction keeps exactly the cells above mean plus two sd") {
    std::vector<float> vals(10, 0.0f);
    vals[9] = 100.0f;  // mean 10, sd 30, cutoff 70
    Tensor act({10});
    for (int i = 0; i < 10; ++i) act.data[static_cast<std::size_t>(i)] = 0.01f * i;
    const CandidateTrigger t = extract_candidate_trigger(act, map_of(vals), "hand");
    CHECK(t.att_mean == Approx(10.0).epsilon(1e-12));
    CHECK(t.att_sd == Approx(30.0).epsilon(1e-12));
    CHECK(t.active_count() == 1);
    CHECK(t.mask.data[9] == 1.0f);
    CHECK(t.values.data[9] == act.data[9]);
    for (int i = 0; i < 9; ++i) {
        CHECK(t.mask.data[static_cast<std::size_t>(i)] == 0.0f);
        CHECK(t.values.data[static_cast<std::size_t>(i)] == 0.0f);
    }
    CHECK(t.source_id == "hand");
    CHECK_FALSE(t.empty());
}

TEST_CASE("constant attribution maps extract an empty mask") {
    for (float c : {0.0f, -3.5f, 7.25f}) {
        std::vector<float> vals(64, c);
        Tensor act({64});
        act.fill(0.5f);
        const CandidateTrigger t = extract_candidate_trigger(act, map_of(vals));
        CHECK(t.att_sd == Approx(0.0).epsilon(1e-12));
        CHECK(t.active_count() == 0);
        CHECK(t.empty());
    }
}

TEST_CASE("extraction matches a brute-force threshold scan on random maps") {
    Rng rng(41);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 2 + static_cast<int>(rng.below(200));
        std::vector<float> vals(static_cast<std::size_t>(n));
        const int flavor = static_cast<int>(rng.below(4));
        for (float& v : vals) {
            if (flavor == 0) v = rng.uniform_f(-5.0f, 5.0f);
            else if (flavor == 1) v = static_cast<float>(rng.normal());
            else if (flavor == 2) v = static_cast<float>(rng.below(3));  // heavy ties
            else v = 1.25f;                                              // constant
        }
        Tensor act({n});
        for (auto& a : act.data) a = rng.uniform_f(0.0f, 1.0f);

        double mean = 0.0;
        for (float v : vals) mean += v;
        mean /= n;
        double var = 0.0;
        for (float v : vals) var += (v - mean) * (v - mean);
        var /= n;
        const double cutoff = mean + 2.0 * std::sqrt(var);

        const CandidateTrigger t = extract_candidate_trigger(act, map_of(vals));
        for (int i = 0; i < n; ++i) {
            const bool expect = static_cast<double>(vals[static_cast<std::size_t>(i)]) > cutoff;
            CHECK(t.mask.data[static_cast<std::size_t>(i)] == (expect ? 1.0f : 0.0f));
            CHECK(t.values.data[static_cast<std::size_t>(i)] ==
                  (expect ? act.data[static_cast<std::size_t>(i)] : 0.0f));
        }
    }
}

TEST_CASE("extraction rejects mismatched shapes") {
    Tensor act({3, 4, 4});
    CHECK_THROWS_WITH_AS(extract_candidate_trigger(act, map_of({1.0f, 2.0f})),
                         doctest::Contains("does not match"), std::invalid_argument);
}

TEST_CASE("flip fractions are reproduced exactly by an independent recount") {
    const ScanFixture& fx = scan_fixture();

    // A candidate trigger copied straight from the planted patch.
    CandidateTrigger t;
    t.boundary = 0;
    t.mask = Tensor({1, 16, 16});
    t.values = Tensor({1, 16, 16});
    for (int y = 13; y < 16; ++y)
        for (int x = 13; x < 16; ++x) {
            t.mask.data[static_cast<std::size_t>(y * 16 + x)] = 1.0f;
            t.values.data[static_cast<std::size_t>(y * 16 + x)] = 1.0f;
        }

    TriggerEvalConfig ec;
    ec.sample_count = 80;
    Rng rng(55);
    const double flip = evaluate_trigger(fx.model, fx.clean_pool, t, 0, rng, ec);

    // Recount: same eligibility rule, same draw order, manual stamping.
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < fx.clean_pool.labels.size(); ++i)
        if (fx.clean_pool.labels[i] != 0) eligible.push_back(i);
    Rng rng2(55);
    const auto draw = rng2.sample_without_replacement(eligible.size(), 80);
    int flips = 0;
    for (std::size_t pick : draw) {
        Tensor img = fx.clean_pool.images[eligible[pick]];
        for (std::size_t i = 0; i < img.data.size(); ++i)
            if (t.mask.data[i] != 0.0f) img.data[i] = t.values.data[i];
        if (predict(fx.model, img) == 0) ++flips;
    }
    CHECK(flip == static_cast<double>(flips) / 80.0);
    CHECK(flip > 0.5);  // the planted patch flips most images

    // Same seed, same fraction; different seed may differ but stays in range.
    Rng rng3(55);
    CHECK(evaluate_trigger(fx.model, fx.clean_pool, t, 0, rng3, ec) == flip);
}

TEST_CASE("pixel-boundary stamping agrees with the trigger injection paste") {
    const ScanFixture& fx = scan_fixture();
    Rng rng(66);

    CandidateTrigger t;
    t.boundary = 0;
    t.mask = Tensor({1, 16, 16});
    t.values = Tensor({1, 16, 16});
    Tensor pattern({1, 2, 4});
    for (auto& v : pattern.data) v = rng.uniform_f(0.0f, 1.0f);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 4; ++x) {
            t.mask.data[static_cast<std::size_t>((y + 5) * 16 + (x + 9))] = 1.0f;
            t.values.data[static_cast<std::size_t>((y + 5) * 16 + (x + 9))] =
                pattern.data[static_cast<std::size_t>(y * 4 + x)];
        }
    TriggerSpec spec;
    spec.kind = TriggerKind::patch;
    spec.pattern = pattern;
    spec.location = PatchLocation::explicit_pos;
    spec.row = 5;
    spec.col = 9;

    TriggerEvalConfig ec;
    ec.sample_count = 50;
    Rng flip_rng(77);
    const double flip = evaluate_trigger(fx.model, fx.clean_pool, t, 1, flip_rng, ec);

    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < fx.clean_pool.labels.size(); ++i)
        if (fx.clean_pool.labels[i] != 1) eligible.push_back(i);
    Rng flip_rng2(77);
    const auto draw = flip_rng2.sample_without_replacement(eligible.size(), 50);
    Rng inject_rng(1);
    int flips = 0;
    for (std::size_t pick : draw) {
        const Tensor stamped = inject(fx.clean_pool.images[eligible[pick]], spec, inject_rng);
        if (predict(fx.model, stamped) == 1) ++flips;
    }
    CHECK(flip == static_cast<double>(flips) / 50.0);
}

TEST_CASE("an empty trigger reproduces the natural prediction rate") {
    const ScanFixture& fx = scan_fixture();
    CandidateTrigger t;
    t.boundary = 0;
    t.mask = Tensor({1, 16, 16});
    t.values = Tensor({1, 16, 16});
    CHECK(t.empty());

    TriggerEvalConfig ec;
    ec.sample_count = 70;
    Rng rng(88);
    const double flip = evaluate_trigger(fx.model, fx.clean_pool, t, 2, rng, ec);

    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < fx.clean_pool.labels.size(); ++i)
        if (fx.clean_pool.labels[i] != 2) eligible.push_back(i);
    Rng rng2(88);
    const auto draw = rng2.sample_without_replacement(eligible.size(), 70);
    int hits = 0;
    for (std::size_t pick : draw)
        if (predict(fx.model, fx.clean_pool.images[eligible[pick]]) == 2) ++hits;
    CHECK(flip == static_cast<double>(hits) / 70.0);
}

TEST_CASE("trigger evaluation at a hidden boundary overwrites activations") {
    const ScanFixture& fx = scan_fixture();
    const int boundary = fx.model.monitored.size() > 1 ? fx.model.monitored[1] : 1;
    const Tensor shape_probe(fx.model.boundary_shapes[static_cast<std::size_t>(boundary)]);

    CandidateTrigger t;
    t.boundary = boundary;
    t.mask = Tensor(shape_probe.shape);
    t.values = Tensor(shape_probe.shape);
    Rng rng(99);
    for (std::size_t i = 0; i < t.mask.data.size(); ++i) {
        if (rng.uniform() < 0.25) {
            t.mask.data[i] = 1.0f;
            t.values.data[i] = rng.uniform_f(-2.0f, 2.0f);
        }
    }

    TriggerEvalConfig ec;
    ec.sample_count = 40;
    Rng flip_rng(111);
    const double flip = evaluate_trigger(fx.model, fx.clean_pool, t, 3, flip_rng, ec);

    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < fx.clean_pool.labels.size(); ++i)
        if (fx.clean_pool.labels[i] != 3) eligible.push_back(i);
    Rng flip_rng2(111);
    const auto draw = flip_rng2.sample_without_replacement(eligible.size(), 40);
    int flips = 0;
    for (std::size_t pick : draw) {
        Tensor act = boundary_activation(fx.model, fx.clean_pool.images[eligible[pick]], boundary);
        for (std::size_t i = 0; i < act.data.size(); ++i)
            if (t.mask.data[i] != 0.0f) act.data[i] = t.values.data[i];
        if (suffix_predict(fx.model, boundary, act) == 3) ++flips;
    }
    CHECK(flip == static_cast<double>(flips) / 40.0);
}

TEST_CASE("trigger evaluation rejects bad inputs") {
    const ScanFixture& fx = scan_fixture();
    CandidateTrigger t;
    t.boundary = 0;
    t.mask = Tensor({1, 16, 16});
    t.values = Tensor({1, 16, 16});
    t.mask.data[0] = 1.0f;
    Rng rng(1);

    TriggerEvalConfig ec;
    ec.sample_count = 100000;  // more than the pool holds
    CHECK_THROWS_WITH_AS(evaluate_trigger(fx.model, fx.clean_pool, t, 0, rng, ec),
                         doctest::Contains("eligible"), std::runtime_error);
    ec.sample_count = 0;
    CHECK_THROWS_WITH_AS(evaluate_trigger(fx.model, fx.clean_pool, t, 0, rng, ec),
                         doctest::Contains("positive"), std::invalid_argument);
    ec.sample_count = 10;
    CHECK_THROWS_WITH_AS(evaluate_trigger(fx.model, fx.clean_pool, t, 9, rng, ec),
                         doctest::Contains("target class"), std::invalid_argument);

    CandidateTrigger bad = t;
    bad.values = Tensor({1, 8, 8});
    CHECK_THROWS_WITH_AS(evaluate_trigger(fx.model, fx.clean_pool, bad, 0, rng, ec),
                         doctest::Contains("share a shape"), std::invalid_argument);
    bad = t;
    bad.boundary = 99;
    CHECK_THROWS_WITH_AS(evaluate_trigger(fx.model, fx.clean_pool, bad, 0, rng, ec),
                         doctest::Contains("out of range"), std::invalid_argument);
}

TEST_CASE("scanning a patched image confirms the planted trigger") {
    const ScanFixture& fx = scan_fixture();
    Rng rng(222);
    int flagged = 0;
    for (int i = 0; i < 10; ++i) {
        const Tensor stamped = inject(fx.probes.images[static_cast<std::size_t>(i)], fx.patch, rng);
        const Verdict v = detect(fx.model, fx.bank, stamped, fx.clean_pool, fx.baselines,
                                 fx.config);
        check_trace_invariants(v, fx.bank, fx.config);
        if (v.status == -1) {
            ++flagged;
            CHECK(v.predicted_label == 0);  // the patch drives everything to the target
        }
    }
    CHECK(flagged >= 6);
}

TEST_CASE("clean probes mostly survive the scan and keep full traces") {
    const ScanFixture& fx = scan_fixture();
    int clean = 0;
    for (int i = 0; i < 10; ++i) {
        const Verdict v = detect(fx.model, fx.bank, fx.probes.images[static_cast<std::size_t>(i)],
                                 fx.clean_pool, fx.baselines, fx.config);
        check_trace_invariants(v, fx.bank, fx.config);
        if (v.status == 1) {
            ++clean;
            CHECK(v.trace.size() == fx.bank.models.size());  // no early exit without a hit
        }
    }
    CHECK(clean >= 7);
}

TEST_CASE("a probe accepted by every gate takes the fast path") {
    const ScanFixture& fx = scan_fixture();
    bool found = false;
    for (std::size_t i = 0; i < fx.probes.images.size() && !found; ++i) {
        const Verdict v = detect(fx.model, fx.lenient_bank, fx.probes.images[i], fx.clean_pool,
                                 fx.baselines, fx.config);
        bool all_pass = v.status == 1;
        for (const LayerTrace& row : v.trace)
            if (row.svm_status != 1) all_pass = false;
        if (all_pass) {
            found = true;
            for (const LayerTrace& row : v.trace) {
                CHECK_FALSE(row.extracted);
                CHECK_FALSE(row.evaluated);
            }
        }
    }
    CHECK(found);
}

TEST_CASE("raising the flip threshold never creates new detections") {
    const ScanFixture& fx = scan_fixture();
    Rng rng(333);
    const Tensor stamped = inject(fx.probes.images[3], fx.patch, rng);

    std::vector<double> thresholds{0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0};
    int prev_status = -1;
    std::map<int, double> seen_flips;
    for (double th : thresholds) {
        DetectConfig cfg = fx.config;
        cfg.flip_threshold = th;
        const Verdict v = detect(fx.model, fx.bank, stamped, fx.clean_pool, fx.baselines, cfg);
        check_trace_invariants(v, fx.bank, cfg);
        // Once the verdict turns clean it must stay clean at higher thresholds.
        if (prev_status == 1) CHECK(v.status == 1);
        prev_status = v.status;
        // Per-boundary flip fractions are pinned by the seed, not by the
        // threshold or by which layers confirmed earlier.
        for (const LayerTrace& row : v.trace) {
            if (!row.evaluated) continue;
            auto it = seen_flips.find(row.boundary);
            if (it == seen_flips.end()) seen_flips.emplace(row.boundary, row.flip_fraction);
            else CHECK(it->second == row.flip_fraction);
        }
    }
    CHECK_FALSE(seen_flips.empty());
}

TEST_CASE("exhaustive traces cover every boundary without changing the verdict") {
    const ScanFixture& fx = scan_fixture();
    Rng rng(444);
    const Tensor stamped = inject(fx.probes.images[5], fx.patch, rng);

    const Verdict quick = detect(fx.model, fx.bank, stamped, fx.clean_pool, fx.baselines,
                                 fx.config);
    DetectConfig cfg = fx.config;
    cfg.exhaustive_trace = true;
    const Verdict full = detect(fx.model, fx.bank, stamped, fx.clean_pool, fx.baselines, cfg);

    CHECK(full.trace.size() == fx.bank.models.size());
    CHECK(full.status == quick.status);
    CHECK(full.flagged_boundary == quick.flagged_boundary);
    CHECK(full.flip_fraction == quick.flip_fraction);
    CHECK(quick.trace.size() <= full.trace.size());
    for (std::size_t i = 0; i < quick.trace.size(); ++i) {
        CHECK(quick.trace[i].boundary == full.trace[i].boundary);
        CHECK(quick.trace[i].svm_status == full.trace[i].svm_status);
        CHECK(quick.trace[i].svm_score == full.trace[i].svm_score);
        CHECK(quick.trace[i].flip_fraction == full.trace[i].flip_fraction);
    }
    CHECK(full.max_flip() >= quick.max_flip());
    if (full.status == -1) CHECK(full.max_flip() >= cfg.flip_threshold);
}

TEST_CASE("detection is deterministic and survives a verdict round-trip") {
    const ScanFixture& fx = scan_fixture();
    Rng rng(555);
    const Tensor stamped = inject(fx.probes.images[7], fx.patch, rng);
    DetectConfig cfg = fx.config;
    cfg.exhaustive_trace = true;

    const Verdict a = detect(fx.model, fx.bank, stamped, fx.clean_pool, fx.baselines, cfg);
    const Verdict b = detect(fx.model, fx.bank, stamped, fx.clean_pool, fx.baselines, cfg);
    CHECK(a.to_json() == b.to_json());

    const Verdict c = Verdict::from_json(a.to_json());
    CHECK(c.to_json() == a.to_json());
    CHECK(c.status == a.status);
    CHECK(c.max_flip() == a.max_flip());
    if (a.status == -1) {
        CHECK(c.trigger.boundary == a.trigger.boundary);
        CHECK(c.trigger.mask.data == a.trigger.mask.data);
        CHECK(c.trigger.values.data == a.trigger.values.data);
    }
}

TEST_CASE("candidate triggers survive a JSON round-trip") {
    Rng rng(666);
    Tensor act({2, 5, 5});
    for (auto& v : act.data) v = rng.uniform_f(-1.0f, 1.0f);
    std::vector<float> vals(act.data.size());
    for (auto& v : vals) v = static_cast<float>(rng.normal());
    AttributionMap m = map_of(vals);
    m.values = Tensor({2, 5, 5});
    m.values.data.assign(vals.begin(), vals.end());
    m.boundary = 2;

    const CandidateTrigger t = extract_candidate_trigger(act, m, "probe-17");
    const CandidateTrigger back = CandidateTrigger::from_json(t.to_json());
    CHECK(back.boundary == t.boundary);
    CHECK(back.source_id == t.source_id);
    CHECK(back.att_mean == t.att_mean);
    CHECK(back.att_sd == t.att_sd);
    CHECK(back.mask.shape == t.mask.shape);
    CHECK(back.mask.data == t.mask.data);
    CHECK(back.values.data == t.values.data);
    CHECK(back.to_json() == t.to_json());
}

TEST_CASE("bank fitting records provenance and survives a directory round-trip") {
    const ScanFixture& fx = scan_fixture();
    CHECK(fx.bank.provenance.at("classifier_hash").get<std::string>().size() == 16);
    CHECK(fx.bank.provenance.at("steps").get<int>() == 16);
    CHECK(fx.bank.provenance.at("nu").get<double>() == 0.7);
    CHECK(fx.bank.provenance.at("boundaries").size() == fx.bank.models.size());
    for (int b : fx.model.monitored) CHECK(fx.bank.models.count(b) == 1);

    const std::string dir = (std::filesystem::temp_directory_path() / "misa_bank_rt").string();
    std::filesystem::remove_all(dir);
    save_svm_bank(fx.bank, dir);
    const SvmBank loaded = load_svm_bank(dir);
    CHECK(loaded.models.size() == fx.bank.models.size());
    CHECK(loaded.provenance == fx.bank.provenance);

    Rng rng(777);
    const Tensor stamped = inject(fx.probes.images[2], fx.patch, rng);
    DetectConfig cfg = fx.config;
    cfg.exhaustive_trace = true;
    const Verdict a = detect(fx.model, fx.bank, stamped, fx.clean_pool, fx.baselines, cfg);
    const Verdict b = detect(fx.model, loaded, stamped, fx.clean_pool, fx.baselines, cfg);
    CHECK(a.to_json() == b.to_json());
    std::filesystem::remove_all(dir);
}

TEST_CASE("bank fitting rejects bad configurations") {
    const ScanFixture& fx = scan_fixture();
    FitBankConfig bc;
    bc.steps = 8;
    bc.map_count = 40;

    FitBankConfig bad = bc;
    bad.boundaries = {0, 0};
    CHECK_THROWS_WITH_AS(fit_bank(fx.model, fx.clean_pool, bad),
                         doctest::Contains("duplicate"), std::invalid_argument);
    bad = bc;
    bad.boundaries = {1};  // hidden pre-activation, not monitored on this net
    if (!fx.model.is_monitored(1))
        CHECK_THROWS_WITH_AS(fit_bank(fx.model, fx.clean_pool, bad),
                             doctest::Contains("not monitored"), std::invalid_argument);
    bad = bc;
    bad.map_count = 1;
    CHECK_THROWS_WITH_AS(fit_bank(fx.model, fx.clean_pool, bad),
                         doctest::Contains("at least 2"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(fit_bank(fx.model, LabeledDataset{}, bc), doctest::Contains("empty"),
                         std::invalid_argument);
}

TEST_CASE("scanning rejects mismatched inputs") {
    const ScanFixture& fx = scan_fixture();
    CHECK_THROWS_WITH_AS(detect(fx.model, fx.bank, Tensor({1, 8, 8}), fx.clean_pool, fx.baselines,
                                fx.config),
                         doctest::Contains("does not match"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(detect(fx.model, SvmBank{}, fx.probes.images[0], fx.clean_pool,
                                fx.baselines, fx.config),
                         doctest::Contains("bank is empty"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(detect(fx.model, fx.bank, fx.probes.images[0], fx.clean_pool, {},
                                fx.config),
                         doctest::Contains("baseline"), std::invalid_argument);
    DetectConfig cfg = fx.config;
    cfg.flip_threshold = 1.5;
    CHECK_THROWS_WITH_AS(detect(fx.model, fx.bank, fx.probes.images[0], fx.clean_pool,
                                fx.baselines, cfg),
                         doctest::Contains("[0, 1]"), std::invalid_argument);
}
