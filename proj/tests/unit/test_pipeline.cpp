#include <stdexcept>

#include "doctest.h"
#include "misa/pipeline.hpp"
#include "misa/triggers.hpp"

using namespace misa;

namespace {

json minimal_doc() {
    return json{{"schema_version", 1},
                {"name", "unit"},
                {"output_dir", "out"},
                {"dataset",
                 {{"kind", "synthetic"},
                  {"class_count", 4},
                  {"height", 8},
                  {"width", 8},
                  {"channels", 1},
                  {"per_class", 30},
                  {"rng_seed", 3},
                  {"split",
                   {{"train", 0.6}, {"validation", 0.25}, {"holdout", 0.15}, {"rng_seed", 4}}}}},
                {"model", {{"architecture", "mlp_small"}, {"init_seed", 5}}}};
}

json with_poison(json doc) {
    doc["poison"] = {{"trigger", make_solid_patch(1, 2, 2, 1.0f).to_json()},
                     {"target_label", 1},
                     {"fraction", 0.1},
                     {"rng_seed", 6},
                     {"asr_seed", 7},
                     {"gates", {{"asr_min", 0.5}, {"accuracy_drop_max", 0.1}}}};
    return doc;
}

}  // namespace

TEST_CASE("manifests reject unknown keys, bad versions, and missing sections") {
    CHECK_THROWS_AS(Manifest::from_json(json::array(), "."), std::invalid_argument);

    json doc = minimal_doc();
    doc["surprise"] = 1;
    CHECK_THROWS_WITH_AS(Manifest::from_json(doc, "."),
                         "manifest: unknown key \"surprise\" in the top level",
                         std::invalid_argument);

    doc = minimal_doc();
    doc["schema_version"] = 2;
    CHECK_THROWS_AS(Manifest::from_json(doc, "."), std::invalid_argument);
    doc["schema_version"] = "1";
    CHECK_THROWS_AS(Manifest::from_json(doc, "."), std::invalid_argument);

    doc = minimal_doc();
    doc.erase("name");
    CHECK_THROWS_AS(Manifest::from_json(doc, "."), std::invalid_argument);

    const Manifest ok = Manifest::from_json(minimal_doc(), "/some/dir");
    CHECK(ok.name() == "unit");
    CHECK(ok.output_dir() == "/some/dir/out");
    CHECK(ok.models_dir() == "/some/dir/out/models");
    CHECK(ok.subject_model() == "clean");
    CHECK(Manifest::from_json(with_poison(minimal_doc()), ".").subject_model() == "trojaned");
}

TEST_CASE("dotted overrides parse JSON values and demand existing paths") {
    Manifest m = Manifest::from_json(with_poison(minimal_doc()), ".");

    m.apply_override("dataset.per_class=44");
    CHECK(m.doc.at("dataset").at("per_class").get<int>() == 44);

    m.apply_override("poison.fraction=0.25");
    CHECK(m.doc.at("poison").at("fraction").get<double>() == 0.25);

    m.apply_override("model.architecture=cnn_small");
    CHECK(m.doc.at("model").at("architecture").get<std::string>() == "cnn_small");

    m.apply_override("poison.gates.asr_min=0.75");
    CHECK(m.doc.at("poison").at("gates").at("asr_min").get<double>() == 0.75);

    CHECK_THROWS_AS(m.apply_override("no-equals-sign"), std::invalid_argument);
    CHECK_THROWS_AS(m.apply_override("dataset.unknown_knob=1"), std::invalid_argument);
    CHECK_THROWS_AS(m.apply_override("nowhere.at_all=1"), std::invalid_argument);
}

TEST_CASE("synthetic datasets load deterministically through the manifest") {
    const Manifest m = Manifest::from_json(minimal_doc(), ".");
    const DatasetBundle a = load_dataset(m);
    const DatasetBundle b = load_dataset(m);

    CHECK(a.train.images.size() + a.validation.images.size() + a.holdout.images.size() == 120);
    CHECK(a.train.images.size() > a.validation.images.size());
    CHECK(a.validation.images.size() > a.holdout.images.size());
    CHECK(!a.holdout.images.empty());

    REQUIRE(a.train.images.size() == b.train.images.size());
    CHECK(a.train.labels == b.train.labels);
    for (std::size_t i = 0; i < a.train.images.size(); ++i)
        CHECK(a.train.images[i].data == b.train.images[i].data);

    json bad = minimal_doc();
    bad["dataset"]["kind"] = "parquet";
    CHECK_THROWS_AS(load_dataset(Manifest::from_json(bad, ".")), std::invalid_argument);
    bad = minimal_doc();
    bad["dataset"]["split"]["ratio"] = 0.5;
    CHECK_THROWS_AS(load_dataset(Manifest::from_json(bad, ".")), std::invalid_argument);
}

TEST_CASE("config sections decode defaults and reject unknown knobs") {
    const TrainConfig tc = train_config_from(json{{"epochs", 3}, {"learning_rate", 0.5}});
    CHECK(tc.epochs == 3);
    CHECK(tc.learning_rate == 0.5f);
    CHECK(tc.optimizer == "adam");
    CHECK_THROWS_AS(train_config_from(json{{"epoch", 3}}), std::invalid_argument);

    const DetectConfig dc = detect_config_from(json{{"flip_threshold", 0.4}});
    CHECK(dc.flip_threshold == 0.4);
    CHECK(dc.exhaustive_trace);  // manifests default to full traces
    CHECK(dc.inject_mode == InjectMode::paste);
    const DetectConfig dc2 = detect_config_from(json{{"inject_mode", "add_clamped"}});
    CHECK(dc2.inject_mode == InjectMode::add_clamped);
    CHECK_THROWS_AS(detect_config_from(json{{"inject_mode", "subtract"}}),
                    std::invalid_argument);

    const OcsvmConfig sc = svm_config_from(json{{"nu", 0.2}, {"map_count", 9}});
    CHECK(sc.nu == 0.2);
    CHECK_THROWS_AS(svm_config_from(json{{"mu", 0.2}}), std::invalid_argument);
}

TEST_CASE("probe streams are deterministic, labeled, and bounded") {
    const Manifest m = Manifest::from_json(with_poison(minimal_doc()), ".");
    const DatasetBundle bundle = load_dataset(m);
    LabeledDataset source = bundle.train;  // largest split, plenty of rows

    json probes_doc = with_poison(minimal_doc());
    probes_doc["probes"] = {{"clean", 20}, {"trojaned", 15}, {"rng_seed", 9},
                            {"source", "train"}};
    const Manifest mp = Manifest::from_json(probes_doc, ".");

    const ProbeSet a = build_probes(mp, source);
    const ProbeSet b = build_probes(mp, source);
    REQUIRE(a.images.size() == 35);
    CHECK(a.ids == b.ids);
    for (std::size_t i = 0; i < a.images.size(); ++i)
        CHECK(a.images[i].data == b.images[i].data);

    CHECK(a.ids.front() == "clean/0000");
    CHECK(a.ids[20] == "troj/0000");
    for (std::size_t i = 0; i < 20; ++i) CHECK(!a.trojaned[i]);
    for (std::size_t i = 20; i < 35; ++i) {
        CHECK(a.trojaned[i]);
        // Trojaned probes are drawn from rows whose label is not the target.
        CHECK(a.true_labels[i] != 1);
        // The stamp itself: a 2x2 patch of ones at the bottom-right corner.
        CHECK(a.images[i].data.back() == 1.0f);
    }

    json greedy = probes_doc;
    greedy["probes"]["clean"] = 100000;
    CHECK_THROWS_AS(build_probes(Manifest::from_json(greedy, "."), source),
                    std::runtime_error);
    greedy = probes_doc;
    greedy["probes"]["count"] = 3;
    CHECK_THROWS_AS(build_probes(Manifest::from_json(greedy, "."), source),
                    std::invalid_argument);
}

TEST_CASE("clean manifests build empty trojan streams") {
    json doc = minimal_doc();
    doc["probes"] = {{"clean", 10}, {"trojaned", 15}, {"rng_seed", 9}, {"source", "train"}};
    const Manifest m = Manifest::from_json(doc, ".");
    const DatasetBundle bundle = load_dataset(m);
    const ProbeSet set = build_probes(m, bundle.train);
    CHECK(set.images.size() == 10);  // no poison section, so no trojaned draws
    for (bool t : set.trojaned) CHECK(!t);
}

TEST_CASE("the numerical self-checks pass") { CHECK(run_doctor()); }
