#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "misa/pipeline.hpp"

namespace {

// Default output is machine-readable JSON lines; --quiet switches to terse
// human text.
misa::EventSink make_sink(bool quiet) {
    if (!quiet)
        return [](const misa::json& record) { std::cout << record.dump() << "\n" << std::flush; };
    return [](const misa::json& record) {
        const std::string event = record.value("event", std::string("event"));
        std::string detail;
        for (const auto& [key, value] : record.items()) {
            if (key == "event") continue;
            detail += "  " + key + "=" + value.dump();
        }
        std::cout << event << detail << "\n" << std::flush;
    };
}

misa::Manifest load_with_overrides(const std::string& path,
                                   const std::vector<std::string>& overrides) {
    misa::Manifest manifest = misa::Manifest::load(path);
    for (const std::string& assignment : overrides) manifest.apply_override(assignment);
    return manifest;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Trains small image classifiers, plants triggers, and scans inputs with the "
                 "three-stage misattribution detector."};
    app.require_subcommand(1);
    app.fallthrough();  // lets --quiet appear after the subcommand too

    std::string manifest_path;
    std::vector<std::string> overrides;
    bool quiet = false;
    app.add_flag("--quiet", quiet, "terse human output instead of JSON lines");

    auto add_manifest_options = [&](CLI::App* cmd) {
        cmd->add_option("-m,--manifest", manifest_path, "experiment manifest (JSON)")
            ->required();
        cmd->add_option("--set", overrides,
                        "override a manifest field, e.g. --set svm.nu=0.5 (repeatable)");
    };

    CLI::App* cmd_train =
        app.add_subcommand("train", "train the clean and trojaned classifiers");
    add_manifest_options(cmd_train);
    CLI::App* cmd_fit =
        app.add_subcommand("fit", "fit the per-layer anomaly bank on clean attributions");
    add_manifest_options(cmd_fit);
    CLI::App* cmd_detect = app.add_subcommand("detect", "scan the probe stream for triggers");
    add_manifest_options(cmd_detect);
    CLI::App* cmd_evaluate =
        app.add_subcommand("evaluate", "aggregate verdicts into rates, curves, and the "
                                       "entropy-overlay baseline");
    add_manifest_options(cmd_evaluate);
    CLI::App* cmd_doctor =
        app.add_subcommand("doctor", "run the numerical self-checks and exit");

    CLI11_PARSE(app, argc, argv);
    const misa::EventSink sink = make_sink(quiet);

    try {
        if (cmd_doctor->parsed()) return misa::run_doctor(sink) ? 0 : 1;

        const misa::Manifest manifest = load_with_overrides(manifest_path, overrides);
        if (cmd_train->parsed()) {
            const misa::TrainOutcome outcome = misa::run_train(manifest, sink);
            if (!outcome.accepted) {
                std::cerr << "train: model rejected by the acceptance gates (see "
                          << manifest.reports_dir() << "/train.json)\n";
                return 1;
            }
            return 0;
        }
        if (cmd_fit->parsed()) {
            misa::run_fit(manifest, sink);
            return 0;
        }
        if (cmd_detect->parsed()) {
            misa::run_detect(manifest, sink);
            return 0;
        }
        if (cmd_evaluate->parsed()) {
            misa::run_evaluate(manifest, sink);
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "misa: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "misa: no command selected\n";
    return 1;
}
