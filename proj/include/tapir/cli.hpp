#pragma once

#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tapir/demo.hpp"
#include "tapir/http_backend.hpp"
#include "tapir/pipeline.hpp"

namespace tapir {

/// Exit statuses of `dispatch`.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitStageFailure = 2;

/// The scripted backend when `mock` is set (the configured fixture, or the
/// built-in rules without one), the HTTP backend otherwise.
inline std::shared_ptr<Backend> make_backend(const PipelineConfig& config) {
    if (config.mock) {
        if (config.mock_fixture) return std::make_shared<MockBackend>(MockBackend::from_fixture(*config.mock_fixture));
        return std::make_shared<MockBackend>(demo::default_mock_rules());
    }
    for (const auto* e : {&config.endpoints.teacher, &config.endpoints.judge, &config.endpoints.student,
                          &config.endpoints.classifier, &config.endpoints.refiner_or_teacher()}) {
        if (e->base_url.empty()) throw ValidationError("endpoint '" + e->model_name + "' has no base_url; use --mock for offline runs");
    }
    return std::make_shared<HttpBackend>();
}

struct CliOptions {
    std::string config = "tapir.json";
    bool mock = false;
    std::string run_dir;
    std::string scale;
    std::string distribution;
    std::vector<std::string> overrides;
    std::string delta;
    std::int64_t round = 0;
    std::int64_t n = 0;
};

inline PipelineConfig load_cli_config(const CliOptions& opt) {
    auto config = PipelineConfig::load(opt.config);
    if (opt.mock) config.mock = true;
    if (!opt.run_dir.empty()) config.run_dir = opt.run_dir;
    if (!opt.scale.empty()) {
        try {
            config.scale = Rational::parse(opt.scale);
        } catch (const std::exception&) {
            throw ValidationError("bad --scale '" + opt.scale + "'");
        }
    }
    if (!opt.distribution.empty()) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_file(opt.distribution));
        } catch (const nlohmann::json::parse_error& e) {
            throw ValidationError("distribution file " + opt.distribution + ": " + e.what());
        }
        config.distribution = overrides_from_json(j);
    }
    for (const auto& o : opt.overrides) {
        auto [label, w] = parse_override(o);
        config.distribution[label] = w;
    }
    if (!opt.delta.empty()) {
        try {
            config.delta = Rational::parse(opt.delta);
        } catch (const std::exception&) {
            throw ValidationError("bad --delta '" + opt.delta + "'");
        }
    }
    config.validate();
    return config;
}

/// Parses `args` (without the program name), runs the chosen subcommand and
/// returns the exit status. JSON lines go to `out`, diagnostics to `err`.
inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Difficulty-aware instruction synthesis driver", "tapir"};
    app.require_subcommand(1);
    CliOptions opt;
    app.add_option("--config", opt.config, "Pipeline config (JSON)");
    app.add_flag("--mock", opt.mock, "Use the scripted fixture backend");
    app.add_option("--run-dir", opt.run_dir, "Override the run directory");
    app.add_option("--scale", opt.scale, "Multiply all round sizes");
    app.add_option("--distribution", opt.distribution, "Task distribution overrides (JSON map)");
    app.add_option("--override", opt.overrides, "Task weight override, Label=weight (repeatable)")->allow_extra_args(false);
    app.fallthrough();

    app.add_subcommand("score", "Gather student responses and judge every record");
    app.add_subcommand("filter", "Split the corpus into seed and easy pools")->add_option("--delta", opt.delta, "MFD threshold");
    app.add_subcommand("classify", "Label seed and easy records with a task type");
    app.add_subcommand("expand", "Create new instructions from the hard pool")
        ->add_option("--round", opt.round, "Round number")
        ->required();
    app.add_subcommand("refine", "Rewrite instructions and collect enhanced responses")
        ->add_option("--round", opt.round, "Round number");
    auto* plan = app.add_subcommand("plan", "Write a round's training manifest");
    plan->add_option("--round", opt.round, "Round number")->required();
    plan->add_option("--n", opt.n, "Manifest size (default: the round's pool target)");
    app.add_subcommand("run", "Run every remaining stage of every round");
    app.add_subcommand("report", "Write report.json and report.txt");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n" << app.help();
        return kExitValidation;
    }
    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();

    try {
        auto config = load_cli_config(opt);
        Gateway gateway(make_backend(config), config.cache_dir);
        RunLock lock(config.run_dir);
        Pipeline pipeline(config, gateway, &out);
        if (opt.round != 0 && (opt.round < 1 || opt.round > config.schedule.rounds)) {
            throw ValidationError("--round must be in [1, " + std::to_string(config.schedule.rounds) + "]");
        }
        if (name == "score") {
            pipeline.ensure("score", true);
        } else if (name == "filter") {
            pipeline.ensure("filter", true);
        } else if (name == "classify") {
            pipeline.ensure("classify", true);
        } else if (name == "expand") {
            pipeline.ensure("expand:" + std::to_string(opt.round), true);
        } else if (name == "refine") {
            std::int64_t round = opt.round;
            if (round == 0) {
                round = 1;
                while (round < config.schedule.rounds && pipeline.state().done("refine:" + std::to_string(round))) ++round;
            }
            pipeline.ensure("refine:" + std::to_string(round), true);
        } else if (name == "plan") {
            if (sub->count("--n")) {
                if (opt.n < 1) throw ValidationError("--n must be at least 1");
                pipeline.set_plan_size(opt.round, opt.n);
            }
            pipeline.ensure("plan:" + std::to_string(opt.round), true);
        } else if (name == "run") {
            pipeline.run_all();
            return kExitOk;
        }
        pipeline.write_report();
        return kExitOk;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        err << "stage failure: " << e.what() << "\n";
        return kExitStageFailure;
    }
}

}  // namespace tapir
