#include <gtest/gtest.h>

#include <sstream>

#include "support.hpp"
#include "tapir/cli.hpp"
#include "tapir/judge.hpp"

using namespace tapir;
using testing_support::TempDir;

namespace {

struct Result {
    int status;
    std::string out;
    std::string err;
};

Result run_cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    int status = dispatch(args, out, err);
    return {status, out.str(), err.str()};
}

std::vector<nlohmann::json> events(const std::string& out) {
    std::vector<nlohmann::json> v;
    std::istringstream in(out);
    for (std::string line; std::getline(in, line);) {
        if (!line.empty()) v.push_back(nlohmann::json::parse(line));
    }
    return v;
}

std::map<std::string, std::string> outputs(const fs::path& run) {
    auto snap = testing_support::snapshot(run);
    std::erase_if(snap, [](const auto& kv) {
        auto name = fs::path(kv.first).filename().string();
        return name == "report.json" || name == "report.txt" || name == ".lock" || name == "state.json";
    });
    return snap;
}

}  // namespace

TEST(Cli, UnknownSubcommandPrintsUsage) {
    auto r = run_cli({"bogus"});
    EXPECT_EQ(r.status, kExitValidation);
    EXPECT_NE(r.err.find("Usage"), std::string::npos);
    EXPECT_EQ(run_cli({}).status, kExitValidation);
    EXPECT_EQ(run_cli({"plan"}).status, kExitValidation);
}

TEST(Cli, HelpExitsZero) {
    auto r = run_cli({"--help"});
    EXPECT_EQ(r.status, kExitOk);
    EXPECT_NE(r.out.find("plan"), std::string::npos);
}

TEST(Cli, MissingConfigIsValidationError) {
    TempDir dir;
    auto r = run_cli({"--config", (dir / "absent.json").string(), "score"});
    EXPECT_EQ(r.status, kExitValidation);
}

TEST(Cli, UnknownConfigKeyRejected) {
    TempDir dir;
    auto config = testing_support::write_demo_run(dir.path(), 20, {{"dleta", 3}});
    auto r = run_cli({"--config", config.string(), "score"});
    EXPECT_EQ(r.status, kExitValidation);
    EXPECT_NE(r.err.find("dleta"), std::string::npos);
}

TEST(Cli, BadOverrideRejected) {
    TempDir dir;
    auto config = testing_support::write_demo_run(dir.path(), 20);
    EXPECT_EQ(run_cli({"--config", config.string(), "--override", "Astrology=0.5", "score"}).status, kExitValidation);
    EXPECT_EQ(run_cli({"--config", config.string(), "--override", "Math=1.5", "score"}).status, kExitValidation);
    EXPECT_EQ(run_cli({"--config", config.string(), "--round", "4", "expand"}).status, kExitValidation);
}

TEST(Cli, FilterPrintsSizesAndKeepsOnlyHighMfd) {
    TempDir dir;
    auto config = testing_support::write_demo_run(dir.path(), 200);
    auto r = run_cli({"--config", config.string(), "filter", "--delta", "2"});
    ASSERT_EQ(r.status, kExitOk) << r.err;
    nlohmann::json filter_event;
    for (const auto& e : events(r.out)) {
        if (e["stage"] == "filter") filter_event = e;
    }
    ASSERT_FALSE(filter_event.is_null());
    auto seed = load_corpus(dir / "run/pools/seed.jsonl");
    auto easy = load_corpus(dir / "run/pools/easy.jsonl");
    EXPECT_EQ(filter_event["seed"].get<std::size_t>(), seed.size());
    EXPECT_EQ(filter_event["easy"].get<std::size_t>(), easy.size());
    EXPECT_GT(seed.size(), 0u);
    EXPECT_GT(easy.size(), 0u);

    auto verdicts = index_verdicts(load_verdicts(dir / "run/verdicts.jsonl"));
    for (const auto& rec : seed) {
        const auto& v = verdicts.at(rec.id);
        ASSERT_FALSE(v.unscored);
        EXPECT_GT(v.mfd, Rational(2));
    }
    for (const auto& rec : easy) {
        const auto& v = verdicts.at(rec.id);
        if (!v.unscored) EXPECT_LE(v.mfd, Rational(2));
    }

    // a stricter threshold reruns the filter and shrinks the seed
    auto stricter = run_cli({"--config", config.string(), "filter", "--delta", "4"});
    ASSERT_EQ(stricter.status, kExitOk) << stricter.err;
    EXPECT_LE(load_corpus(dir / "run/pools/seed.jsonl").size(), seed.size());
}

TEST(Cli, PlanWritesManifestOfRequestedSize) {
    TempDir dir;
    auto config = testing_support::write_demo_run(dir.path(), 200);
    auto r = run_cli({"--config", config.string(), "plan", "--round", "1", "--n", "100"});
    ASSERT_EQ(r.status, kExitOk) << r.err;
    auto m = load_manifest(dir / "run/round_1/manifest.jsonl");
    EXPECT_EQ(m.entries.size(), 100u);
    EXPECT_EQ(m.count(Pool::hard), 30u);
    EXPECT_EQ(m.alpha, Rational(3, 10));
    EXPECT_TRUE(fs::exists(dir / "run/report.json"));
    EXPECT_EQ(run_cli({"--config", config.string(), "plan", "--round", "1", "--n", "0"}).status, kExitValidation);
}

TEST(Cli, FailingHookIsStageFailure) {
    TempDir dir;
    auto config = testing_support::write_demo_run(dir.path(), 100, {{"trainer_hook", "false {manifest}"}});
    auto r = run_cli({"--config", config.string(), "run"});
    EXPECT_EQ(r.status, kExitStageFailure);
    EXPECT_TRUE(fs::exists(dir / "run/round_1/manifest.jsonl"));
    EXPECT_FALSE(fs::exists(dir / "run/round_2/manifest.jsonl"));
    auto report = nlohmann::json::parse(read_file(dir / "run/round_1/report.json"));
    EXPECT_EQ(report["trainer"]["exit_status"], 1);
}

TEST(Cli, HookReceivesEachManifest) {
    TempDir dir;
    auto log = dir / "hook.log";
    auto config = testing_support::write_demo_run(dir.path(), 100,
                                                  {{"trainer_hook", "echo {round} {manifest} >> '" + log.string() + "'"}});
    ASSERT_EQ(run_cli({"--config", config.string(), "run"}).status, kExitOk);
    std::istringstream in(read_file(log));
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    ASSERT_EQ(lines.size(), 3u);
    for (int r = 1; r <= 3; ++r) {
        auto expected = std::to_string(r) + " " + (dir / "run" / ("round_" + std::to_string(r)) / "manifest.jsonl").string();
        EXPECT_EQ(lines[r - 1], expected);
    }
}

TEST(Cli, RunMatchesManualSequence) {
    TempDir a, b;
    auto ca = testing_support::write_demo_run(a.path(), 150);
    auto cb = testing_support::write_demo_run(b.path(), 150);
    ASSERT_EQ(run_cli({"--config", ca.string(), "run"}).status, kExitOk);

    std::vector<std::vector<std::string>> steps = {{"score"}, {"filter"}, {"classify"}};
    for (int r = 1; r <= 3; ++r) {
        auto round = std::to_string(r);
        steps.push_back({"expand", "--round", round});
        steps.push_back({"refine", "--round", round});
        steps.push_back({"plan", "--round", round});
    }
    for (auto step : steps) {
        step.insert(step.begin(), {"--config", cb.string()});
        auto r = run_cli(step);
        ASSERT_EQ(r.status, kExitOk) << step[2] << ": " << r.err;
    }
    EXPECT_EQ(outputs(a / "run"), outputs(b / "run"));
}

TEST(Cli, WarmCacheRerunIsIdenticalAndOffline) {
    TempDir dir;
    auto config = testing_support::write_demo_run(dir.path(), 150);
    ASSERT_EQ(run_cli({"--config", config.string(), "run"}).status, kExitOk);
    auto first = outputs(dir / "run");
    auto warm = run_cli({"--config", config.string(), "--run-dir", (dir / "run2").string(), "run"});
    ASSERT_EQ(warm.status, kExitOk) << warm.err;
    EXPECT_EQ(outputs(dir / "run2"), first);
    auto report = nlohmann::json::parse(read_file(dir / "run2/report.json"));
    EXPECT_EQ(report["network_calls"], 0);
    EXPECT_GT(report["cache_hits"].get<std::int64_t>(), 0);
}

TEST(Pipeline, ResumesAfterEveryStage) {
    TempDir ref_dir;
    auto ref_config = PipelineConfig::load(testing_support::write_demo_run(ref_dir.path(), 120));
    std::map<std::string, std::string> reference;
    {
        Gateway g(make_backend(ref_config), ref_config.cache_dir);
        Pipeline p(ref_config, g);
        p.run_all();
        reference = outputs(ref_config.run_dir);
    }
    Gateway probe(make_backend(ref_config), std::nullopt);
    auto order = Pipeline(ref_config, probe).stage_order();
    for (const auto& stop : order) {
        TempDir dir;
        auto config = PipelineConfig::load(testing_support::write_demo_run(dir.path(), 120));
        {
            Gateway g(make_backend(config), config.cache_dir);
            Pipeline p(config, g);
            p.set_stop_after(stop);
            EXPECT_THROW(p.run_all(), StageFailure) << stop;
        }
        Gateway g(make_backend(config), config.cache_dir);
        Pipeline resumed(config, g);
        EXPECT_TRUE(resumed.state().done(stop)) << stop;
        resumed.run_all();
        EXPECT_EQ(outputs(config.run_dir), reference) << "stopped after " << stop;
    }
}

TEST(Pipeline, ForcedRerunKeepsDownstreamWhenUnchanged) {
    TempDir dir;
    auto config = PipelineConfig::load(testing_support::write_demo_run(dir.path(), 100));
    Gateway g(make_backend(config), config.cache_dir);
    Pipeline p(config, g);
    p.run_all();
    auto completed = p.state().completed;
    p.ensure("classify", true);
    EXPECT_EQ(p.state().completed.size(), completed.size());

    p.set_delta(Rational(5));
    p.ensure("filter", true);
    EXPECT_TRUE(p.state().done("filter"));
    EXPECT_FALSE(p.state().done("plan:1"));
}

TEST(Pipeline, SecondDriverIsLockedOut) {
    TempDir dir;
    RunLock first(dir.path());
    EXPECT_THROW(RunLock second(dir.path()), StageFailure);
}

TEST(Pipeline, ManifestFractionsFollowSchedule) {
    TempDir dir;
    auto config = PipelineConfig::load(testing_support::write_demo_run(dir.path(), 200));
    Gateway g(make_backend(config), config.cache_dir);
    Pipeline p(config, g);
    auto manifests = p.run_all();
    ASSERT_EQ(manifests.size(), 3u);
    auto targets = p.targets();
    for (std::size_t i = 0; i < manifests.size(); ++i) {
        const auto& m = manifests[i];
        auto n = static_cast<std::int64_t>(m.entries.size());
        EXPECT_EQ(n, targets[i].target);
        EXPECT_EQ(static_cast<std::int64_t>(m.count(Pool::hard)), (Rational(n) * alpha_at(config.schedule, m.round)).round());
        auto hard = load_corpus(p.path(m.hard_pool));
        auto easy = load_corpus(p.path(m.easy_pool));
        for (const auto& e : m.entries) {
            ASSERT_TRUE(e.pool == Pool::hard ? hard.contains(e.record_id) : easy.contains(e.record_id));
        }
    }
}
