#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "tapir/curriculum.hpp"
#include "tapir/gateway.hpp"
#include "tapir/judge.hpp"
#include "tapir/store.hpp"
#include "tapir/synthesis.hpp"
#include "tapir/task_profile.hpp"

namespace tapir {

/// A stage could not complete; the run directory keeps everything finished so far.
struct StageFailure : Error {
    using Error::Error;
};

struct EndpointSet {
    EndpointSpec teacher = EndpointSpec::defaults_for(Role::teacher);
    EndpointSpec judge = EndpointSpec::defaults_for(Role::judge);
    EndpointSpec student = EndpointSpec::defaults_for(Role::student);
    EndpointSpec classifier = EndpointSpec::defaults_for(Role::classifier);
    /// Instruction refiner; a teacher-role endpoint, the teacher itself unless configured.
    std::optional<EndpointSpec> refiner;

    const EndpointSpec& refiner_or_teacher() const { return refiner ? *refiner : teacher; }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ValidationError(where + " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (!allowed.count(key)) throw ValidationError("unknown key '" + key + "' in " + where);
    }
}

template <class T>
T get_as(const nlohmann::json& j, const char* key, const std::string& where) {
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ValidationError("bad or missing '" + std::string(key) + "' in " + where);
    }
}

inline Rational get_rational(const nlohmann::json& j, const char* key, const std::string& where) {
    try {
        return j.at(key).get<Rational>();
    } catch (const std::exception&) {
        throw ValidationError("bad or missing '" + std::string(key) + "' in " + where);
    }
}

inline EndpointSpec parse_endpoint(const nlohmann::json& j, Role role, const std::string& name) {
    const std::string where = "endpoints." + name;
    reject_unknown_keys(j, {"base_url", "model", "api_key_env", "temperature", "max_tokens"}, where);
    auto e = EndpointSpec::defaults_for(role);
    if (j.contains("base_url")) e.base_url = get_as<std::string>(j, "base_url", where);
    if (j.contains("model")) e.model_name = get_as<std::string>(j, "model", where);
    if (j.contains("api_key_env")) e.api_key_env = get_as<std::string>(j, "api_key_env", where);
    if (j.contains("temperature")) e.temperature = get_rational(j, "temperature", where);
    if (j.contains("max_tokens")) e.max_tokens = get_as<std::int64_t>(j, "max_tokens", where);
    e.validate();
    return e;
}

}  // namespace detail

/// Everything one run needs. Relative paths are resolved against the
/// directory holding the config file.
struct PipelineConfig {
    fs::path corpus;
    fs::path run_dir = "run";
    fs::path cache_dir = "cache";
    Rational delta{2};
    Schedule schedule;
    std::vector<std::int64_t> round_sizes{30000, 20000, 20000};
    Rational scale{1};
    DistributionOverrides distribution;
    std::uint64_t rng_seed = 0;
    std::string trainer_hook = "noop";
    bool halt_on_trainer_failure = true;
    EndpointSet endpoints;
    bool mock = false;
    std::optional<fs::path> mock_fixture;
    std::size_t max_in_flight = 8;
    std::set<TaskLabel> refine_tasks = {*TaskLabel::lookup("Math"), *TaskLabel::lookup("Reasoning"),
                                        *TaskLabel::lookup("Code Generation"), *TaskLabel::lookup("Code Debug")};
    double dedup_threshold = 0.8;
    std::optional<fs::path> templates_dir;
    Rational bin_width{1};

    TaskDistribution target() const { return target_distribution(distribution); }

    void validate() const {
        schedule.validate();
        if (delta < Rational(0)) throw ValidationError("delta must be non-negative");
        if (scale <= Rational(0)) throw ValidationError("scale must be positive");
        if (static_cast<std::int64_t>(round_sizes.size()) != schedule.rounds) {
            throw ValidationError("round_sizes must have one entry per round");
        }
        for (auto s : round_sizes) {
            if (s < 0) throw ValidationError("round sizes must be non-negative");
        }
        if (max_in_flight < 1) throw ValidationError("max_in_flight must be at least 1");
        if (!(dedup_threshold > 0.0 && dedup_threshold <= 1.0)) throw ValidationError("dedup_threshold must be in (0, 1]");
        if (bin_width <= Rational(0)) throw ValidationError("bin_width must be positive");
        if (!is_noop_hook(trainer_hook) && trainer_hook.find("{manifest}") == std::string::npos) {
            throw ValidationError("trainer_hook needs a {manifest} placeholder");
        }
        target();
    }

    static PipelineConfig from_json(const nlohmann::json& j, const fs::path& base_dir) {
        using detail::get_as;
        using detail::get_rational;
        const std::string where = "config";
        detail::reject_unknown_keys(j, {"corpus", "run_dir", "cache_dir", "delta", "alpha_1", "delta_alpha", "rounds",
                                        "round_sizes", "scale", "distribution", "rng_seed", "trainer_hook",
                                        "halt_on_trainer_failure", "endpoints", "mock", "mock_fixture",
                                        "max_in_flight", "refine_tasks", "dedup_threshold", "templates_dir",
                                        "bin_width"},
                                    where);
        auto resolve = [&](const fs::path& p) { return p.is_absolute() ? p : base_dir / p; };
        PipelineConfig c;
        c.corpus = resolve(get_as<std::string>(j, "corpus", where));
        c.run_dir = resolve(j.contains("run_dir") ? get_as<std::string>(j, "run_dir", where) : "run");
        c.cache_dir = resolve(j.contains("cache_dir") ? get_as<std::string>(j, "cache_dir", where) : "cache");
        if (j.contains("delta")) c.delta = get_rational(j, "delta", where);
        if (j.contains("alpha_1")) c.schedule.alpha_1 = get_rational(j, "alpha_1", where);
        if (j.contains("delta_alpha")) c.schedule.delta_alpha = get_rational(j, "delta_alpha", where);
        if (j.contains("rounds")) c.schedule.rounds = get_as<std::int64_t>(j, "rounds", where);
        if (j.contains("round_sizes")) c.round_sizes = get_as<std::vector<std::int64_t>>(j, "round_sizes", where);
        if (j.contains("scale")) c.scale = get_rational(j, "scale", where);
        if (j.contains("distribution") && !j.at("distribution").is_null()) {
            const auto& d = j.at("distribution");
            if (d.is_string()) {
                auto path = resolve(d.get<std::string>());
                nlohmann::json file;
                try {
                    file = nlohmann::json::parse(read_file(path));
                } catch (const nlohmann::json::parse_error& e) {
                    throw ValidationError("distribution file " + path.string() + ": " + e.what());
                }
                c.distribution = overrides_from_json(file);
            } else {
                c.distribution = overrides_from_json(d);
            }
        }
        if (j.contains("rng_seed")) c.rng_seed = get_as<std::uint64_t>(j, "rng_seed", where);
        if (j.contains("trainer_hook")) c.trainer_hook = get_as<std::string>(j, "trainer_hook", where);
        if (j.contains("halt_on_trainer_failure")) c.halt_on_trainer_failure = get_as<bool>(j, "halt_on_trainer_failure", where);
        if (j.contains("endpoints")) {
            const auto& e = j.at("endpoints");
            detail::reject_unknown_keys(e, {"teacher", "judge", "student", "classifier", "refiner"}, "endpoints");
            if (e.contains("teacher")) c.endpoints.teacher = detail::parse_endpoint(e.at("teacher"), Role::teacher, "teacher");
            if (e.contains("judge")) c.endpoints.judge = detail::parse_endpoint(e.at("judge"), Role::judge, "judge");
            if (e.contains("student")) c.endpoints.student = detail::parse_endpoint(e.at("student"), Role::student, "student");
            if (e.contains("classifier")) {
                c.endpoints.classifier = detail::parse_endpoint(e.at("classifier"), Role::classifier, "classifier");
            }
            if (e.contains("refiner")) c.endpoints.refiner = detail::parse_endpoint(e.at("refiner"), Role::teacher, "refiner");
        }
        if (j.contains("mock")) c.mock = get_as<bool>(j, "mock", where);
        if (j.contains("mock_fixture") && !j.at("mock_fixture").is_null()) {
            c.mock_fixture = resolve(get_as<std::string>(j, "mock_fixture", where));
        }
        if (j.contains("max_in_flight")) c.max_in_flight = get_as<std::size_t>(j, "max_in_flight", where);
        if (j.contains("refine_tasks")) {
            c.refine_tasks.clear();
            for (const auto& name : get_as<std::vector<std::string>>(j, "refine_tasks", where)) {
                c.refine_tasks.insert(TaskLabel::parse(name));
            }
        }
        if (j.contains("dedup_threshold")) c.dedup_threshold = get_as<double>(j, "dedup_threshold", where);
        if (j.contains("templates_dir") && !j.at("templates_dir").is_null()) {
            c.templates_dir = resolve(get_as<std::string>(j, "templates_dir", where));
        }
        if (j.contains("bin_width")) c.bin_width = get_rational(j, "bin_width", where);
        c.validate();
        return c;
    }

    static PipelineConfig load(const fs::path& path) {
        if (!fs::is_regular_file(path)) throw ValidationError("config file not found: " + path.string());
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_file(path));
        } catch (const nlohmann::json::parse_error& e) {
            throw ValidationError("config " + path.string() + ": " + e.what());
        }
        auto dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
        return from_json(j, dir);
    }
};

/// Exclusive advisory lock on `<run_dir>/.lock`, released on destruction or process exit.
class RunLock {
public:
    explicit RunLock(const fs::path& run_dir) {
        fs::create_directories(run_dir);
        auto path = run_dir / ".lock";
        fd_ = ::open(path.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
        if (fd_ < 0) throw IoError("cannot open lock file " + path.string());
        if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
            ::close(fd_);
            fd_ = -1;
            throw StageFailure("another driver holds " + path.string());
        }
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;
    ~RunLock() {
        if (fd_ >= 0) ::close(fd_);
    }

private:
    int fd_ = -1;
};

/// The multi-round driver. Each stage reads its inputs from and writes its
/// outputs to the run directory, then records itself in state.json, so a
/// rerun resumes after the last finished stage. Layout:
///
///   state.json                      PipelineState
///   pools/corpus.jsonl              corpus with teacher and student responses
///   verdicts.jsonl                  one MfdVerdict per record
///   pools/seed.jsonl, pools/easy.jsonl
///   pools/expanded_r<r>.jsonl       instructions created in round r
///   pools/hard_r<r>.jsonl           hard pool after round r
///   round_<r>/manifest.jsonl, round_<r>/report.json
///   report.json, report.txt
class Pipeline {
public:
    Pipeline(PipelineConfig config, Gateway& gateway, std::ostream* events = nullptr)
        : config_(std::move(config)), gateway_(gateway), events_(events) {
        config_.validate();
        fs::create_directories(config_.run_dir / "pools");
        if (config_.templates_dir) templates_ = TemplateRegistry::load(*config_.templates_dir);
        auto state_path = config_.run_dir / "state.json";
        if (fs::exists(state_path)) {
            try {
                state_ = PipelineState::from_json(nlohmann::json::parse(read_file(state_path)));
            } catch (const nlohmann::json::exception& e) {
                throw ValidationError("corrupt state file " + state_path.string() + ": " + e.what());
            }
        } else {
            state_.rng_seed = config_.rng_seed;
            state_.verdict_cache = "verdicts.jsonl";
            state_.seed_pool = "pools/seed.jsonl";
            state_.easy_pool = "pools/easy.jsonl";
            state_.hard_pool = "pools/seed.jsonl";
            state_.alpha = config_.schedule.alpha_1;
        }
        state_.rng_seed = config_.rng_seed;
    }

    const PipelineConfig& config() const noexcept { return config_; }
    const PipelineState& state() const noexcept { return state_; }

    /// Planned size of round `r` when not overridden: the round's pool target.
    void set_plan_size(std::int64_t round, std::int64_t n) { plan_sizes_[round] = n; }
    void set_delta(const Rational& delta) { config_.delta = delta; }
    /// Stops after the named stage, as if the process had been killed there.
    void set_stop_after(std::string stage) { stop_after_ = std::move(stage); }

    std::vector<std::string> stage_order() const {
        std::vector<std::string> out = {"annotate", "student", "score", "filter", "classify"};
        for (std::int64_t r = 1; r <= config_.schedule.rounds; ++r) {
            for (const char* s : {"expand", "refine", "plan", "hook"}) out.push_back(std::string(s) + ":" + std::to_string(r));
        }
        return out;
    }

    /// Runs `stage` after every earlier stage that has not finished. When
    /// `force` is set the stage runs again even if finished; later stages are
    /// invalidated only if its outputs changed.
    void ensure(const std::string& stage, bool force = false) {
        auto order = stage_order();
        auto it = std::find(order.begin(), order.end(), stage);
        if (it == order.end()) throw ValidationError("unknown stage '" + stage + "'");
        for (auto prior = order.begin(); prior != it; ++prior) {
            if (!state_.done(*prior)) execute(*prior);
        }
        if (force || !state_.done(stage)) execute(stage);
    }

    /// Every stage in order, then the final report. Returns the manifests.
    std::vector<RoundManifest> run_all() {
        for (const auto& stage : stage_order()) {
            if (!state_.done(stage)) execute(stage);
        }
        write_report();
        std::vector<RoundManifest> out;
        for (std::int64_t r = 1; r <= config_.schedule.rounds; ++r) out.push_back(load_manifest(manifest_path(r)));
        return out;
    }

    fs::path manifest_path(std::int64_t round) const { return round_dir(round) / "manifest.jsonl"; }
    fs::path round_dir(std::int64_t round) const { return config_.run_dir / ("round_" + std::to_string(round)); }
    fs::path path(const std::string& relative) const { return config_.run_dir / relative; }

    /// Pool targets as they stand, using the realized seed size when known.
    std::vector<PoolTarget> targets() const {
        auto seed_path = path(state_.seed_pool);
        std::int64_t seed = fs::exists(seed_path) ? static_cast<std::int64_t>(load_corpus(seed_path).size()) : 0;
        return pool_targets(seed, config_.round_sizes, config_.scale);
    }

    /// Writes report.json and report.txt and returns the JSON.
    nlohmann::ordered_json write_report() {
        nlohmann::ordered_json report;
        report["network_calls"] = gateway_.network_calls();
        report["cache_hits"] = gateway_.cache_hits();
        report["completed"] = state_.completed;
        std::string text;
        if (fs::exists(path(state_.verdict_cache))) {
            auto verdicts = load_verdicts(path(state_.verdict_cache));
            auto h = mfd_histogram(verdicts, config_.bin_width);
            std::size_t unscored = 0;
            for (const auto& v : verdicts) unscored += v.unscored;
            nlohmann::ordered_json pass;
            pass["pass"] = "initial";
            pass["histogram"] = h.to_json();
            pass["unscored"] = unscored;
            report["scoring_passes"] = nlohmann::ordered_json::array({pass});
            text += "scoring pass: initial\n" + h.summary();
        }
        nlohmann::ordered_json pools;
        for (const auto& name : {std::string("seed"), std::string("easy")}) {
            auto p = path("pools/" + name + ".jsonl");
            if (fs::exists(p)) pools[name] = load_corpus(p).size();
        }
        auto rounds = nlohmann::ordered_json::array();
        for (std::int64_t r = 1; r <= config_.schedule.rounds; ++r) {
            auto p = round_dir(r) / "report.json";
            if (!fs::exists(p)) continue;
            auto rj = nlohmann::ordered_json::parse(read_file(p));
            pools["hard_r" + std::to_string(r)] = rj.at("hard_pool_size");
            rounds.push_back(std::move(rj));
        }
        report["pools"] = pools;
        report["rounds"] = rounds;
        for (const auto& rj : rounds) {
            text += "round " + rj.at("round").dump() + ": alpha " + rj.at("alpha").dump() + ", hard " +
                    rj.at("hard_entries").dump() + " / " + rj.at("n").dump() + "\n";
        }
        text += "network_calls: " + std::to_string(gateway_.network_calls()) + "\n";
        atomic_write(path("report.json"), report.dump(2) + "\n");
        atomic_write(path("report.txt"), text);
        emit({{"stage", "report"}, {"path", path("report.json").string()}, {"network_calls", gateway_.network_calls()}});
        return report;
    }

private:
    PipelineConfig config_;
    Gateway& gateway_;
    std::ostream* events_;
    TemplateRegistry templates_;
    PipelineState state_;
    std::map<std::int64_t, std::int64_t> plan_sizes_;
    std::optional<std::string> stop_after_;
    bool outputs_changed_ = false;

    void emit(const nlohmann::ordered_json& event) {
        if (events_) *events_ << event.dump() << '\n' << std::flush;
    }

    void save_state() { atomic_write(path("state.json"), state_.to_json().dump(2) + "\n"); }

    /// Writes an artifact, noting whether its bytes differ from what was there.
    void put(const fs::path& p, const std::string& content) {
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        if (!fs::exists(p) || read_file(p) != content) outputs_changed_ = true;
        atomic_write(p, content);
    }

    void execute(const std::string& stage) {
        outputs_changed_ = false;
        const bool was_done = state_.done(stage);
        try {
            run_stage(stage);
        } catch (const ValidationError& e) {
            throw StageFailure("stage " + stage + ": " + e.what());
        } catch (const IoError& e) {
            throw StageFailure("stage " + stage + ": " + e.what());
        }
        auto order = stage_order();
        auto pos = std::find(order.begin(), order.end(), stage);
        if (was_done && outputs_changed_) {
            std::erase_if(state_.completed, [&](const std::string& s) {
                auto q = std::find(order.begin(), order.end(), s);
                return q > pos;
            });
        }
        if (!was_done) state_.completed.push_back(stage);
        save_state();
        if (stop_after_ && *stop_after_ == stage) throw StageFailure("stopped after " + stage);
    }

    void run_stage(const std::string& stage) {
        auto colon = stage.find(':');
        auto name = stage.substr(0, colon);
        std::int64_t round = colon == std::string::npos ? 0 : std::stoll(stage.substr(colon + 1));
        if (name == "annotate") return annotate();
        if (name == "student") return student();
        if (name == "score") return score();
        if (name == "filter") return filter();
        if (name == "classify") return classify_pools();
        if (name == "expand") return expand(round);
        if (name == "refine") return refine(round);
        if (name == "plan") return plan(round);
        if (name == "hook") return hook(round);
        throw ValidationError("unknown stage '" + stage + "'");
    }

    fs::path corpus_path() const { return path("pools/corpus.jsonl"); }

    void annotate() {
        Corpus input = load_corpus(config_.corpus);
        std::vector<std::size_t> todo;
        std::vector<std::string> instructions;
        for (std::size_t i = 0; i < input.size(); ++i) {
            if (!input[i].has_response()) {
                todo.push_back(i);
                instructions.push_back(input[i].instruction);
            }
        }
        auto answers = generate_responses(gateway_, config_.endpoints.teacher, instructions, config_.max_in_flight);
        Corpus out("corpus");
        std::size_t failed = 0;
        std::size_t k = 0;
        for (std::size_t i = 0; i < input.size(); ++i) {
            auto record = input[i];
            if (k < todo.size() && todo[k] == i) {
                if (answers[k]) {
                    record.response = *answers[k];
                } else {
                    ++failed;
                }
                ++k;
            }
            out.add(std::move(record));
        }
        put(corpus_path(), corpus_to_jsonl(out));
        emit({{"stage", "annotate"}, {"records", out.size()}, {"generated", todo.size() - failed}, {"failed", failed}});
    }

    void student() {
        auto result = gather_student_responses(gateway_, config_.endpoints.student, load_corpus(corpus_path()),
                                               config_.max_in_flight);
        result.corpus.set_name("corpus");
        put(corpus_path(), corpus_to_jsonl(result.corpus));
        std::string errors;
        for (const auto& e : result.errors) {
            errors += nlohmann::ordered_json({{"record_id", e.record_id}, {"error", e.error}}).dump() + "\n";
        }
        put(path("reports/student_errors.jsonl"), errors);
        emit({{"stage", "student"}, {"records", result.corpus.size()}, {"errors", result.errors.size()}});
    }

    void score() {
        auto verdicts = score_corpus(gateway_, config_.endpoints.judge, load_corpus(corpus_path()), config_.max_in_flight);
        std::string content;
        for (const auto& v : verdicts) content += verdict_to_json(v).dump() + "\n";
        put(path(state_.verdict_cache), content);
        auto h = mfd_histogram(verdicts, config_.bin_width);
        put(path("reports/mfd_histogram.json"), h.to_json().dump(2) + "\n");
        put(path("reports/mfd_histogram.txt"), h.summary());
        std::size_t unscored = 0;
        for (const auto& v : verdicts) unscored += v.unscored;
        emit({{"stage", "score"}, {"verdicts", verdicts.size()}, {"unscored", unscored},
              {"zero_share", h.zero_share ? nlohmann::ordered_json(h.zero_share->to_double()) : nlohmann::ordered_json("n/a")}});
    }

    void filter() {
        auto corpus = load_corpus(corpus_path());
        auto verdicts = index_verdicts(load_verdicts(path(state_.verdict_cache)));
        auto result = filter_seed(corpus, verdicts, config_.delta);
        // records the teacher never answered cannot be trained on
        Corpus easy("easy");
        std::size_t dropped = 0;
        for (const auto& r : result.easy) {
            if (r.has_response()) {
                easy.add(r);
            } else {
                ++dropped;
            }
        }
        put(path(state_.seed_pool), corpus_to_jsonl(result.seed));
        put(path(state_.easy_pool), corpus_to_jsonl(easy));
        nlohmann::ordered_json report;
        report["delta"] = nlohmann::json(config_.delta);
        report["seed"] = result.seed.size();
        report["easy"] = easy.size();
        report["unscored"] = result.unscored;
        report["dropped_without_response"] = dropped;
        put(path("reports/filter.json"), report.dump(2) + "\n");
        state_.hard_pool = state_.seed_pool;
        emit({{"stage", "filter"}, {"delta", config_.delta.to_string()}, {"seed", result.seed.size()}, {"easy", easy.size()},
              {"unscored", result.unscored.size()}});
    }

    void classify_pools() {
        std::size_t flagged = 0;
        std::size_t classified = 0;
        std::string flags;
        for (const auto& rel : {state_.seed_pool, state_.easy_pool}) {
            auto pool = load_corpus(path(rel));
            std::vector<std::size_t> todo;
            std::vector<std::string> instructions;
            for (std::size_t i = 0; i < pool.size(); ++i) {
                if (!pool[i].task) {
                    todo.push_back(i);
                    instructions.push_back(pool[i].instruction);
                }
            }
            auto labels = classify_batch(gateway_, config_.endpoints.classifier, instructions, config_.max_in_flight);
            Corpus out(pool.name());
            std::size_t k = 0;
            for (std::size_t i = 0; i < pool.size(); ++i) {
                auto record = pool[i];
                if (k < todo.size() && todo[k] == i) {
                    record.task = labels[k].label;
                    if (labels[k].flagged) {
                        ++flagged;
                        flags += nlohmann::ordered_json({{"record_id", record.id}, {"error", labels[k].error}}).dump() + "\n";
                    }
                    ++classified;
                    ++k;
                }
                out.add(std::move(record));
            }
            put(path(rel), corpus_to_jsonl(out));
        }
        put(path("reports/classify_flags.jsonl"), flags);
        emit({{"stage", "classify"}, {"classified", classified}, {"flagged_others", flagged}});
    }

    std::string hard_pool_rel(std::int64_t round) const {
        return round == 0 ? state_.seed_pool : "pools/hard_r" + std::to_string(round) + ".jsonl";
    }

    std::string expanded_rel(std::int64_t round) const { return "pools/expanded_r" + std::to_string(round) + ".jsonl"; }

    void expand(std::int64_t round) {
        auto previous = load_corpus(path(hard_pool_rel(round - 1)));
        auto easy = load_corpus(path(state_.easy_pool));
        const auto target = targets().at(static_cast<std::size_t>(round - 1)).target;
        const auto to_generate = std::max<std::int64_t>(0, target - static_cast<std::int64_t>(previous.size()));

        std::vector<ExpansionRequest> requests;
        if (to_generate > 0 && !previous.empty()) {
            auto draws = stratified_sample(previous, config_.target(), static_cast<std::size_t>(to_generate),
                                           round_seed(state_.rng_seed, round, Stream::expansion));
            std::map<std::string, std::size_t> slot;
            for (const auto& id : draws) {
                auto [it, fresh] = slot.emplace(id, requests.size());
                if (fresh) {
                    const auto* src = previous.find(id);
                    requests.push_back({*src, *src->task, 0});
                }
                ++requests[it->second].count;
            }
        }
        auto outcome = expand_batch(gateway_, config_.endpoints.teacher, requests, round, config_.max_in_flight);

        // earlier pools win every duplicate decision
        std::vector<InstructionRecord> all(previous.begin(), previous.end());
        all.insert(all.end(), easy.begin(), easy.end());
        const auto protected_count = all.size();
        all.insert(all.end(), outcome.records.begin(), outcome.records.end());
        auto decisions = dedup_decisions(all, config_.dedup_threshold);

        Corpus expanded("expanded_r" + std::to_string(round));
        std::string rejects;
        for (const auto& r : outcome.rejections) {
            rejects += nlohmann::ordered_json({{"source_id", r.source_id}, {"reason", r.reason}, {"text", r.text}}).dump() + "\n";
        }
        for (std::size_t i = protected_count; i < all.size(); ++i) {
            if (decisions[i].kept) {
                expanded.add(all[i]);
            } else {
                rejects += nlohmann::ordered_json({{"source_id", *all[i].source_id},
                                                   {"reason", decisions[i].reason + " of " + decisions[i].duplicate_of},
                                                   {"text", all[i].instruction}})
                               .dump() +
                           "\n";
            }
        }
        put(path(expanded_rel(round)), corpus_to_jsonl(expanded));
        put(round_dir(round) / "expansion_rejects.jsonl", rejects);
        emit({{"stage", "expand"}, {"round", round}, {"requested", to_generate}, {"created", expanded.size()},
              {"rejected", static_cast<std::int64_t>(to_generate) - static_cast<std::int64_t>(expanded.size())}});
    }

    void refine(std::int64_t round) {
        std::vector<InstructionRecord> incoming;
        Corpus hard("hard_r" + std::to_string(round));
        if (round == 1) {
            auto seed = load_corpus(path(state_.seed_pool));
            incoming.assign(seed.begin(), seed.end());
        } else {
            for (const auto& r : load_corpus(path(hard_pool_rel(round - 1)))) hard.add(r);
        }
        for (const auto& r : load_corpus(path(expanded_rel(round)))) incoming.push_back(r);

        const auto& refiner = config_.endpoints.refiner_or_teacher();
        std::vector<std::size_t> refine_idx;
        std::vector<ChatRequest> refine_requests;
        for (std::size_t i = 0; i < incoming.size(); ++i) {
            if (incoming[i].task && config_.refine_tasks.count(*incoming[i].task)) {
                refine_idx.push_back(i);
                refine_requests.push_back(refine_request(refiner, templates_, incoming[i].instruction, incoming[i].task));
            }
        }
        auto refine_replies = gateway_.complete_batch(refiner, refine_requests, config_.max_in_flight);
        std::vector<std::optional<Refinement>> refined(incoming.size());
        std::string refinements;
        for (std::size_t k = 0; k < refine_idx.size(); ++k) {
            auto i = refine_idx[k];
            refined[i] = to_refinement(refine_replies[k], incoming[i].instruction);
            refinements += nlohmann::ordered_json({{"record_id", incoming[i].id},
                                                   {"refined_instruction", refined[i]->text},
                                                   {"flagged", refined[i]->flagged}})
                               .dump() +
                           "\n";
        }

        // teacher answers: every expanded record, plus refined seed records
        std::vector<std::size_t> answer_idx;
        std::vector<std::string> prompts_out;
        for (std::size_t i = 0; i < incoming.size(); ++i) {
            const bool expanded = incoming[i].origin == Origin::expanded;
            if (expanded || refined[i]) {
                answer_idx.push_back(i);
                prompts_out.push_back(refined[i] ? refined[i]->text : incoming[i].instruction);
            }
        }
        auto answers = generate_responses(gateway_, config_.endpoints.teacher, prompts_out, config_.max_in_flight);
        std::string failures;
        std::map<std::size_t, std::optional<std::string>> answer_of;
        for (std::size_t k = 0; k < answer_idx.size(); ++k) answer_of[answer_idx[k]] = answers[k];

        std::size_t dropped = 0;
        for (std::size_t i = 0; i < incoming.size(); ++i) {
            auto record = incoming[i];
            if (auto it = answer_of.find(i); it != answer_of.end()) {
                if (it->second) {
                    record.response = *it->second;
                    if (record.origin == Origin::seed) record.origin = Origin::rewritten;
                } else if (record.origin == Origin::expanded) {
                    failures += nlohmann::ordered_json({{"record_id", record.id}, {"error", "no teacher response"}}).dump() + "\n";
                    ++dropped;
                    continue;
                } else {
                    failures += nlohmann::ordered_json({{"record_id", record.id}, {"error", "enhanced response failed; kept original"}}).dump() + "\n";
                }
            }
            if (!record.has_response()) {
                ++dropped;
                continue;
            }
            hard.add(std::move(record));
        }
        put(path(hard_pool_rel(round)), corpus_to_jsonl(hard));
        put(round_dir(round) / "refinements.jsonl", refinements);
        put(round_dir(round) / "response_failures.jsonl", failures);
        state_.hard_pool = hard_pool_rel(round);
        emit({{"stage", "refine"}, {"round", round}, {"refined", refine_idx.size()}, {"answered", answer_idx.size()},
              {"dropped", dropped}, {"hard_pool", hard.size()}});
    }

    void plan(std::int64_t round) {
        auto hard = load_corpus(path(hard_pool_rel(round)));
        auto easy = load_corpus(path(state_.easy_pool));
        auto tgt = targets().at(static_cast<std::size_t>(round - 1));
        std::int64_t n = tgt.target;
        if (auto it = plan_sizes_.find(round); it != plan_sizes_.end()) n = it->second;
        auto dist = config_.target();
        auto manifest = plan_round({hard, easy, hard_pool_rel(round), state_.easy_pool}, config_.schedule, round, n, dist,
                                   state_.rng_seed);
        fs::create_directories(round_dir(round));
        put(manifest_path(round), manifest_to_jsonl(manifest));

        auto marginal = [&](const Corpus& pool, Pool which) {
            std::array<std::size_t, kTaskCount> counts{};
            std::size_t total = 0;
            for (const auto& e : manifest.entries) {
                if (e.pool != which) continue;
                ++counts[pool.find(e.record_id)->task->index()];
                ++total;
            }
            nlohmann::ordered_json j = nlohmann::ordered_json::object();
            for (std::size_t l = 0; l < kTaskCount; ++l) {
                if (counts[l]) j[std::string(kTaxonomy[l])] = static_cast<double>(counts[l]) / static_cast<double>(total);
            }
            return j;
        };
        nlohmann::ordered_json report;
        report["round"] = round;
        report["alpha"] = nlohmann::json(manifest.alpha);
        report["n"] = n;
        report["hard_entries"] = manifest.count(Pool::hard);
        report["easy_entries"] = manifest.count(Pool::easy);
        report["realized_hard_fraction"] = nlohmann::json(manifest.realized_hard_fraction);
        report["pool_target"] = tgt.target;
        report["hard_pool_size"] = hard.size();
        report["easy_pool_size"] = easy.size();
        report["shortfall"] = std::max<std::int64_t>(0, tgt.target - static_cast<std::int64_t>(hard.size()));
        report["task_marginals"] = {{"hard", marginal(hard, Pool::hard)}, {"easy", marginal(easy, Pool::easy)}};
        put(round_dir(round) / "report.json", report.dump(2) + "\n");
        state_.round = round;
        state_.alpha = manifest.alpha;
        state_.hard_pool = hard_pool_rel(round);
        emit({{"stage", "plan"}, {"round", round}, {"alpha", manifest.alpha.to_string()}, {"n", n},
              {"hard", manifest.count(Pool::hard)}, {"easy", manifest.count(Pool::easy)},
              {"manifest", manifest_path(round).string()}});
    }

    void hook(std::int64_t round) {
        auto pools = shell_quote(path(hard_pool_rel(round)).string()) + " " + shell_quote(path(state_.easy_pool).string());
        auto result = trainer_hook(manifest_path(round), config_.trainer_hook, pools, round);
        auto report_path = round_dir(round) / "report.json";
        auto report = nlohmann::ordered_json::parse(read_file(report_path));
        report["trainer"] = {{"noop", result.noop}, {"exit_status", result.exit_status}, {"seconds", result.seconds}};
        atomic_write(report_path, report.dump(2) + "\n");
        emit({{"stage", "hook"}, {"round", round}, {"noop", result.noop}, {"exit_status", result.exit_status}});
        if (!result.ok() && config_.halt_on_trainer_failure) {
            throw StageFailure("trainer hook failed in round " + std::to_string(round) + " with status " +
                               std::to_string(result.exit_status));
        }
    }
};

/// Runs the whole loop and returns one manifest per round.
inline std::vector<RoundManifest> run_pipeline(const PipelineConfig& config, Gateway& gateway, std::ostream* events = nullptr) {
    RunLock lock(config.run_dir);
    Pipeline pipeline(config, gateway, events);
    return pipeline.run_all();
}

}  // namespace tapir
