#pragma once

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <string>
#include <vector>

#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "tapir/random.hpp"
#include "tapir/rational.hpp"
#include "tapir/store.hpp"
#include "tapir/task_profile.hpp"

namespace tapir {

/// Hard-pool share per round: alpha_1 + (r - 1) * delta_alpha, clamped to [0, 1].
struct Schedule {
    Rational alpha_1{3, 10};
    Rational delta_alpha{1, 5};
    std::int64_t rounds = 3;

    void validate() const {
        if (alpha_1 < Rational(0) || alpha_1 > Rational(1)) throw ValidationError("alpha_1 must be in [0, 1]");
        if (delta_alpha < Rational(0)) throw ValidationError("delta_alpha must be non-negative");
        if (rounds < 1) throw ValidationError("rounds must be at least 1");
    }
};

inline Rational alpha_at(const Schedule& schedule, std::int64_t round) {
    if (round < 1 || round > schedule.rounds) {
        throw ValidationError("round " + std::to_string(round) + " outside [1, " + std::to_string(schedule.rounds) + "]");
    }
    auto alpha = schedule.alpha_1 + Rational(round - 1) * schedule.delta_alpha;
    if (alpha < Rational(0)) return Rational(0);
    if (alpha > Rational(1)) return Rational(1);
    return alpha;
}

/// Size bookkeeping for one round of pool growth.
struct PoolTarget {
    std::int64_t round = 1;
    /// Hard pool size the round aims for.
    std::int64_t target = 0;
    /// Records the teacher must create to reach it from the previous pool.
    std::int64_t to_generate = 0;
};

/// `round_sizes[0]` is the size of the first-round pool, seed included; each
/// later entry is that round's growth. Sizes are multiplied by `scale` and
/// rounded. Assumes every requested record is delivered; the driver recomputes
/// `to_generate` from the realized pool when expansion undershoots.
inline std::vector<PoolTarget> pool_targets(std::int64_t seed_size, const std::vector<std::int64_t>& round_sizes,
                                            const Rational& scale) {
    if (scale <= Rational(0)) throw ValidationError("scale must be positive");
    std::vector<PoolTarget> out;
    std::int64_t cumulative = 0;
    std::int64_t previous = seed_size;
    for (std::size_t r = 0; r < round_sizes.size(); ++r) {
        if (round_sizes[r] < 0) throw ValidationError("round sizes must be non-negative");
        cumulative += round_sizes[r];
        auto target = std::max<std::int64_t>((Rational(cumulative) * scale).round(), seed_size);
        out.push_back({static_cast<std::int64_t>(r + 1), target, std::max<std::int64_t>(0, target - previous)});
        previous = std::max(previous, target);
    }
    return out;
}

/// References the round planner works from.
struct PipelineState {
    std::int64_t round = 0;
    Rational alpha;
    std::string seed_pool;
    std::string easy_pool;
    std::string hard_pool;
    std::string verdict_cache;
    std::uint64_t rng_seed = 0;
    std::vector<std::string> completed;

    bool done(const std::string& stage) const {
        return std::find(completed.begin(), completed.end(), stage) != completed.end();
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["round"] = round;
        j["alpha"] = nlohmann::json(alpha);
        j["seed_pool"] = seed_pool;
        j["easy_pool"] = easy_pool;
        j["hard_pool"] = hard_pool;
        j["verdict_cache"] = verdict_cache;
        j["rng_seed"] = rng_seed;
        j["completed"] = completed;
        return j;
    }

    static PipelineState from_json(const nlohmann::json& j) {
        PipelineState s;
        s.round = j.at("round").get<std::int64_t>();
        s.alpha = j.at("alpha").get<Rational>();
        s.seed_pool = j.at("seed_pool").get<std::string>();
        s.easy_pool = j.at("easy_pool").get<std::string>();
        s.hard_pool = j.at("hard_pool").get<std::string>();
        s.verdict_cache = j.at("verdict_cache").get<std::string>();
        s.rng_seed = j.at("rng_seed").get<std::uint64_t>();
        s.completed = j.at("completed").get<std::vector<std::string>>();
        return s;
    }

    friend bool operator==(const PipelineState&, const PipelineState&) = default;
};

/// Seeds for the independent random streams of one round.
enum class Stream : std::uint64_t { hard = 1, easy = 2, order = 3, expansion = 4 };

inline std::uint64_t round_seed(std::uint64_t rng_seed, std::int64_t round, Stream stream) {
    return mix_seed(mix_seed(rng_seed, static_cast<std::uint64_t>(round)), static_cast<std::uint64_t>(stream));
}

/// Hard and easy pools plus the names written into the manifest header.
struct PlanInputs {
    const Corpus& hard;
    const Corpus& easy;
    std::string hard_name;
    std::string easy_name;
};

/// Samples one round: round(n * alpha_r) entries from the hard pool and the
/// rest from the easy pool, both task-stratified, then shuffled together.
/// Every entry has weight 1; repeats encode weighting.
inline RoundManifest plan_round(const PlanInputs& pools, const Schedule& schedule, std::int64_t round, std::int64_t n,
                                const TaskDistribution& dist, std::uint64_t rng_seed) {
    if (n < 1) throw ValidationError("round size n must be at least 1");
    const auto alpha = alpha_at(schedule, round);
    const auto hard_count = (Rational(n) * alpha).round();
    const auto easy_count = n - hard_count;
    if (hard_count > 0 && pools.hard.empty()) throw ValidationError("hard pool '" + pools.hard_name + "' is empty");
    if (easy_count > 0 && pools.easy.empty()) throw ValidationError("easy pool '" + pools.easy_name + "' is empty");

    auto hard_ids = stratified_sample(pools.hard, dist, static_cast<std::size_t>(hard_count),
                                      round_seed(rng_seed, round, Stream::hard));
    auto easy_ids = stratified_sample(pools.easy, dist, static_cast<std::size_t>(easy_count),
                                      round_seed(rng_seed, round, Stream::easy));

    RoundManifest m;
    m.round = round;
    m.alpha = alpha;
    m.rng_seed = rng_seed;
    m.hard_pool = pools.hard_name;
    m.easy_pool = pools.easy_name;
    m.entries.reserve(static_cast<std::size_t>(n));
    for (auto& id : hard_ids) m.entries.push_back({std::move(id), Pool::hard, Rational(1)});
    for (auto& id : easy_ids) m.entries.push_back({std::move(id), Pool::easy, Rational(1)});
    Xoshiro256 order_rng(round_seed(rng_seed, round, Stream::order));
    shuffle_in_place(m.entries, order_rng);
    m.realized_hard_fraction = m.hard_fraction();
    return m;
}

struct HookResult {
    int exit_status = 0;
    double seconds = 0.0;
    std::string command;
    bool noop = false;

    bool ok() const noexcept { return exit_status == 0; }
};

inline bool is_noop_hook(const std::string& command_template) {
    auto t = trim_copy(command_template);
    return t.empty() || t == "noop";
}

/// Single-quotes `s` for /bin/sh.
inline std::string shell_quote(const std::string& s) {
    std::string q = "'";
    for (char c : s) {
        if (c == '\'') {
            q += "'\\''";
        } else {
            q.push_back(c);
        }
    }
    return q + "'";
}

/// Runs the external trainer with `{manifest}` (and optionally `{pools}`,
/// `{round}`) substituted; empty or "noop" succeeds without running anything.
inline HookResult trainer_hook(const fs::path& manifest_path, const std::string& command_template,
                               const std::string& pools = {}, std::int64_t round = 0) {
    HookResult result;
    if (is_noop_hook(command_template)) {
        result.noop = true;
        return result;
    }
    if (command_template.find("{manifest}") == std::string::npos) {
        throw ValidationError("trainer hook command needs a {manifest} placeholder");
    }
    auto cmd = substitute(command_template, "manifest", shell_quote(manifest_path.string()));
    cmd = substitute(cmd, "pools", pools);
    cmd = substitute(cmd, "round", std::to_string(round));
    result.command = cmd;
    auto start = std::chrono::steady_clock::now();
    int raw = std::system(cmd.c_str());
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (raw == -1) {
        result.exit_status = 127;
    } else if (WIFEXITED(raw)) {
        result.exit_status = WEXITSTATUS(raw);
    } else {
        result.exit_status = 128 + (WIFSIGNALED(raw) ? WTERMSIG(raw) : 0);
    }
    return result;
}

}  // namespace tapir
