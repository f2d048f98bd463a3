#include <gtest/gtest.h>

#include "support.hpp"
#include "tapir/curriculum.hpp"

using namespace tapir;
using testing_support::TempDir;

namespace {

Corpus pool_of(const std::string& prefix, std::size_t n, std::vector<const char*> labels = {"Math", "Writing", "Law"}) {
    Corpus c(prefix);
    for (std::size_t i = 0; i < n; ++i) {
        auto r = InstructionRecord::make(prefix + " record " + std::to_string(i));
        r.task = TaskLabel::parse(labels[i % labels.size()]);
        c.add(std::move(r));
    }
    return c;
}

}  // namespace

TEST(Alpha, DefaultScheduleIsExact) {
    Schedule s;
    EXPECT_EQ(alpha_at(s, 1), Rational(3, 10));
    EXPECT_EQ(alpha_at(s, 2), Rational(1, 2));
    EXPECT_EQ(alpha_at(s, 3), Rational(7, 10));
}

TEST(Alpha, ConstantAndClamped) {
    Schedule flat{Rational(2, 5), Rational(0), 4};
    for (int r = 1; r <= 4; ++r) EXPECT_EQ(alpha_at(flat, r), Rational(2, 5));
    Schedule steep{Rational(9, 10), Rational(1, 5), 3};
    EXPECT_EQ(alpha_at(steep, 2), Rational(1));
    EXPECT_EQ(alpha_at(steep, 3), Rational(1));
}

TEST(Alpha, RoundOutOfRange) {
    Schedule s;
    EXPECT_THROW(alpha_at(s, 0), ValidationError);
    EXPECT_THROW(alpha_at(s, 4), ValidationError);
}

TEST(Alpha, MonotoneAndBounded) {
    Xoshiro256 rng(8);
    for (int t = 0; t < 200; ++t) {
        Schedule s{Rational(static_cast<std::int64_t>(rng.next_below(11)), 10), Rational(static_cast<std::int64_t>(rng.next_below(6)), 10), 6};
        Rational prev(0);
        for (int r = 1; r <= s.rounds; ++r) {
            auto a = alpha_at(s, r);
            EXPECT_GE(a, prev);
            EXPECT_GE(a, Rational(0));
            EXPECT_LE(a, Rational(1));
            prev = a;
        }
    }
}

TEST(PoolTargets, PaperAccounting) {
    auto t = pool_targets(11000, {30000, 20000, 20000}, Rational(1));
    ASSERT_EQ(t.size(), 3u);
    EXPECT_EQ(t[0].target, 30000);
    EXPECT_EQ(t[0].to_generate, 19000);
    EXPECT_EQ(t[1].target, 50000);
    EXPECT_EQ(t[1].to_generate, 20000);
    EXPECT_EQ(t[2].target, 70000);
    EXPECT_EQ(t[2].to_generate, 20000);
    EXPECT_EQ(11000 + t[0].to_generate + t[1].to_generate + t[2].to_generate, 70000);
}

TEST(PoolTargets, ScaledAndSeedFloor) {
    auto t = pool_targets(89, {30000, 20000, 20000}, Rational(1, 100));
    EXPECT_EQ(t[0].target, 300);
    EXPECT_EQ(t[0].to_generate, 211);
    EXPECT_EQ(t[2].target, 700);
    auto big_seed = pool_targets(500, {300, 100}, Rational(1));
    EXPECT_EQ(big_seed[0].target, 500);
    EXPECT_EQ(big_seed[0].to_generate, 0);
    EXPECT_EQ(big_seed[1].to_generate, 0);
    EXPECT_THROW(pool_targets(1, {1}, Rational(0)), ValidationError);
}

TEST(PlanRound, AllHardAtAlphaOne) {
    auto hard = pool_of("hard", 20), easy = pool_of("easy", 20);
    Schedule s{Rational(1), Rational(0), 1};
    auto m = plan_round({hard, easy, "h", "e"}, s, 1, 50, target_distribution(), 1);
    EXPECT_EQ(m.count(Pool::hard), 50u);
    EXPECT_EQ(m.count(Pool::easy), 0u);
    EXPECT_EQ(m.realized_hard_fraction, Rational(1));
}

TEST(PlanRound, AllEasyAtAlphaZero) {
    auto hard = pool_of("hard", 20), easy = pool_of("easy", 20);
    Schedule s{Rational(0), Rational(0), 1};
    auto m = plan_round({hard, easy, "h", "e"}, s, 1, 10, target_distribution(), 1);
    EXPECT_EQ(m.count(Pool::easy), 10u);
    EXPECT_EQ(m.count(Pool::hard), 0u);
    Corpus empty("none");
    EXPECT_NO_THROW(plan_round({empty, easy, "h", "e"}, s, 1, 10, target_distribution(), 1));
}

TEST(PlanRound, ExactCountsAtTenThousand) {
    auto hard = pool_of("hard", 300), easy = pool_of("easy", 300);
    Schedule s;
    const std::size_t expected[] = {3000, 5000, 7000};
    for (int r = 1; r <= 3; ++r) {
        auto m = plan_round({hard, easy, "h", "e"}, s, r, 10000, target_distribution(), 7);
        EXPECT_EQ(m.count(Pool::hard), expected[r - 1]);
        EXPECT_EQ(m.entries.size(), 10000u);
        EXPECT_EQ(m.realized_hard_fraction, alpha_at(s, r));
        for (const auto& e : m.entries) {
            ASSERT_EQ(e.weight, Rational(1));
            ASSERT_TRUE(e.pool == Pool::hard ? hard.contains(e.record_id) : easy.contains(e.record_id));
        }
    }
}

TEST(PlanRound, RoundsHalvesAwayFromZero) {
    auto hard = pool_of("hard", 5), easy = pool_of("easy", 5);
    Schedule s{Rational(1, 2), Rational(0), 1};
    EXPECT_EQ(plan_round({hard, easy, "h", "e"}, s, 1, 7, target_distribution(), 1).count(Pool::hard), 4u);
}

TEST(PlanRound, DeterministicAndRoundIndependent) {
    auto hard = pool_of("hard", 40), easy = pool_of("easy", 40);
    Schedule s;
    auto a = plan_round({hard, easy, "h", "e"}, s, 2, 300, target_distribution(), 99);
    auto b = plan_round({hard, easy, "h", "e"}, s, 2, 300, target_distribution(), 99);
    auto c = plan_round({hard, easy, "h", "e"}, s, 3, 300, target_distribution(), 99);
    EXPECT_EQ(manifest_to_jsonl(a), manifest_to_jsonl(b));
    EXPECT_NE(a.entries, c.entries);
    EXPECT_NE(round_seed(99, 1, Stream::hard), round_seed(99, 2, Stream::hard));
    EXPECT_NE(round_seed(99, 1, Stream::hard), round_seed(99, 1, Stream::easy));
}

TEST(PlanRound, EmptyPoolIsNamedInError) {
    auto easy = pool_of("easy", 5);
    Corpus hard("hard");
    try {
        plan_round({hard, easy, "pools/hard_r1.jsonl", "pools/easy.jsonl"}, Schedule{}, 1, 10, target_distribution(), 1);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("pools/hard_r1.jsonl"), std::string::npos);
    }
    EXPECT_THROW(plan_round({easy, easy, "h", "e"}, Schedule{}, 1, 0, target_distribution(), 1), ValidationError);
}

TEST(PlanRound, TaskMarginalsAtTenThousand) {
    std::vector<const char*> labels;
    for (auto name : kTaxonomy) labels.push_back(name.data());
    auto hard = pool_of("hard", 320, labels), easy = pool_of("easy", 320, labels);
    auto dist = target_distribution();
    auto m = plan_round({hard, easy, "h", "e"}, Schedule{Rational(1, 2), Rational(0), 1}, 1, 20000, dist, 3);
    for (auto which : {Pool::hard, Pool::easy}) {
        const auto& pool = which == Pool::hard ? hard : easy;
        std::array<double, kTaskCount> freq{};
        double n = static_cast<double>(m.count(which));
        for (const auto& e : m.entries) {
            if (e.pool == which) freq[pool.find(e.record_id)->task->index()] += 1.0 / n;
        }
        double l1 = 0.0;
        for (std::size_t i = 0; i < kTaskCount; ++i) l1 += std::abs(freq[i] - dist.weights()[i]);
        EXPECT_LT(l1, 0.05);
    }
}

TEST(State, RoundTrips) {
    PipelineState s;
    s.round = 2;
    s.alpha = Rational(1, 2);
    s.seed_pool = "pools/seed.jsonl";
    s.easy_pool = "pools/easy.jsonl";
    s.hard_pool = "pools/hard_r2.jsonl";
    s.verdict_cache = "verdicts.jsonl";
    s.rng_seed = 18446744073709551615ULL;
    s.completed = {"annotate", "score"};
    auto back = PipelineState::from_json(nlohmann::json::parse(s.to_json().dump()));
    EXPECT_EQ(back, s);
}

TEST(Hook, NoopSucceedsImmediately) {
    for (const char* t : {"", "noop", "  noop "}) {
        auto r = trainer_hook("m.jsonl", t);
        EXPECT_TRUE(r.ok());
        EXPECT_TRUE(r.noop);
    }
}

TEST(Hook, SubstitutesQuotedManifestPath) {
    TempDir dir;
    auto manifest = dir / "it's a manifest.jsonl";
    auto out = dir / "seen.txt";
    auto r = trainer_hook(manifest, "printf '%s|%s' {manifest} {round} > '" + out.string() + "'", "", 3);
    EXPECT_TRUE(r.ok());
    EXPECT_EQ(read_file(out), manifest.string() + "|3");
}

TEST(Hook, FailureStatusIsReported) {
    auto r = trainer_hook("m.jsonl", "false {manifest}");
    EXPECT_FALSE(r.ok());
    EXPECT_EQ(r.exit_status, 1);
    EXPECT_EQ(trainer_hook("m.jsonl", "exit 7 # {manifest}").exit_status, 7);
    EXPECT_THROW(trainer_hook("m.jsonl", "train.sh"), ValidationError);
}
