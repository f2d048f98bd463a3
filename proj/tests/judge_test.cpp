#include <gtest/gtest.h>

#include <map>

#include "judge_fixtures.hpp"
#include "support.hpp"
#include "tapir/judge.hpp"

using namespace tapir;
using testing_support::TempDir;

namespace {

EndpointSpec judge_endpoint() { return EndpointSpec::defaults_for(Role::judge); }

std::string scores(int a, int b) {
    return "Evaluation evidence: ok.\nScore of the Assistant 1: " + std::to_string(a) + "\nScore of the Assistant 2: " +
           std::to_string(b);
}

/// Judge that scores TEACHER-first prompts with `ab` and STUDENT-first prompts with `ba`.
std::shared_ptr<MockBackend> scripted_judge(const std::string& teacher_first, const std::string& student_first) {
    return std::make_shared<MockBackend>(std::vector<MockBackend::Rule>{
        {"[The Start of Assistant 1's Answer]\nTEACHER", teacher_first, std::nullopt, 0},
        {"[The Start of Assistant 1's Answer]\nSTUDENT", student_first, std::nullopt, 0},
    });
}

RetryPolicy fast_retry() { return {0, std::chrono::milliseconds(1), 0.0}; }

}  // namespace

TEST(ParseJudgeReply, Fixtures) {
    for (const auto& f : testing_support::judge_fixtures()) {
        if (f.expected) {
            EXPECT_EQ(parse_judge_reply(f.reply), *f.expected) << f.name;
        } else {
            try {
                parse_judge_reply(f.reply);
                ADD_FAILURE() << f.name << " parsed but should not";
            } catch (const JudgeParseError& e) {
                EXPECT_EQ(e.raw(), f.reply) << f.name;
            }
        }
    }
}

TEST(ParseJudgeReply, SpecExamples) {
    EXPECT_EQ(parse_judge_reply("blah\nScore of the Assistant 1: 7\nScore of the Assistant 2: 9"),
              std::make_pair(Rational(7), Rational(9)));
    EXPECT_EQ(parse_judge_reply("Score of the Assistant 1: 8.5\nScore of the Assistant 2: 8.5"),
              std::make_pair(Rational(17, 2), Rational(17, 2)));
    EXPECT_THROW(parse_judge_reply("Both answers are reasonable and detailed."), JudgeParseError);
}

TEST(ParseJudgeReply, NeverClamps) {
    EXPECT_THROW(parse_judge_reply("Score of the Assistant 1: 10.5\nScore of the Assistant 2: 9"), JudgeParseError);
    EXPECT_THROW(parse_judge_reply("Score of the Assistant 1: 0.99\nScore of the Assistant 2: 9"), JudgeParseError);
    EXPECT_EQ(parse_judge_reply("Score of the Assistant 1: 1.0\nScore of the Assistant 2: 10.0"),
              std::make_pair(Rational(1), Rational(10)));
}

TEST(CombinePasses, SpecExample) {
    PairVerdict a{9, 7, "", PassOrder::teacher_first};
    PairVerdict b{6, 8, "", PassOrder::student_first};
    auto v = combine_passes("r", a, b);
    EXPECT_EQ(v.teacher_score, Rational(17, 2));
    EXPECT_EQ(v.student_score, Rational(13, 2));
    EXPECT_EQ(v.mfd, Rational(2));
}

TEST(CombinePasses, AllTensGiveZero) {
    auto v = combine_passes("r", {10, 10, "", PassOrder::teacher_first}, {10, 10, "", PassOrder::student_first});
    EXPECT_EQ(v.mfd, Rational(0));
}

TEST(CombinePasses, SwapInvariance) {
    Xoshiro256 rng(99);
    auto score = [&] { return Rational(2 + static_cast<std::int64_t>(rng.next_below(19)), 2); };
    for (int i = 0; i < 500; ++i) {
        PairVerdict a{score(), score(), "", PassOrder::teacher_first};
        PairVerdict b{score(), score(), "", PassOrder::student_first};
        auto x = combine_passes("r", a, b);
        auto y = combine_passes("r", b, a);
        ASSERT_EQ(x.teacher_score, y.teacher_score);
        ASSERT_EQ(x.student_score, y.student_score);
        ASSERT_EQ(x.mfd, y.mfd);
    }
}

TEST(ScoreSymmetric, TwoSwappedPasses) {
    Gateway g(scripted_judge(scores(9, 7), scores(6, 8)), std::nullopt);
    auto v = score_symmetric(g, judge_endpoint(), "Explain tides.", "TEACHER answer", "STUDENT answer", "rid");
    ASSERT_FALSE(v.unscored);
    EXPECT_EQ(v.teacher_score, Rational(17, 2));
    EXPECT_EQ(v.student_score, Rational(13, 2));
    EXPECT_EQ(v.mfd, Rational(2));
    ASSERT_EQ(v.passes.size(), 2u);
    EXPECT_EQ(v.passes[0].order, PassOrder::teacher_first);
    EXPECT_EQ(v.passes[1].order, PassOrder::student_first);
    EXPECT_EQ(g.network_calls(), 2u);
}

TEST(ScoreSymmetric, RetriesOnceThenUnscored) {
    // the teacher-first pass never parses
    Gateway g(scripted_judge("I cannot decide.", scores(6, 8)), std::nullopt, fast_retry());
    auto v = score_symmetric(g, judge_endpoint(), "q", "TEACHER", "STUDENT", "rid");
    EXPECT_TRUE(v.unscored);
    EXPECT_FALSE(v.error.empty());
    EXPECT_EQ(g.network_calls(), 3u);
}

TEST(ScoreSymmetric, RetryCanRecover) {
    // replies vary by digest; the retry carries a different cache variant
    std::vector<MockBackend::Rule> rules = {
        {"[The Start of Assistant 1's Answer]\nTEACHER", "Score of the Assistant 1: {{pick:9|x}}\nScore of the Assistant 2: 7", std::nullopt, 0},
        {"[The Start of Assistant 1's Answer]\nSTUDENT", scores(6, 8), std::nullopt, 0},
    };
    int recovered = 0;
    for (int i = 0; i < 20; ++i) {
        Gateway g(std::make_shared<MockBackend>(rules), std::nullopt, fast_retry());
        auto v = score_symmetric(g, judge_endpoint(), "q" + std::to_string(i), "TEACHER", "STUDENT", "rid");
        if (!v.unscored) {
            EXPECT_EQ(v.mfd, Rational(2));
            ++recovered;
        }
    }
    EXPECT_GT(recovered, 0);
}

TEST(ScoreSymmetric, RejectsEmptyInputs) {
    Gateway g(scripted_judge(scores(9, 7), scores(6, 8)), std::nullopt);
    EXPECT_THROW(score_symmetric(g, judge_endpoint(), "q", "TEACHER", " "), ValidationError);
}

TEST(GatherStudent, EchoMockFillsEveryRecord) {
    Corpus c("c");
    c.add(InstructionRecord::make("first"));
    c.add(InstructionRecord::make("second"));
    Gateway g(std::make_shared<MockBackend>(std::vector<MockBackend::Rule>{{"", "{{user}}", std::nullopt, 0}}), std::nullopt);
    auto out = gather_student_responses(g, EndpointSpec::defaults_for(Role::student), c, 4);
    EXPECT_TRUE(out.errors.empty());
    EXPECT_EQ(*out.corpus[0].student_response, "first");
    EXPECT_EQ(*out.corpus[1].student_response, "second");
}

TEST(GatherStudent, KeepsFilledUnlessForced) {
    Corpus c("c");
    auto r = InstructionRecord::make("first");
    r.student_response = "old";
    c.add(r);
    Gateway g(std::make_shared<MockBackend>(std::vector<MockBackend::Rule>{{"", "new", std::nullopt, 0}}), std::nullopt);
    auto out = gather_student_responses(g, EndpointSpec::defaults_for(Role::student), c, 4);
    EXPECT_EQ(*out.corpus[0].student_response, "old");
    EXPECT_EQ(g.network_calls(), 0u);
    auto forced = gather_student_responses(g, EndpointSpec::defaults_for(Role::student), c, 4, true);
    EXPECT_EQ(*forced.corpus[0].student_response, "new");
}

TEST(GatherStudent, FailureLeavesRecordUnfilled) {
    Corpus c("c");
    c.add(InstructionRecord::make("fine"));
    c.add(InstructionRecord::make("broken"));
    Gateway g(std::make_shared<MockBackend>(std::vector<MockBackend::Rule>{{"fine", "ok", std::nullopt, 0}}), std::nullopt);
    auto out = gather_student_responses(g, EndpointSpec::defaults_for(Role::student), c, 4);
    ASSERT_EQ(out.errors.size(), 1u);
    EXPECT_EQ(out.errors[0].record_id, instruction_id("broken"));
    EXPECT_EQ(out.corpus.size(), 2u);
    EXPECT_FALSE(out.corpus[1].student_response.has_value());
    EXPECT_EQ(*out.corpus[0].student_response, "ok");
}

namespace {

MfdVerdict verdict_with(const std::string& id, Rational mfd) {
    MfdVerdict v;
    v.record_id = id;
    v.teacher_score = Rational(10);
    v.student_score = Rational(10) - mfd;
    v.mfd = mfd;
    return v;
}

}  // namespace

TEST(FilterSeed, StrictInequalityAtTwo) {
    Corpus c("c");
    c.add(InstructionRecord::make("a"));
    c.add(InstructionRecord::make("b"));
    std::map<std::string, MfdVerdict> v = {{c[0].id, verdict_with(c[0].id, Rational(5, 2))},
                                           {c[1].id, verdict_with(c[1].id, Rational(2))}};
    auto r = filter_seed(c, v, Rational(2));
    ASSERT_EQ(r.seed.size(), 1u);
    EXPECT_EQ(r.seed[0].id, c[0].id);
    ASSERT_EQ(r.easy.size(), 1u);
    EXPECT_EQ(r.easy[0].id, c[1].id);
}

TEST(FilterSeed, AllZeroGivesEmptySeed) {
    Corpus c("c");
    std::map<std::string, MfdVerdict> v;
    for (int i = 0; i < 5; ++i) {
        c.add(InstructionRecord::make("r" + std::to_string(i)));
        v[c[i].id] = verdict_with(c[i].id, Rational(0));
    }
    auto r = filter_seed(c, v, Rational(2));
    EXPECT_TRUE(r.seed.empty());
    EXPECT_EQ(r.easy.size(), c.size());
}

TEST(FilterSeed, UnscoredGoesToEasyWithFlag) {
    Corpus c("c");
    c.add(InstructionRecord::make("a"));
    std::map<std::string, MfdVerdict> v = {{c[0].id, unscored_verdict(c[0].id, "parse")}};
    v[c[0].id].mfd = Rational(9);  // ignored for unscored verdicts
    auto r = filter_seed(c, v, Rational(2));
    EXPECT_TRUE(r.seed.empty());
    EXPECT_EQ(r.easy.size(), 1u);
    EXPECT_EQ(r.unscored, std::vector<std::string>{c[0].id});
}

TEST(FilterSeed, MissingVerdictIsError) {
    Corpus c("c");
    c.add(InstructionRecord::make("a"));
    EXPECT_THROW(filter_seed(c, {}, Rational(2)), ValidationError);
}

TEST(FilterSeed, MatchesBruteForcePartition) {
    Xoshiro256 rng(3);
    Corpus c("c");
    std::vector<MfdVerdict> verdicts;
    for (int i = 0; i < 300; ++i) {
        c.add(InstructionRecord::make("instruction " + std::to_string(i)));
        verdicts.push_back(verdict_with(c[i].id, Rational(static_cast<std::int64_t>(rng.next_below(37)) - 18, 4)));
    }
    auto r = filter_seed(c, index_verdicts(verdicts), Rational(2));
    std::size_t seen = 0;
    for (const auto& v : verdicts) {
        bool hard = v.mfd > Rational(2);
        EXPECT_EQ(r.seed.contains(v.record_id), hard);
        EXPECT_EQ(r.easy.contains(v.record_id), !hard);
        ++seen;
    }
    EXPECT_EQ(r.seed.size() + r.easy.size(), seen);
}

TEST(Verdicts, RoundTripThroughFile) {
    TempDir dir;
    std::vector<MfdVerdict> vs = {combine_passes("a", {9, 7, "raw a", PassOrder::teacher_first}, {6, 8, "raw b", PassOrder::student_first}),
                                  unscored_verdict("b", "no parse", {{Rational(15, 2), 3, "r", PassOrder::teacher_first}})};
    write_verdicts(vs, dir / "v.jsonl");
    EXPECT_EQ(load_verdicts(dir / "v.jsonl"), vs);
}

TEST(Histogram, SpecExample) {
    std::vector<MfdVerdict> vs;
    for (int m : {0, 0, 2, 3}) vs.push_back(verdict_with("r", Rational(m)));
    auto h = mfd_histogram(vs, Rational(1));
    EXPECT_EQ(*h.zero_share, Rational(1, 2));
    EXPECT_EQ(h.count_at(Rational(0)), 2u);
    EXPECT_EQ(h.count_at(Rational(1)), 0u);
    EXPECT_EQ(h.count_at(Rational(2)), 1u);
    EXPECT_EQ(h.count_at(Rational(3)), 1u);
    EXPECT_EQ(h.total, 4u);
    EXPECT_NE(h.summary().find("zero_share: 0.5"), std::string::npos);
}

TEST(Histogram, SingleZeroAndEmpty) {
    auto one = mfd_histogram({verdict_with("r", Rational(0))}, Rational(1));
    EXPECT_EQ(*one.zero_share, Rational(1));
    auto none = mfd_histogram({}, Rational(1));
    EXPECT_FALSE(none.zero_share.has_value());
    EXPECT_EQ(none.to_json()["zero_share"], "n/a");
    EXPECT_THROW(mfd_histogram({}, Rational(0)), ValidationError);
}

TEST(Histogram, BruteForceRecount) {
    Xoshiro256 rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<MfdVerdict> vs;
        for (int i = 0; i < 200; ++i) vs.push_back(verdict_with("r", Rational(static_cast<std::int64_t>(rng.next_below(37)) - 18, 2)));
        Rational width(1, 1 + static_cast<std::int64_t>(rng.next_below(3)));
        auto h = mfd_histogram(vs, width);
        std::size_t sum = 0;
        for (const auto& b : h.bins) {
            std::size_t brute = 0;
            for (const auto& v : vs) brute += (v.mfd >= b.lo && v.mfd < b.hi);
            EXPECT_EQ(b.count, brute);
            sum += b.count;
        }
        EXPECT_EQ(sum, vs.size());
    }
}
