#pragma once

#include <cctype>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tapir/gateway.hpp"
#include "tapir/prompts.hpp"
#include "tapir/rational.hpp"
#include "tapir/store.hpp"

namespace tapir {

inline const Rational kMinScore{1};
inline const Rational kMaxScore{10};

namespace detail {

/// Score on the last line carrying `marker`, or nullopt when no such line has a number.
inline std::optional<std::string> score_token(std::string_view reply, std::string_view marker) {
    std::optional<std::string> found;
    std::size_t start = 0;
    while (start <= reply.size()) {
        auto end = reply.find('\n', start);
        auto line = reply.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
        std::string lower(line);
        for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        if (auto at = lower.rfind(marker); at != std::string::npos) {
            auto rest = line.substr(at + marker.size());
            std::size_t i = 0;
            while (i < rest.size() && (std::isspace(static_cast<unsigned char>(rest[i])) || rest[i] == '*')) ++i;
            std::size_t j = i;
            if (j < rest.size() && (rest[j] == '-' || rest[j] == '+')) ++j;
            std::size_t digits_start = j;
            while (j < rest.size() && std::isdigit(static_cast<unsigned char>(rest[j]))) ++j;
            if (j < rest.size() && rest[j] == '.' && j + 1 < rest.size() && std::isdigit(static_cast<unsigned char>(rest[j + 1]))) {
                ++j;
                while (j < rest.size() && std::isdigit(static_cast<unsigned char>(rest[j]))) ++j;
            }
            found = j > digits_start ? std::optional<std::string>(std::string(rest.substr(i, j - i))) : std::nullopt;
        }
        if (end == std::string_view::npos) break;
        start = end + 1;
    }
    return found;
}

}  // namespace detail

/// Reads "Score of the Assistant 1: x" and "... 2: y" from a judge reply.
/// Lines may come in any order; the last occurrence of each wins. Scores must
/// lie in [1, 10] and are never clamped.
inline std::pair<Rational, Rational> parse_judge_reply(std::string_view reply) {
    std::pair<Rational, Rational> out;
    for (int k = 1; k <= 2; ++k) {
        const std::string marker = "score of the assistant " + std::to_string(k) + ":";
        auto token = detail::score_token(reply, marker);
        if (!token) throw JudgeParseError("missing score for Assistant " + std::to_string(k), std::string(reply));
        Rational score = Rational::parse(*token);
        if (score < kMinScore || score > kMaxScore) {
            throw JudgeParseError("score " + *token + " for Assistant " + std::to_string(k) + " outside [1, 10]",
                                  std::string(reply));
        }
        (k == 1 ? out.first : out.second) = score;
    }
    return out;
}

enum class PassOrder { teacher_first, student_first };

inline std::string_view to_string(PassOrder o) { return o == PassOrder::teacher_first ? "teacher_first" : "student_first"; }

inline PassOrder parse_pass_order(std::string_view s) {
    if (s == "teacher_first") return PassOrder::teacher_first;
    if (s == "student_first") return PassOrder::student_first;
    throw ValidationError("unknown pass order '" + std::string(s) + "'");
}

struct PairVerdict {
    Rational score_first;
    Rational score_second;
    std::string raw_reply;
    PassOrder order = PassOrder::teacher_first;

    Rational teacher() const { return order == PassOrder::teacher_first ? score_first : score_second; }
    Rational student() const { return order == PassOrder::teacher_first ? score_second : score_first; }

    friend bool operator==(const PairVerdict&, const PairVerdict&) = default;
};

struct MfdVerdict {
    std::string record_id;
    Rational teacher_score;
    Rational student_score;
    /// teacher_score - student_score; positive when the student trails.
    Rational mfd;
    std::vector<PairVerdict> passes;
    bool unscored = false;
    std::string error;

    friend bool operator==(const MfdVerdict&, const MfdVerdict&) = default;
};

/// Averages two order-swapped passes into one verdict.
inline MfdVerdict combine_passes(std::string record_id, PairVerdict a, PairVerdict b) {
    MfdVerdict v;
    v.record_id = std::move(record_id);
    v.teacher_score = (a.teacher() + b.teacher()) / Rational(2);
    v.student_score = (a.student() + b.student()) / Rational(2);
    v.mfd = v.teacher_score - v.student_score;
    v.passes = {std::move(a), std::move(b)};
    return v;
}

inline MfdVerdict unscored_verdict(std::string record_id, std::string error, std::vector<PairVerdict> passes = {}) {
    MfdVerdict v;
    v.record_id = std::move(record_id);
    v.unscored = true;
    v.error = std::move(error);
    v.passes = std::move(passes);
    return v;
}

inline ChatRequest judge_request(const EndpointSpec& judge, std::string_view instruction, std::string_view teacher,
                                 std::string_view student, PassOrder order, int attempt) {
    auto user = order == PassOrder::teacher_first ? prompts::judge(instruction, teacher, student)
                                                  : prompts::judge(instruction, student, teacher);
    return ChatRequest::make(judge, std::string(prompts::kJudgeSystem), std::move(user),
                             attempt ? "retry-" + std::to_string(attempt) : "");
}

namespace detail {

struct JudgeJob {
    std::string record_id;
    std::string instruction;
    std::string teacher;
    std::string student;
};

/// Parses each reply; failures come back as nullopt with the error recorded.
inline std::optional<PairVerdict> to_pass(const BatchReply& reply, PassOrder order, std::string& error) {
    if (!reply.ok()) {
        error = reply.error;
        return std::nullopt;
    }
    try {
        auto [first, second] = parse_judge_reply(*reply.text);
        return PairVerdict{first, second, *reply.text, order};
    } catch (const JudgeParseError& e) {
        error = e.what();
        return std::nullopt;
    }
}

inline std::vector<MfdVerdict> judge_jobs(Gateway& gateway, const EndpointSpec& judge, const std::vector<JudgeJob>& jobs,
                                          std::size_t max_in_flight) {
    constexpr PassOrder orders[2] = {PassOrder::teacher_first, PassOrder::student_first};
    std::vector<std::optional<PairVerdict>> passes(jobs.size() * 2);
    std::vector<std::string> errors(jobs.size() * 2);
    std::vector<std::string> raw_failed(jobs.size() * 2);

    for (int attempt = 0; attempt < 2; ++attempt) {
        std::vector<std::size_t> slots;
        std::vector<ChatRequest> requests;
        for (std::size_t s = 0; s < passes.size(); ++s) {
            if (passes[s]) continue;
            const auto& job = jobs[s / 2];
            slots.push_back(s);
            requests.push_back(judge_request(judge, job.instruction, job.teacher, job.student, orders[s % 2], attempt));
        }
        if (requests.empty()) break;
        auto replies = gateway.complete_batch(judge, requests, max_in_flight);
        for (std::size_t k = 0; k < slots.size(); ++k) {
            passes[slots[k]] = to_pass(replies[k], orders[slots[k] % 2], errors[slots[k]]);
        }
    }

    std::vector<MfdVerdict> out;
    out.reserve(jobs.size());
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        auto& a = passes[2 * i];
        auto& b = passes[2 * i + 1];
        if (a && b) {
            out.push_back(combine_passes(jobs[i].record_id, std::move(*a), std::move(*b)));
        } else {
            std::vector<PairVerdict> kept;
            if (a) kept.push_back(*a);
            if (b) kept.push_back(*b);
            out.push_back(unscored_verdict(jobs[i].record_id, a ? errors[2 * i + 1] : errors[2 * i], std::move(kept)));
        }
    }
    return out;
}

}  // namespace detail

/// Judges teacher against student twice, swapping presentation order, and
/// averages. A pass that fails to parse is retried once; if either pass still
/// fails the verdict is unscored.
inline MfdVerdict score_symmetric(Gateway& gateway, const EndpointSpec& judge, std::string_view instruction,
                                  std::string_view teacher_response, std::string_view student_response,
                                  std::string record_id = {}) {
    if (trim_copy(instruction).empty() || trim_copy(teacher_response).empty() || trim_copy(student_response).empty()) {
        throw ValidationError("symmetric scoring needs a non-empty instruction and both responses");
    }
    std::vector<detail::JudgeJob> jobs = {
        {std::move(record_id), std::string(instruction), std::string(teacher_response), std::string(student_response)}};
    return detail::judge_jobs(gateway, judge, jobs, 2).front();
}

/// Scores every record of `corpus`. Records missing a teacher or student
/// response are returned unscored without any judge call.
inline std::vector<MfdVerdict> score_corpus(Gateway& gateway, const EndpointSpec& judge, const Corpus& corpus,
                                            std::size_t max_in_flight) {
    std::vector<detail::JudgeJob> jobs;
    std::vector<std::optional<MfdVerdict>> out(corpus.size());
    std::vector<std::size_t> job_slot;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& r = corpus[i];
        if (!r.has_response()) {
            out[i] = unscored_verdict(r.id, "no teacher response");
        } else if (!r.student_response || trim_copy(*r.student_response).empty()) {
            out[i] = unscored_verdict(r.id, "no student response");
        } else {
            job_slot.push_back(i);
            jobs.push_back({r.id, r.instruction, *r.response, *r.student_response});
        }
    }
    auto verdicts = detail::judge_jobs(gateway, judge, jobs, max_in_flight);
    for (std::size_t k = 0; k < verdicts.size(); ++k) out[job_slot[k]] = std::move(verdicts[k]);
    std::vector<MfdVerdict> result;
    result.reserve(out.size());
    for (auto& v : out) result.push_back(std::move(*v));
    return result;
}

struct RecordError {
    std::string record_id;
    std::string error;
};

struct GatherResult {
    Corpus corpus;
    std::vector<RecordError> errors;
};

/// Fills student_response for every record with the student's answer. Filled
/// records are kept unless `force`; failures leave the record unfilled.
inline GatherResult gather_student_responses(Gateway& gateway, const EndpointSpec& student, const Corpus& corpus,
                                             std::size_t max_in_flight, bool force = false) {
    std::vector<std::size_t> todo;
    std::vector<ChatRequest> requests;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& r = corpus[i];
        if (trim_copy(r.instruction).empty()) throw ValidationError("record " + r.id + " has an empty instruction");
        if (!force && r.student_response && !r.student_response->empty()) continue;
        todo.push_back(i);
        requests.push_back(ChatRequest::make(student, std::string(prompts::kAssistantSystem), r.instruction));
    }
    auto replies = gateway.complete_batch(student, requests, max_in_flight);
    GatherResult out{Corpus(corpus.name()), {}};
    std::map<std::size_t, const BatchReply*> by_index;
    for (std::size_t k = 0; k < todo.size(); ++k) by_index[todo[k]] = &replies[k];
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        auto record = corpus[i];
        if (auto it = by_index.find(i); it != by_index.end()) {
            if (it->second->ok()) {
                record.student_response = *it->second->text;
            } else {
                if (force) record.student_response.reset();
                out.errors.push_back({record.id, it->second->error});
            }
        }
        out.corpus.add(std::move(record));
    }
    return out;
}

struct FilterResult {
    Corpus seed;
    Corpus easy;
    /// Ids routed to easy because their verdict is unscored.
    std::vector<std::string> unscored;
};

/// Seed = records with mfd strictly above `delta`; everything else goes to easy.
inline FilterResult filter_seed(const Corpus& corpus, const std::map<std::string, MfdVerdict>& verdicts,
                                const Rational& delta) {
    FilterResult out{Corpus("seed"), Corpus("easy"), {}};
    for (const auto& r : corpus) {
        auto it = verdicts.find(r.id);
        if (it == verdicts.end()) throw ValidationError("record " + r.id + " has no verdict");
        const auto& v = it->second;
        if (v.unscored) {
            out.unscored.push_back(r.id);
            out.easy.add(r);
        } else if (v.mfd > delta) {
            out.seed.add(r);
        } else {
            out.easy.add(r);
        }
    }
    return out;
}

inline std::map<std::string, MfdVerdict> index_verdicts(const std::vector<MfdVerdict>& verdicts) {
    std::map<std::string, MfdVerdict> out;
    for (const auto& v : verdicts) out[v.record_id] = v;
    return out;
}

// verdict cache (JSONL, one MfdVerdict per line)

inline nlohmann::ordered_json verdict_to_json(const MfdVerdict& v) {
    nlohmann::ordered_json j;
    j["record_id"] = v.record_id;
    j["unscored"] = v.unscored;
    if (!v.unscored) {
        j["teacher_score"] = nlohmann::json(v.teacher_score);
        j["student_score"] = nlohmann::json(v.student_score);
        j["mfd"] = nlohmann::json(v.mfd);
    }
    auto passes = nlohmann::ordered_json::array();
    for (const auto& p : v.passes) {
        nlohmann::ordered_json pj;
        pj["order"] = std::string(to_string(p.order));
        pj["score_first"] = nlohmann::json(p.score_first);
        pj["score_second"] = nlohmann::json(p.score_second);
        pj["raw_reply"] = p.raw_reply;
        passes.push_back(std::move(pj));
    }
    j["passes"] = std::move(passes);
    if (!v.error.empty()) j["error"] = v.error;
    return j;
}

inline MfdVerdict verdict_from_json(const nlohmann::json& j) {
    MfdVerdict v;
    v.record_id = j.at("record_id").get<std::string>();
    v.unscored = j.value("unscored", false);
    if (!v.unscored) {
        v.teacher_score = j.at("teacher_score").get<Rational>();
        v.student_score = j.at("student_score").get<Rational>();
        v.mfd = j.at("mfd").get<Rational>();
    }
    for (const auto& pj : j.at("passes")) {
        PairVerdict p;
        p.order = parse_pass_order(pj.at("order").get<std::string>());
        p.score_first = pj.at("score_first").get<Rational>();
        p.score_second = pj.at("score_second").get<Rational>();
        p.raw_reply = pj.at("raw_reply").get<std::string>();
        v.passes.push_back(std::move(p));
    }
    v.error = j.value("error", std::string());
    return v;
}

inline void write_verdicts(const std::vector<MfdVerdict>& verdicts, const fs::path& path) {
    std::string out;
    for (const auto& v : verdicts) {
        out += verdict_to_json(v).dump();
        out.push_back('\n');
    }
    atomic_write(path, out);
}

inline std::vector<MfdVerdict> load_verdicts(const fs::path& path) {
    std::vector<MfdVerdict> out;
    for_each_jsonl(path, [&](std::size_t lineno, const nlohmann::json& j) {
        try {
            out.push_back(verdict_from_json(j));
        } catch (const std::exception& e) {
            throw FormatError(path.string(), lineno, e.what());
        }
    });
    return out;
}

struct HistogramBin {
    Rational lo;
    Rational hi;
    std::size_t count = 0;
};

struct Histogram {
    Rational bin_width{1};
    std::size_t total = 0;
    /// Share of verdicts with mfd exactly 0; empty when there are no verdicts.
    std::optional<Rational> zero_share;
    /// Contiguous half-open bins [lo, hi) from the lowest to the highest occupied one.
    std::vector<HistogramBin> bins;

    std::size_t count_at(const Rational& lo) const {
        for (const auto& b : bins) {
            if (b.lo == lo) return b.count;
        }
        return 0;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["bin_width"] = nlohmann::json(bin_width);
        j["total"] = total;
        j["zero_share"] = zero_share ? nlohmann::ordered_json(zero_share->to_double()) : nlohmann::ordered_json("n/a");
        auto arr = nlohmann::ordered_json::array();
        for (const auto& b : bins) {
            nlohmann::ordered_json bj;
            bj["lo"] = nlohmann::json(b.lo);
            bj["hi"] = nlohmann::json(b.hi);
            bj["count"] = b.count;
            arr.push_back(std::move(bj));
        }
        j["bins"] = std::move(arr);
        return j;
    }

    std::string summary() const {
        std::string out = "zero_share: " + (zero_share ? std::to_string(zero_share->to_double()) : std::string("n/a")) + "\n";
        out += "total: " + std::to_string(total) + "\n";
        for (const auto& b : bins) {
            out += "[" + b.lo.to_string() + ", " + b.hi.to_string() + "): " + std::to_string(b.count) + "\n";
        }
        return out;
    }
};

/// Counts scored verdicts per bin of width `bin_width`; unscored ones are skipped.
inline Histogram mfd_histogram(const std::vector<MfdVerdict>& verdicts, const Rational& bin_width) {
    if (bin_width <= Rational(0)) throw ValidationError("bin_width must be positive");
    Histogram h;
    h.bin_width = bin_width;
    std::map<std::int64_t, std::size_t> counts;
    std::size_t zeros = 0;
    for (const auto& v : verdicts) {
        if (v.unscored) continue;
        ++h.total;
        if (v.mfd == Rational(0)) ++zeros;
        ++counts[(v.mfd / bin_width).floor()];
    }
    if (h.total == 0) return h;
    h.zero_share = Rational(static_cast<std::int64_t>(zeros), static_cast<std::int64_t>(h.total));
    for (auto k = counts.begin()->first; k <= counts.rbegin()->first; ++k) {
        auto it = counts.find(k);
        h.bins.push_back({bin_width * Rational(k), bin_width * Rational(k + 1), it == counts.end() ? 0 : it->second});
    }
    return h;
}

}  // namespace tapir
