#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "tapir/gateway.hpp"
#include "tapir/prompts.hpp"
#include "tapir/store.hpp"
#include "tapir/taxonomy.hpp"

namespace tapir {

/// Refinement prompt templates: `<Label>.txt` per task, `default.txt` as fallback.
class TemplateRegistry {
public:
    TemplateRegistry() = default;

    static TemplateRegistry load(const fs::path& dir) {
        if (!fs::is_directory(dir)) throw ValidationError("template directory not found: " + dir.string());
        TemplateRegistry reg;
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (!entry.is_regular_file() || entry.path().extension() != ".txt") continue;
            auto stem = entry.path().stem().string();
            auto text = read_file(entry.path());
            if (stem == "default") {
                reg.default_ = std::move(text);
            } else if (auto label = TaskLabel::lookup(stem)) {
                reg.by_task_[*label] = std::move(text);
            } else {
                throw ValidationError("template file does not name a task label: " + entry.path().string());
            }
        }
        return reg;
    }

    const std::string& for_task(std::optional<TaskLabel> task) const {
        if (task) {
            if (auto it = by_task_.find(*task); it != by_task_.end()) return it->second;
        }
        return default_;
    }

private:
    std::string default_{prompts::kDefaultRefine};
    std::map<TaskLabel, std::string> by_task_;
};

struct ExpansionRequest {
    InstructionRecord source;
    TaskLabel task = TaskLabel::others();
    std::size_t count = 1;

    void validate() const {
        if (count < 1) throw ValidationError("expansion count must be at least 1");
        if (trim_copy(source.instruction).empty()) throw ValidationError("expansion source has an empty instruction");
        if (!source.task || *source.task != task) throw ValidationError("expansion task differs from the source label");
    }
};

struct Rejection {
    std::string source_id;
    std::string reason;
    std::string text;
};

struct ExpansionOutcome {
    std::vector<InstructionRecord> records;
    std::vector<Rejection> rejections;
};

/// Text after the final "#Created Instruction#:" marker, else the whole reply.
inline std::string extract_created_instruction(std::string_view reply) {
    if (auto at = reply.rfind(prompts::kCreatedMarker); at != std::string_view::npos) {
        return trim_copy(reply.substr(at + prompts::kCreatedMarker.size()));
    }
    return trim_copy(reply);
}

/// Why a created instruction is unusable, or nullopt when it is fine.
inline std::optional<std::string> reject_reason(std::string_view created, std::string_view source_instruction) {
    auto normalized = normalize_instruction(created);
    if (normalized.empty()) return "empty created instruction";
    std::string lower(normalized);
    for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    for (auto phrase : prompts::kForbiddenExpansionPhrases) {
        std::string p(phrase);
        for (auto& c : p) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        if (contains(lower, p)) return "contains forbidden phrase '" + std::string(phrase) + "'";
    }
    if (normalized == normalize_instruction(source_instruction)) return "identical to the source instruction";
    return std::nullopt;
}

/// Runs every request: `count` teacher calls per request, one retry per
/// rejected sample, then the sample is skipped and reported. `round` tags the
/// new records and keeps samples of different rounds apart in the cache.
inline ExpansionOutcome expand_batch(Gateway& gateway, const EndpointSpec& teacher,
                                     const std::vector<ExpansionRequest>& requests, std::int64_t round,
                                     std::size_t max_in_flight) {
    struct Slot {
        std::size_t req;
        std::size_t sample;
    };
    std::vector<Slot> slots;
    for (std::size_t i = 0; i < requests.size(); ++i) {
        requests[i].validate();
        for (std::size_t j = 0; j < requests[i].count; ++j) slots.push_back({i, j});
    }
    std::vector<std::optional<std::string>> created(slots.size());
    std::vector<Rejection> last_rejection(slots.size());
    std::vector<std::size_t> pending(slots.size());
    for (std::size_t s = 0; s < slots.size(); ++s) pending[s] = s;

    for (int attempt = 0; attempt < 2 && !pending.empty(); ++attempt) {
        std::vector<ChatRequest> batch;
        for (auto s : pending) {
            const auto& req = requests[slots[s].req];
            std::string variant = "round-" + std::to_string(round) + "/sample-" + std::to_string(slots[s].sample);
            if (attempt) variant += "/retry-" + std::to_string(attempt);
            batch.push_back(ChatRequest::make(teacher, std::string(prompts::kAssistantSystem),
                                              prompts::expansion(req.task.name(), req.source.instruction), variant));
        }
        auto replies = gateway.complete_batch(teacher, batch, max_in_flight);
        std::vector<std::size_t> still;
        for (std::size_t k = 0; k < pending.size(); ++k) {
            auto s = pending[k];
            const auto& source = requests[slots[s].req].source;
            if (!replies[k].ok()) {
                last_rejection[s] = {source.id, replies[k].error, ""};
                still.push_back(s);
                continue;
            }
            auto text = extract_created_instruction(*replies[k].text);
            if (auto why = reject_reason(text, source.instruction)) {
                last_rejection[s] = {source.id, *why, text};
                still.push_back(s);
            } else {
                created[s] = std::move(text);
            }
        }
        pending = std::move(still);
    }

    ExpansionOutcome out;
    for (std::size_t s = 0; s < slots.size(); ++s) {
        if (!created[s]) {
            out.rejections.push_back(last_rejection[s]);
            continue;
        }
        const auto& req = requests[slots[s].req];
        auto record = InstructionRecord::make(*created[s], Origin::expanded);
        record.source_id = req.source.id;
        record.task = req.task;
        record.round_introduced = round;
        out.records.push_back(std::move(record));
    }
    return out;
}

inline ExpansionOutcome expand_instruction(Gateway& gateway, const EndpointSpec& teacher, const ExpansionRequest& req,
                                           std::int64_t round = 1) {
    return expand_batch(gateway, teacher, {req}, round, std::max<std::size_t>(1, req.count));
}

struct Refinement {
    std::string text;
    /// Set when the refiner gave nothing usable and the original was kept.
    bool flagged = false;
};

inline ChatRequest refine_request(const EndpointSpec& refiner, const TemplateRegistry& templates,
                                  std::string_view instruction, std::optional<TaskLabel> task) {
    auto prompt = substitute(templates.for_task(task), "task_type", task ? task->name() : std::string_view("Others"));
    return ChatRequest::make(refiner, std::string(prompts::kAssistantSystem), substitute(prompt, "instruction", instruction));
}

inline Refinement to_refinement(const BatchReply& reply, std::string_view original) {
    if (reply.ok()) {
        std::string_view text = *reply.text;
        if (auto at = text.rfind(prompts::kRewrittenMarker); at != std::string_view::npos) {
            text = text.substr(at + prompts::kRewrittenMarker.size());
        }
        auto rewritten = trim_copy(text);
        if (!rewritten.empty()) return {rewritten, false};
    }
    return {std::string(original), true};
}

/// Rewrites an instruction so the teacher answers step by step. The result is
/// only used to prompt the teacher; records keep the original instruction.
inline Refinement refine_instruction(Gateway& gateway, const EndpointSpec& refiner, std::string_view instruction,
                                     std::optional<TaskLabel> task = std::nullopt,
                                     const TemplateRegistry& templates = TemplateRegistry()) {
    if (trim_copy(instruction).empty()) throw ValidationError("cannot refine an empty instruction");
    auto replies = gateway.complete_batch(refiner, {refine_request(refiner, templates, instruction, task)}, 1);
    return to_refinement(replies.front(), instruction);
}

/// Teacher answers for each prompt; an empty or failed completion is retried
/// once, then left as nullopt.
inline std::vector<std::optional<std::string>> generate_responses(Gateway& gateway, const EndpointSpec& teacher,
                                                                  const std::vector<std::string>& instructions,
                                                                  std::size_t max_in_flight) {
    std::vector<std::optional<std::string>> out(instructions.size());
    std::vector<std::size_t> pending(instructions.size());
    for (std::size_t i = 0; i < pending.size(); ++i) pending[i] = i;
    for (int attempt = 0; attempt < 2 && !pending.empty(); ++attempt) {
        std::vector<ChatRequest> batch;
        for (auto i : pending) {
            if (trim_copy(instructions[i]).empty()) throw ValidationError("cannot answer an empty instruction");
            batch.push_back(ChatRequest::make(teacher, std::string(prompts::kAssistantSystem), instructions[i],
                                              attempt ? "retry-" + std::to_string(attempt) : ""));
        }
        auto replies = gateway.complete_batch(teacher, batch, max_in_flight);
        std::vector<std::size_t> still;
        for (std::size_t k = 0; k < pending.size(); ++k) {
            if (replies[k].ok()) {
                out[pending[k]] = *replies[k].text;
            } else {
                still.push_back(pending[k]);
            }
        }
        pending = std::move(still);
    }
    return out;
}

inline std::optional<std::string> generate_response(Gateway& gateway, const EndpointSpec& teacher, std::string_view instruction) {
    return generate_responses(gateway, teacher, {std::string(instruction)}, 1).front();
}

inline double jaccard(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::size_t inter = 0;
    auto i = a.begin();
    auto j = b.begin();
    while (i != a.end() && j != b.end()) {
        if (*i < *j) {
            ++i;
        } else if (*j < *i) {
            ++j;
        } else {
            ++inter;
            ++i;
            ++j;
        }
    }
    const auto uni = a.size() + b.size() - inter;
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct DedupDecision {
    bool kept = true;
    std::string duplicate_of;
    std::string reason;
};

/// Decides survivors in order: exact normalized duplicates first, then any
/// record whose word-trigram Jaccard with an earlier survivor reaches the
/// threshold. Candidate pairs come from a trigram inverted index.
inline std::vector<DedupDecision> dedup_decisions(const std::vector<InstructionRecord>& records, double jaccard_threshold) {
    if (!(jaccard_threshold > 0.0 && jaccard_threshold <= 1.0)) throw ValidationError("jaccard threshold must be in (0, 1]");
    std::vector<DedupDecision> out(records.size());
    std::unordered_map<std::string, std::size_t> seen_text;
    std::unordered_map<std::string, std::vector<std::size_t>> index;
    std::vector<std::vector<std::string>> grams(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        auto normalized = normalize_instruction(records[i].instruction);
        if (auto it = seen_text.find(normalized); it != seen_text.end()) {
            out[i] = {false, records[it->second].id, "exact duplicate"};
            continue;
        }
        grams[i] = word_trigrams(normalized);
        std::unordered_map<std::size_t, std::size_t> shared;
        for (const auto& g : grams[i]) {
            if (auto it = index.find(g); it != index.end()) {
                for (auto k : it->second) ++shared[k];
            }
        }
        std::optional<std::size_t> hit;
        for (const auto& [k, inter] : shared) {
            const auto uni = grams[i].size() + grams[k].size() - inter;
            const double sim = static_cast<double>(inter) / static_cast<double>(uni);
            if (sim >= jaccard_threshold && (!hit || k < *hit)) hit = k;
        }
        if (hit) {
            out[i] = {false, records[*hit].id, "near duplicate"};
            continue;
        }
        seen_text.emplace(std::move(normalized), i);
        for (const auto& g : grams[i]) index[g].push_back(i);
    }
    return out;
}

inline std::vector<InstructionRecord> dedup(const std::vector<InstructionRecord>& records, double jaccard_threshold) {
    auto decisions = dedup_decisions(records, jaccard_threshold);
    std::vector<InstructionRecord> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (decisions[i].kept) out.push_back(records[i]);
    }
    return out;
}

}  // namespace tapir
