#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tapir/gateway.hpp"
#include "tapir/prompts.hpp"
#include "tapir/random.hpp"
#include "tapir/store.hpp"
#include "tapir/taxonomy.hpp"

namespace tapir {

inline constexpr double kDistributionTolerance = 1e-9;

/// Probability over the whole taxonomy, indexed by TaskLabel::index().
class TaskDistribution {
public:
    TaskDistribution() { weights_.fill(0.0); }

    double operator[](TaskLabel label) const noexcept { return weights_[label.index()]; }
    const std::array<double, kTaskCount>& weights() const noexcept { return weights_; }

    static TaskDistribution from_weights(const std::array<double, kTaskCount>& weights) {
        TaskDistribution d;
        d.weights_ = weights;
        d.validate();
        return d;
    }

    double sum() const noexcept {
        double s = 0.0;
        for (double w : weights_) s += w;
        return s;
    }

    void validate() const {
        for (std::size_t i = 0; i < kTaskCount; ++i) {
            if (!(weights_[i] >= 0.0) || !std::isfinite(weights_[i])) {
                throw ValidationError("negative or non-finite weight for " + std::string(kTaxonomy[i]));
            }
        }
        if (std::abs(sum() - 1.0) > kDistributionTolerance) throw ValidationError("task distribution does not sum to 1");
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j = nlohmann::ordered_json::object();
        for (std::size_t i = 0; i < kTaskCount; ++i) j[std::string(kTaxonomy[i])] = weights_[i];
        return j;
    }

private:
    std::array<double, kTaskCount> weights_{};
};

using DistributionOverrides = std::map<TaskLabel, double>;

/// Default: Math and Reasoning 0.167, Code Generation and Code Debug 0.083,
/// the other 28 labels share the remaining half equally. Overridden labels
/// take their given weight; the others are rescaled in proportion to their
/// defaults so the total stays 1.
inline TaskDistribution target_distribution(const DistributionOverrides& overrides = {}) {
    std::array<double, kTaskCount> defaults{};
    const std::map<std::string_view, double> emphasized = {
        {"Math", 0.167}, {"Reasoning", 0.167}, {"Code Generation", 0.083}, {"Code Debug", 0.083}};
    double emphasized_total = 0.0;
    for (const auto& [name, w] : emphasized) emphasized_total += w;
    const double rest = (1.0 - emphasized_total) / static_cast<double>(kTaskCount - emphasized.size());
    for (std::size_t i = 0; i < kTaskCount; ++i) {
        auto it = emphasized.find(kTaxonomy[i]);
        defaults[i] = it != emphasized.end() ? it->second : rest;
    }
    if (overrides.empty()) return TaskDistribution::from_weights(defaults);

    double fixed = 0.0;
    for (const auto& [label, w] : overrides) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError("override for " + std::string(label.name()) + " is negative");
        fixed += w;
    }
    if (fixed > 1.0 + kDistributionTolerance) throw ValidationError("overrides sum above 1");

    double free_default = 0.0;
    for (std::size_t i = 0; i < kTaskCount; ++i) {
        if (!overrides.count(TaskLabel::at(i))) free_default += defaults[i];
    }
    std::array<double, kTaskCount> weights{};
    const double residual = std::max(0.0, 1.0 - fixed);
    for (std::size_t i = 0; i < kTaskCount; ++i) {
        auto label = TaskLabel::at(i);
        if (auto it = overrides.find(label); it != overrides.end()) {
            weights[i] = it->second;
        } else {
            weights[i] = free_default > 0.0 ? defaults[i] * residual / free_default : 0.0;
        }
    }
    if (free_default == 0.0 && std::abs(fixed - 1.0) > kDistributionTolerance) {
        throw ValidationError("overrides cover every label but do not sum to 1");
    }
    return TaskDistribution::from_weights(weights);
}

/// Reads a JSON map label -> weight and applies it as overrides.
inline DistributionOverrides overrides_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("distribution must be a JSON object of label -> weight");
    DistributionOverrides out;
    for (const auto& [name, value] : j.items()) {
        if (!value.is_number()) throw ValidationError("weight for " + name + " is not a number");
        out[TaskLabel::parse(name)] = value.get<double>();
    }
    return out;
}

/// Parses "Label=weight".
inline std::pair<TaskLabel, double> parse_override(std::string_view text) {
    auto eq = text.rfind('=');
    if (eq == std::string_view::npos) throw ValidationError("override must be label=weight: " + std::string(text));
    auto label = TaskLabel::parse(text.substr(0, eq));
    try {
        return {label, std::stod(std::string(text.substr(eq + 1)))};
    } catch (const std::exception&) {
        throw ValidationError("bad weight in override: " + std::string(text));
    }
}

namespace detail {

inline bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

inline std::string ascii_lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

/// Last whole-word taxonomy mention in `text`; ties at one position go to the
/// longer label.
inline std::optional<TaskLabel> last_label_mention(std::string_view text) {
    std::optional<TaskLabel> best;
    std::size_t best_pos = 0;
    std::size_t best_len = 0;
    for (std::size_t i = 0; i < kTaskCount; ++i) {
        const auto name = kTaxonomy[i];
        for (auto pos = text.find(name); pos != std::string_view::npos; pos = text.find(name, pos + 1)) {
            bool left_ok = pos == 0 || !is_word_char(text[pos - 1]);
            auto end = pos + name.size();
            bool right_ok = end == text.size() || !is_word_char(text[end]);
            if (!left_ok || !right_ok) continue;
            if (!best || pos > best_pos || (pos == best_pos && name.size() > best_len)) {
                best = TaskLabel::at(i);
                best_pos = pos;
                best_len = name.size();
            }
        }
    }
    return best;
}

}  // namespace detail

/// The label a classification reply settles on: the last taxonomy label after
/// the final "classification" marker, else anywhere in the reply.
inline std::optional<TaskLabel> parse_classification(std::string_view reply) {
    auto lower = detail::ascii_lower(reply);
    if (auto marker = lower.rfind("classification"); marker != std::string::npos) {
        if (auto label = detail::last_label_mention(reply.substr(marker))) return label;
    }
    return detail::last_label_mention(reply);
}

struct Classification {
    TaskLabel label = TaskLabel::others();
    /// Set when no label could be extracted and Others was assigned.
    bool flagged = false;
    std::string error;
};

/// Classifies one instruction. An unparseable reply is retried once with a
/// fresh sample, then falls back to Others with the flag set.
inline Classification classify(Gateway& gateway, const EndpointSpec& classifier, std::string_view instruction) {
    if (trim_copy(instruction).empty()) throw ValidationError("cannot classify an empty instruction");
    Classification out;
    for (int attempt = 0; attempt < 2; ++attempt) {
        auto request = ChatRequest::make(classifier, std::string(prompts::kAssistantSystem),
                                         prompts::classification(instruction), attempt ? "retry-1" : "");
        try {
            if (auto label = parse_classification(gateway.complete(classifier, request))) {
                out.label = *label;
                return out;
            }
        } catch (const ValidationError&) {
            throw;
        } catch (const std::exception& e) {
            out.error = e.what();
        }
    }
    out.flagged = true;
    return out;
}

/// Batch form; classifications align with `instructions`.
inline std::vector<Classification> classify_batch(Gateway& gateway, const EndpointSpec& classifier,
                                                  const std::vector<std::string>& instructions, std::size_t max_in_flight) {
    std::vector<ChatRequest> first;
    first.reserve(instructions.size());
    for (const auto& ins : instructions) {
        first.push_back(ChatRequest::make(classifier, std::string(prompts::kAssistantSystem), prompts::classification(ins)));
    }
    auto replies = gateway.complete_batch(classifier, first, max_in_flight);
    std::vector<Classification> out(instructions.size());
    std::vector<std::size_t> retry_idx;
    std::vector<ChatRequest> retry;
    for (std::size_t i = 0; i < replies.size(); ++i) {
        std::optional<TaskLabel> label;
        if (replies[i].ok()) label = parse_classification(*replies[i].text);
        if (label) {
            out[i].label = *label;
        } else {
            out[i].error = replies[i].error;
            retry_idx.push_back(i);
            retry.push_back(ChatRequest::make(classifier, std::string(prompts::kAssistantSystem),
                                              prompts::classification(instructions[i]), "retry-1"));
        }
    }
    auto second = gateway.complete_batch(classifier, retry, max_in_flight);
    for (std::size_t k = 0; k < retry_idx.size(); ++k) {
        auto& slot = out[retry_idx[k]];
        std::optional<TaskLabel> label;
        if (second[k].ok()) label = parse_classification(*second[k].text);
        if (label) {
            slot.label = *label;
            slot.error.clear();
        } else {
            slot.flagged = true;
            if (!second[k].ok()) slot.error = second[k].error;
        }
    }
    return out;
}

/// Draws `n` record ids with replacement: a label from `dist` restricted to
/// labels that have records, then a record uniformly within that label.
inline std::vector<std::string> stratified_sample(const Corpus& pool, const TaskDistribution& dist, std::size_t n,
                                                  std::uint64_t seed) {
    std::vector<std::string> out;
    if (n == 0) return out;
    if (pool.empty()) throw ValidationError("cannot sample from empty pool '" + pool.name() + "'");
    std::array<std::vector<std::size_t>, kTaskCount> buckets;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        const auto& r = pool[i];
        if (!r.task) throw ValidationError("record " + r.id + " in pool '" + pool.name() + "' has no task label");
        buckets[r.task->index()].push_back(i);
    }
    std::array<double, kTaskCount> cumulative{};
    double total = 0.0;
    std::size_t last_eligible = kTaskCount;
    for (std::size_t l = 0; l < kTaskCount; ++l) {
        if (!buckets[l].empty() && dist.weights()[l] > 0.0) {
            total += dist.weights()[l];
            last_eligible = l;
        }
        cumulative[l] = total;
    }
    if (last_eligible == kTaskCount) {
        throw ValidationError("no positive-weight task has records in pool '" + pool.name() + "'");
    }
    Xoshiro256 rng(seed);
    out.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        const double u = rng.next_unit() * total;
        std::size_t label = last_eligible;
        for (std::size_t l = 0; l < kTaskCount; ++l) {
            if (u < cumulative[l] && !buckets[l].empty() && dist.weights()[l] > 0.0) {
                label = l;
                break;
            }
        }
        const auto& bucket = buckets[label];
        out.push_back(pool[bucket[rng.next_below(bucket.size())]].id);
    }
    return out;
}

/// Renormalized target restricted to labels present in `pool`.
inline std::array<double, kTaskCount> effective_distribution(const Corpus& pool, const TaskDistribution& dist) {
    std::array<bool, kTaskCount> present{};
    for (const auto& r : pool) {
        if (r.task) present[r.task->index()] = true;
    }
    std::array<double, kTaskCount> out{};
    double total = 0.0;
    for (std::size_t l = 0; l < kTaskCount; ++l) {
        if (present[l]) total += dist.weights()[l];
    }
    for (std::size_t l = 0; l < kTaskCount; ++l) out[l] = present[l] && total > 0 ? dist.weights()[l] / total : 0.0;
    return out;
}

}  // namespace tapir
