#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "tapir/errors.hpp"
#include "tapir/text.hpp"

namespace tapir {

/// The task taxonomy, in the order the classification prompt lists it.
inline constexpr std::array<std::string_view, 32> kTaxonomy = {
    "Math",       "Code Generation", "Writing",       "Computer Science", "Reasoning", "Complex Format",
    "Code Debug", "Common-Sense",    "Counterfactual", "Multilingual",    "Roleplay",  "Biology",
    "Technology", "Ethics",          "Sport",          "Law",             "Medicine",  "Literature",
    "Entertainment", "Art",          "Music",          "Toxicity",        "Economy",   "Physics",
    "History",    "Chemistry",       "Philosophy",     "Health",          "Ecology",   "Grammar",
    "Paraphrase", "Others",
};

inline constexpr std::size_t kTaskCount = kTaxonomy.size();

/// One member of the taxonomy, stored as its index.
class TaskLabel {
public:
    static std::optional<TaskLabel> lookup(std::string_view name) {
        auto trimmed = trim_copy(name);
        for (std::size_t i = 0; i < kTaskCount; ++i) {
            if (kTaxonomy[i] == trimmed) return TaskLabel(static_cast<std::uint8_t>(i));
        }
        return std::nullopt;
    }

    static TaskLabel parse(std::string_view name) {
        if (auto label = lookup(name)) return *label;
        throw ValidationError("unknown task label '" + std::string(name) + "'");
    }

    static TaskLabel at(std::size_t index) {
        if (index >= kTaskCount) throw ValidationError("task index out of range");
        return TaskLabel(static_cast<std::uint8_t>(index));
    }

    static TaskLabel others() { return TaskLabel(static_cast<std::uint8_t>(kTaskCount - 1)); }

    std::size_t index() const noexcept { return index_; }
    std::string_view name() const noexcept { return kTaxonomy[index_]; }

    friend bool operator==(TaskLabel, TaskLabel) = default;
    friend auto operator<=>(TaskLabel, TaskLabel) = default;

private:
    explicit TaskLabel(std::uint8_t index) : index_(index) {}
    std::uint8_t index_;
};

}  // namespace tapir
