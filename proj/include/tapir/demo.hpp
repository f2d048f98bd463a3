#pragma once

#include <string>
#include <vector>

#include "tapir/gateway.hpp"
#include "tapir/random.hpp"
#include "tapir/store.hpp"

// Offline fixtures: a synthetic instruction corpus and the default mock rules
// that let the whole pipeline run without a live endpoint.

namespace tapir::demo {

/// `n` distinct instructions across a spread of task styles, deterministic in `seed`.
inline Corpus synthetic_corpus(std::size_t n, std::uint64_t seed = 7) {
    static const std::vector<std::string> shapes = {
        "Solve the equation {a}x + {b} = {c} and show the value of x.",
        "A train travels {a} km in {b} hours. Compute its average speed and explain the units.",
        "Write a Python function that returns the sum of the first {a} prime numbers greater than {b}.",
        "Find the bug in this loop: for i in range({a}): total += i / (i - {b}). Explain the fix.",
        "Five runners finish a race; runner {a} beats runner {b} but loses to runner {c}. Who could be second?",
        "Write a short poem of {a} lines about a lighthouse seen from {b} miles away.",
        "Summarize the causes of the event that happened in the year {a}{b} in two sentences.",
        "Explain how a cell uses {a} molecules of glucose in aerobic respiration, step {b} onward.",
        "Describe the physics of a pendulum with length {a} cm swinging at an angle of {b} degrees.",
        "Translate the phrase number {a}-{b} 'good morning, friend' into French and Spanish.",
        "Give {a} tips for improving sleep quality for someone who works {b} night shifts a week.",
        "Role-play a shopkeeper greeting customer number {a} who wants {b} apples.",
    };
    Xoshiro256 rng(seed);
    Corpus corpus("synthetic");
    std::size_t attempt = 0;
    while (corpus.size() < n) {
        const auto& shape = shapes[rng.next_below(shapes.size())];
        auto text = substitute(shape, "a", std::to_string(2 + rng.next_below(97)));
        text = substitute(text, "b", std::to_string(1 + rng.next_below(59)));
        text = substitute(text, "c", std::to_string(3 + rng.next_below(211)));
        auto record = InstructionRecord::make(text);
        if (!corpus.contains(record.id)) corpus.add(std::move(record));
        if (++attempt > n * 100) throw Error("could not draw enough distinct synthetic instructions");
    }
    return corpus;
}

/// Rules covering every prompt the pipeline issues. Judge scores, task labels
/// and created instructions vary with the request digest.
inline std::vector<MockBackend::Rule> default_mock_rules() {
    return {
        {"[The Start of Assistant 1's Answer]",
         "Evaluation evidence: mock review {{digest8}}.\n"
         "Score of the Assistant 1: {{int:3-10}}\n"
         "Score of the Assistant 2: {{int:3-10}}",
         std::nullopt, 0},
        {"#Task Classification#:",
         "The instruction is best described by one domain.\n"
         "#Task Classification#: {{pick:Math|Reasoning|Code Generation|Code Debug|Writing|Common-Sense|History|"
         "Biology|Physics|Roleplay|Multilingual|Health}}",
         std::nullopt, 0},
        {"act as an Instruction Creator",
         "#Created Instruction#:\n"
         "Describe scenario {{digest8}} and explain how the {{pick:tide|market|engine|poem|proof|circuit|orbit}} "
         "responds when the {{pick:input|pressure|price|rhythm|premise|current|mass}} is doubled.",
         std::nullopt, 0},
        {"#Rewritten Instruction#:",
         "#Rewritten Instruction#:\n{{given}}\nPlease think step by step and explain your reasoning clearly.",
         std::nullopt, 0},
        {"", "Student answer {{digest8}}: a brief reply.", std::string("student"), 0},
        {"",
         "Teacher answer {{digest8}}:\nStep 1: restate the problem.\nStep 2: work through it.\n"
         "Therefore, the answer follows.",
         std::nullopt, 0},
    };
}

}  // namespace tapir::demo
