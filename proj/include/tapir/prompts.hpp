#pragma once

#include <string>
#include <string_view>

#include "tapir/taxonomy.hpp"
#include "tapir/text.hpp"

namespace tapir::prompts {

inline constexpr std::string_view kAssistantSystem = "You are a helpful assistant.";

inline std::string taxonomy_list() {
    std::string out = "[";
    for (std::size_t i = 0; i < kTaskCount; ++i) {
        if (i) out += ", ";
        out += "'" + std::string(kTaxonomy[i]) + "'";
    }
    return out + "]";
}

inline std::string classification(std::string_view instruction) {
    std::string t =
        "Please explain the reason first and classify the task type or domain of #Given Instruction.\n"
        "The task type or domain should be in the list:\n" +
        taxonomy_list() +
        "\n"
        "#Given Instruction#:\n"
        "{instruction}\n"
        "#Task Classification#:";
    return substitute(t, "instruction", instruction);
}

inline std::string expansion(std::string_view task_type, std::string_view instruction) {
    std::string t =
        "I want you to act as an Instruction Creator.\n"
        "Your goal is to draw inspiration from the #Given Instruction# to create a brand new instruction.\n"
        "This new instruction should belong to the task type of [{task_type}] as the #Given Instruction#.\n"
        "The LENGTH and difficulty level of the #Created Instruction# should be similar to that of the #Given Instruction#.\n"
        "The content of the #Created Instruction# should be different from that of the #Given Instruction#.\n"
        "The #Created Instruction# must be reasonable and must be understood and responded to by humans.\n"
        "'#Given Instruction#', '#Created Instruction#', 'given instruction' and 'created instruction' are not "
        "allowed to appear in #Created Instruction#.\n"
        "#Given Instruction#:\n"
        "{instruction}\n"
        "#Created Instruction#:";
    // instruction last, so braces inside it are never treated as placeholders
    return substitute(substitute(t, "task_type", task_type), "instruction", instruction);
}

/// Phrases that must not appear in a created instruction (compared case-insensitively).
inline constexpr std::string_view kForbiddenExpansionPhrases[] = {
    "#Given Instruction#",
    "#Created Instruction#",
    "given instruction",
    "created instruction",
};

inline constexpr std::string_view kCreatedMarker = "#Created Instruction#:";

inline constexpr std::string_view kJudgeSystem =
    "You are a helpful and precise assistant for checking the quality of the answer.";

inline std::string judge(std::string_view instruction, std::string_view answer_1, std::string_view answer_2) {
    std::string out;
    out += "[Instruction]\n";
    out += instruction;
    out += "\n[The Start of Assistant 1's Answer]\n";
    out += answer_1;
    out += "\n[The End of Assistant 1's Answer]\n[The Start of Assistant 2's Answer]\n";
    out += answer_2;
    out +=
        "\n[The End of Assistant 2's Answer]\n"
        "[System]\n"
        "We would like to request your feedback on the performance of two AI assistants in response to the user "
        "instruction and input displayed above.\n"
        "Please rate the helpfulness, relevance, accuracy, and level of detail of their responses. Each assistant "
        "receives an overall score on a scale of 1 to 10, where a higher score indicates better overall performance.\n"
        "Please first provide a comprehensive explanation of your evaluation, avoiding any potential bias and "
        "ensuring that the order in which the responses were presented does not affect your judgment. Then, output "
        "two lines indicating the scores for Assistant 1 and 2, respectively.\n"
        "Output with the following format:\n"
        "Evaluation evidence: <your evaluation explanation here>\n"
        "Score of the Assistant 1: <score>\n"
        "Score of the Assistant 2: <score>";
    return out;
}

/// Generic refinement template; `{task_type}` and `{instruction}` are substituted.
inline constexpr std::string_view kDefaultRefine =
    "Rewrite the instruction to request a clear, step-by-step, well-structured answer; preserve the task and "
    "difficulty.\n"
    "Task type: {task_type}\n"
    "#Given Instruction#:\n"
    "{instruction}\n"
    "#Rewritten Instruction#:";

inline constexpr std::string_view kRewrittenMarker = "#Rewritten Instruction#:";

}  // namespace tapir::prompts
