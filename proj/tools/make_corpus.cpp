// Writes a synthetic instruction corpus for offline runs.

#include <iostream>

#include <CLI11.hpp>

#include "tapir/demo.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Write a synthetic instruction corpus as JSONL", "make_corpus"};
    std::size_t n = 500;
    std::uint64_t seed = 7;
    std::string out;
    app.add_option("--n", n, "Number of instructions");
    app.add_option("--seed", seed, "Generator seed");
    app.add_option("--out", out, "Output path")->required();
    CLI11_PARSE(app, argc, argv);
    try {
        tapir::write_corpus(tapir::demo::synthetic_corpus(n, seed), out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cout << nlohmann::json({{"path", out}, {"records", n}}).dump() << "\n";
    return 0;
}
