#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <string>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "tapir/demo.hpp"
#include "tapir/store.hpp"

namespace testing_support {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("tapir_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    std::filesystem::path path_;
};

/// Writes a synthetic corpus and a mock config into `dir`; returns the config path.
inline std::filesystem::path write_demo_run(const std::filesystem::path& dir, std::size_t records,
                                            const nlohmann::json& extra = nlohmann::json::object()) {
    tapir::write_corpus(tapir::demo::synthetic_corpus(records, 7), dir / "corpus.jsonl");
    nlohmann::json config = {{"corpus", "corpus.jsonl"}, {"run_dir", "run"},   {"cache_dir", "cache"},
                             {"scale", "1/100"},         {"mock", true},        {"rng_seed", 11}};
    for (const auto& [k, v] : extra.items()) config[k] = v;
    auto path = dir / "tapir.json";
    tapir::atomic_write(path, config.dump(2));
    return path;
}

/// Relative path -> contents for every regular file under `root`.
inline std::map<std::string, std::string> snapshot(const std::filesystem::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) out[std::filesystem::relative(e.path(), root).string()] = tapir::read_file(e.path());
    }
    return out;
}

}  // namespace testing_support
