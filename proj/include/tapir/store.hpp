#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "tapir/errors.hpp"
#include "tapir/rational.hpp"
#include "tapir/taxonomy.hpp"
#include "tapir/text.hpp"

namespace tapir {

namespace fs = std::filesystem;

enum class Origin { seed, expanded, rewritten };

inline std::string_view to_string(Origin o) {
    switch (o) {
        case Origin::seed: return "seed";
        case Origin::expanded: return "expanded";
        case Origin::rewritten: return "rewritten";
    }
    return "seed";
}

inline Origin parse_origin(std::string_view s) {
    if (s == "seed") return Origin::seed;
    if (s == "expanded") return Origin::expanded;
    if (s == "rewritten") return Origin::rewritten;
    throw ValidationError("unknown origin '" + std::string(s) + "'");
}

struct InstructionRecord {
    std::string id;
    std::string instruction;
    std::optional<std::string> response;
    std::optional<std::string> student_response;
    std::optional<TaskLabel> task;
    Origin origin = Origin::seed;
    std::optional<std::string> source_id;
    std::int64_t round_introduced = 0;

    /// Builds a record whose id is the digest of the normalized instruction.
    static InstructionRecord make(std::string instruction, Origin origin = Origin::seed) {
        InstructionRecord r;
        r.id = instruction_id(instruction);
        r.instruction = std::move(instruction);
        r.origin = origin;
        return r;
    }

    bool has_response() const { return response && !response->empty(); }

    /// Throws ValidationError when a record invariant is broken.
    void validate() const {
        if (normalize_instruction(instruction).empty()) throw ValidationError("empty instruction");
        if (id != instruction_id(instruction)) throw ValidationError("id is not the digest of the instruction");
        if (origin == Origin::expanded && !source_id) throw ValidationError("expanded record without source_id");
        if (origin == Origin::seed && round_introduced != 0) throw ValidationError("seed record with round_introduced != 0");
        if (round_introduced < 0) throw ValidationError("negative round_introduced");
    }

    friend bool operator==(const InstructionRecord&, const InstructionRecord&) = default;
};

inline nlohmann::ordered_json record_to_json(const InstructionRecord& r) {
    auto opt = [](const std::optional<std::string>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr); };
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["instruction"] = r.instruction;
    j["response"] = opt(r.response);
    j["student_response"] = opt(r.student_response);
    j["task"] = r.task ? nlohmann::ordered_json(std::string(r.task->name())) : nlohmann::ordered_json(nullptr);
    j["origin"] = std::string(to_string(r.origin));
    j["source_id"] = opt(r.source_id);
    j["round_introduced"] = r.round_introduced;
    return j;
}

/// Decodes one record object. A missing id is computed; a present one must match.
inline InstructionRecord record_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("record is not a JSON object");
    auto opt = [&](const char* key) -> std::optional<std::string> {
        auto it = j.find(key);
        if (it == j.end() || it->is_null()) return std::nullopt;
        if (!it->is_string()) throw ValidationError(std::string("field '") + key + "' must be a string");
        return it->get<std::string>();
    };
    auto instruction = opt("instruction");
    if (!instruction) throw ValidationError("missing instruction");
    InstructionRecord r = InstructionRecord::make(*instruction);
    if (auto id = opt("id"); id && *id != r.id) throw ValidationError("id does not match instruction digest");
    r.response = opt("response");
    r.student_response = opt("student_response");
    if (auto task = opt("task")) r.task = TaskLabel::parse(*task);
    if (auto origin = opt("origin")) r.origin = parse_origin(*origin);
    r.source_id = opt("source_id");
    if (auto it = j.find("round_introduced"); it != j.end() && !it->is_null()) {
        if (!it->is_number_integer()) throw ValidationError("round_introduced must be an integer");
        r.round_introduced = it->get<std::int64_t>();
    }
    r.validate();
    return r;
}

/// Ordered, id-unique collection of records.
class Corpus {
public:
    Corpus() = default;
    explicit Corpus(std::string name) : name_(std::move(name)) {}

    const std::string& name() const noexcept { return name_; }
    void set_name(std::string name) { name_ = std::move(name); }

    std::size_t size() const noexcept { return records_.size(); }
    bool empty() const noexcept { return records_.empty(); }
    const std::vector<InstructionRecord>& records() const noexcept { return records_; }
    auto begin() const noexcept { return records_.begin(); }
    auto end() const noexcept { return records_.end(); }
    const InstructionRecord& operator[](std::size_t i) const { return records_[i]; }

    bool contains(const std::string& id) const { return index_.count(id) != 0; }

    const InstructionRecord* find(const std::string& id) const {
        auto it = index_.find(id);
        return it == index_.end() ? nullptr : &records_[it->second];
    }

    /// Appends; throws ValidationError on a duplicate id.
    void add(InstructionRecord record) {
        if (!index_.emplace(record.id, records_.size()).second) {
            throw ValidationError("duplicate record id " + record.id);
        }
        records_.push_back(std::move(record));
    }

    /// Replaces the record with the same id in place.
    void replace(InstructionRecord record) {
        auto it = index_.find(record.id);
        if (it == index_.end()) throw ValidationError("no record with id " + record.id);
        records_[it->second] = std::move(record);
    }

    friend bool operator==(const Corpus& a, const Corpus& b) { return a.name_ == b.name_ && a.records_ == b.records_; }

private:
    std::string name_;
    std::vector<InstructionRecord> records_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Writes via a temporary sibling and rename, so readers never see a torn file.
inline void atomic_write(const fs::path& path, const std::string& content) {
    static std::atomic<unsigned> counter{0};
    auto tmp = path;
    tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << content;
        out.flush();
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("cannot rename into " + path.string());
    }
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Calls `fn(line_number, json)` for each non-blank line of a JSONL file.
template <class Fn>
void for_each_jsonl(const fs::path& path, Fn&& fn) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim_copy(line).empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(path.string(), lineno, std::string("malformed JSON: ") + e.what());
        }
        fn(lineno, j);
    }
}

inline Corpus load_corpus(const fs::path& path) {
    Corpus corpus(path.stem().string());
    std::unordered_map<std::string, std::size_t> first_line;
    for_each_jsonl(path, [&](std::size_t lineno, const nlohmann::json& j) {
        InstructionRecord record;
        try {
            record = record_from_json(j);
        } catch (const ValidationError& e) {
            throw FormatError(path.string(), lineno, e.what());
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path.string(), lineno, e.what());
        }
        auto [it, inserted] = first_line.emplace(record.id, lineno);
        if (!inserted) {
            throw FormatError(path.string(), lineno,
                              "duplicate id " + record.id + " (first seen on line " + std::to_string(it->second) + ")");
        }
        corpus.add(std::move(record));
    });
    return corpus;
}

inline std::string corpus_to_jsonl(const Corpus& corpus) {
    std::string out;
    for (const auto& r : corpus) {
        out += record_to_json(r).dump();
        out.push_back('\n');
    }
    return out;
}

inline void write_corpus(const Corpus& corpus, const fs::path& path) { atomic_write(path, corpus_to_jsonl(corpus)); }

enum class Pool { hard, easy };

inline std::string_view to_string(Pool p) { return p == Pool::hard ? "hard" : "easy"; }

inline Pool parse_pool(std::string_view s) {
    if (s == "hard") return Pool::hard;
    if (s == "easy") return Pool::easy;
    throw ValidationError("unknown pool '" + std::string(s) + "'");
}

struct ManifestEntry {
    std::string record_id;
    Pool pool = Pool::hard;
    Rational weight{1};

    friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

/// One round's sampled training set, as handed to the external trainer.
struct RoundManifest {
    std::int64_t round = 1;
    Rational alpha;
    std::vector<ManifestEntry> entries;
    std::uint64_t rng_seed = 0;
    std::string hard_pool;
    std::string easy_pool;
    Rational realized_hard_fraction;

    /// Hard weight over total weight; zero for an empty manifest.
    Rational hard_fraction() const {
        Rational hard, total;
        for (const auto& e : entries) {
            total += e.weight;
            if (e.pool == Pool::hard) hard += e.weight;
        }
        return total == Rational(0) ? Rational(0) : hard / total;
    }

    std::size_t count(Pool pool) const {
        std::size_t n = 0;
        for (const auto& e : entries) n += e.pool == pool;
        return n;
    }

    friend bool operator==(const RoundManifest&, const RoundManifest&) = default;
};

inline std::string manifest_to_jsonl(const RoundManifest& m) {
    nlohmann::ordered_json header;
    header["round"] = m.round;
    nlohmann::json alpha = m.alpha;
    header["alpha"] = alpha;
    header["rng_seed"] = m.rng_seed;
    header["hard_pool"] = m.hard_pool;
    header["easy_pool"] = m.easy_pool;
    nlohmann::json realized = m.realized_hard_fraction;
    header["realized_hard_fraction"] = realized;
    std::string out = header.dump();
    out.push_back('\n');
    for (const auto& e : m.entries) {
        nlohmann::ordered_json j;
        j["record_id"] = e.record_id;
        j["pool"] = std::string(to_string(e.pool));
        nlohmann::json w = e.weight;
        j["weight"] = w;
        out += j.dump();
        out.push_back('\n');
    }
    return out;
}

inline void write_manifest(const RoundManifest& manifest, const fs::path& path) {
    if (path.has_parent_path() && !fs::is_directory(path.parent_path())) {
        throw IoError("parent directory does not exist: " + path.parent_path().string());
    }
    atomic_write(path, manifest_to_jsonl(manifest));
}

inline RoundManifest load_manifest(const fs::path& path) {
    RoundManifest m;
    bool have_header = false;
    for_each_jsonl(path, [&](std::size_t lineno, const nlohmann::json& j) {
        try {
            if (!have_header) {
                m.round = j.at("round").get<std::int64_t>();
                m.alpha = j.at("alpha").get<Rational>();
                m.rng_seed = j.at("rng_seed").get<std::uint64_t>();
                m.hard_pool = j.at("hard_pool").get<std::string>();
                m.easy_pool = j.at("easy_pool").get<std::string>();
                m.realized_hard_fraction = j.at("realized_hard_fraction").get<Rational>();
                have_header = true;
                return;
            }
            ManifestEntry e;
            e.record_id = j.at("record_id").get<std::string>();
            e.pool = parse_pool(j.at("pool").get<std::string>());
            e.weight = j.at("weight").get<Rational>();
            if (e.weight <= Rational(0)) throw ValidationError("non-positive weight");
            m.entries.push_back(std::move(e));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path.string(), lineno, e.what());
        } catch (const std::invalid_argument& e) {
            throw FormatError(path.string(), lineno, e.what());
        } catch (const ValidationError& e) {
            throw FormatError(path.string(), lineno, e.what());
        }
    });
    if (!have_header) throw FormatError(path.string(), 1, "missing manifest header");
    return m;
}

}  // namespace tapir
