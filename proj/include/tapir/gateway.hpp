#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "tapir/errors.hpp"
#include "tapir/random.hpp"
#include "tapir/rational.hpp"
#include "tapir/store.hpp"
#include "tapir/text.hpp"

namespace tapir {

enum class Role { teacher, judge, student, classifier };

inline std::string_view to_string(Role r) {
    switch (r) {
        case Role::teacher: return "teacher";
        case Role::judge: return "judge";
        case Role::student: return "student";
        case Role::classifier: return "classifier";
    }
    return "teacher";
}

inline Role parse_role(std::string_view s) {
    if (s == "teacher") return Role::teacher;
    if (s == "judge") return Role::judge;
    if (s == "student") return Role::student;
    if (s == "classifier") return Role::classifier;
    throw ValidationError("unknown role '" + std::string(s) + "'");
}

inline constexpr std::int64_t kMaxTokensLimit = 131072;

struct EndpointSpec {
    std::string base_url;
    std::string model_name;
    std::string api_key_env = "TAPIR_API_KEY";
    Rational temperature;
    std::int64_t max_tokens = 1024;
    Role role = Role::teacher;

    void validate() const {
        if (model_name.empty()) throw ValidationError("endpoint model_name is empty");
        if (temperature < Rational(0) || temperature > Rational(2)) throw ValidationError("temperature outside [0, 2]");
        if (max_tokens <= 0 || max_tokens > kMaxTokensLimit) throw ValidationError("max_tokens outside (0, 131072]");
    }

    /// Default decoding: deterministic for judge and classifier, 0.7 otherwise.
    static EndpointSpec defaults_for(Role role) {
        EndpointSpec e;
        e.role = role;
        e.model_name = std::string(to_string(role));
        e.temperature = (role == Role::judge || role == Role::classifier) ? Rational(0) : Rational(7, 10);
        return e;
    }
};

struct ChatParams {
    Rational temperature;
    std::int64_t max_tokens = 1024;
    std::vector<std::string> stop;
    /// Distinguishes repeated samples of one prompt; part of the cache key,
    /// never sent on the wire.
    std::string variant;
};

struct ChatRequest {
    std::string system;
    std::string user;
    ChatParams params;

    /// A request using the endpoint's decoding defaults.
    static ChatRequest make(const EndpointSpec& endpoint, std::string system, std::string user, std::string variant = {}) {
        ChatRequest r;
        r.system = std::move(system);
        r.user = std::move(user);
        r.params.temperature = endpoint.temperature;
        r.params.max_tokens = endpoint.max_tokens;
        r.params.variant = std::move(variant);
        return r;
    }
};

struct CacheKey {
    std::string digest;

    static CacheKey compute(std::string_view model_name, const ChatRequest& req) {
        nlohmann::json canonical = nlohmann::json::array({
            std::string(model_name),
            req.system,
            req.user,
            req.params.temperature.to_string(),
            req.params.max_tokens,
            req.params.stop,
            req.params.variant,
        });
        return CacheKey{sha256_hex(canonical.dump())};
    }

    friend bool operator==(const CacheKey&, const CacheKey&) = default;
};

/// Write-once on-disk store: `<root>/<first two hex>/<digest>.txt`.
class ResponseCache {
public:
    explicit ResponseCache(fs::path root) : root_(std::move(root)) {}

    const fs::path& root() const noexcept { return root_; }

    fs::path path_for(const CacheKey& key) const { return root_ / key.digest.substr(0, 2) / (key.digest + ".txt"); }

    std::optional<std::string> get(const CacheKey& key) const {
        std::shared_lock lock(mutex_);
        auto p = path_for(key);
        std::error_code ec;
        if (!fs::exists(p, ec)) return std::nullopt;
        return read_file(p);
    }

    void put(const CacheKey& key, const std::string& text) {
        std::unique_lock lock(mutex_);
        auto p = path_for(key);
        std::error_code ec;
        if (fs::exists(p, ec)) return;
        fs::create_directories(p.parent_path(), ec);
        if (ec) throw IoError("cannot create cache directory " + p.parent_path().string());
        atomic_write(p, text);
    }

private:
    fs::path root_;
    mutable std::shared_mutex mutex_;
};

/// Where requests actually go. Implementations throw TransportError for
/// retryable failures.
class Backend {
public:
    virtual ~Backend() = default;
    virtual std::string send(const EndpointSpec& endpoint, const ChatRequest& request, const CacheKey& key) = 0;
};

/// Scripted replies for offline runs. Rules are tried in order; the first
/// whose `match` is a substring of the user prompt (and whose optional
/// `model` equals the endpoint model) wins.
///
/// Reply text may contain placeholders, each resolved deterministically from
/// the request's cache digest:
///   {{user}}          the whole user prompt
///   {{given}}         the text after "#Given Instruction#:" up to the next "#" line
///   {{digest8}}       first eight hex digits of the digest
///   {{int:A-B}}       an integer in [A, B]
///   {{pick:a|b|c}}    one of the alternatives
class MockBackend : public Backend {
public:
    struct Rule {
        std::string match;
        std::string reply;
        std::optional<std::string> model;
        std::int64_t latency_ms = 0;
    };

    MockBackend() = default;
    explicit MockBackend(std::vector<Rule> rules) : rules_(std::move(rules)) {}

    static MockBackend from_fixture(const fs::path& path) {
        std::vector<Rule> rules;
        for_each_jsonl(path, [&](std::size_t lineno, const nlohmann::json& j) {
            try {
                Rule r;
                r.match = j.at("match").get<std::string>();
                r.reply = j.at("reply").get<std::string>();
                if (j.contains("model")) r.model = j.at("model").get<std::string>();
                if (j.contains("latency_ms")) r.latency_ms = j.at("latency_ms").get<std::int64_t>();
                rules.push_back(std::move(r));
            } catch (const nlohmann::json::exception& e) {
                throw FormatError(path.string(), lineno, e.what());
            }
        });
        return MockBackend(std::move(rules));
    }

    const std::vector<Rule>& rules() const noexcept { return rules_; }

    std::string send(const EndpointSpec& endpoint, const ChatRequest& request, const CacheKey& key) override {
        for (const auto& rule : rules_) {
            if (rule.model && *rule.model != endpoint.model_name) continue;
            if (!contains(request.user, rule.match)) continue;
            if (rule.latency_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(rule.latency_ms));
            return render(rule.reply, request, key);
        }
        throw Error("no mock rule matches the request");
    }

    static std::string render(const std::string& reply, const ChatRequest& request, const CacheKey& key) {
        std::uint64_t base = std::stoull(key.digest.substr(0, 16), nullptr, 16);
        std::uint64_t occurrence = 0;
        std::string out;
        std::size_t pos = 0;
        while (pos < reply.size()) {
            auto open = reply.find("{{", pos);
            if (open == std::string::npos) break;
            auto close = reply.find("}}", open + 2);
            if (close == std::string::npos) break;
            out.append(reply, pos, open - pos);
            std::string token = reply.substr(open + 2, close - open - 2);
            std::uint64_t h = mix_seed(base, occurrence++);
            out += expand_token(token, request, key, h);
            pos = close + 2;
        }
        out.append(reply, pos, std::string::npos);
        return out;
    }

private:
    std::vector<Rule> rules_;

    static std::string given_instruction(const std::string& user) {
        static constexpr std::string_view marker = "#Given Instruction#:";
        auto at = user.find(marker);
        if (at == std::string::npos) return user;
        auto start = at + marker.size();
        auto end = user.find("\n#", start);
        return trim_copy(std::string_view(user).substr(start, end == std::string::npos ? std::string::npos : end - start));
    }

    static std::string expand_token(const std::string& token, const ChatRequest& request, const CacheKey& key,
                                    std::uint64_t h) {
        if (token == "user") return request.user;
        if (token == "given") return given_instruction(request.user);
        if (token == "digest8") return key.digest.substr(0, 8);
        if (token.rfind("int:", 0) == 0) {
            auto dash = token.find('-', 4);
            if (dash == std::string::npos) throw ValidationError("bad mock token {{" + token + "}}");
            auto lo = std::stoll(token.substr(4, dash - 4));
            auto hi = std::stoll(token.substr(dash + 1));
            if (hi < lo) throw ValidationError("bad mock token {{" + token + "}}");
            return std::to_string(lo + static_cast<std::int64_t>(h % static_cast<std::uint64_t>(hi - lo + 1)));
        }
        if (token.rfind("pick:", 0) == 0) {
            std::vector<std::string> options;
            std::string rest = token.substr(5);
            std::size_t start = 0;
            for (std::size_t bar; (bar = rest.find('|', start)) != std::string::npos; start = bar + 1) {
                options.push_back(rest.substr(start, bar - start));
            }
            options.push_back(rest.substr(start));
            return options[h % options.size()];
        }
        throw ValidationError("unknown mock token {{" + token + "}}");
    }
};

struct RetryPolicy {
    int retries = 3;
    std::chrono::milliseconds base_delay{1000};
    double jitter = 0.25;
};

/// One positional outcome of a batch call.
struct BatchReply {
    std::optional<std::string> text;
    std::string error;

    bool ok() const noexcept { return text.has_value(); }
};

/// Counting permits, one pool per endpoint.
class Permits {
public:
    explicit Permits(std::size_t limit) : available_(limit) {}

    void acquire() {
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [&] { return available_ > 0; });
        --available_;
    }

    void release() {
        {
            std::lock_guard lock(mutex_);
            ++available_;
        }
        cv_.notify_one();
    }

private:
    std::mutex mutex_;
    std::condition_variable cv_;
    std::size_t available_;
};

/// Completion client shared by every stage: cache lookup, then the backend
/// with retries on transport errors. Safe for concurrent use.
class Gateway {
public:
    Gateway(std::shared_ptr<Backend> backend, std::optional<fs::path> cache_dir, RetryPolicy retry = {},
            std::size_t endpoint_limit = 16)
        : backend_(std::move(backend)), retry_(retry), endpoint_limit_(std::max<std::size_t>(1, endpoint_limit)) {
        if (cache_dir) cache_.emplace(*cache_dir);
    }

    std::string complete(const EndpointSpec& endpoint, const ChatRequest& request) {
        if (trim_copy(request.user).empty()) throw ValidationError("chat request with empty user prompt");
        const auto key = CacheKey::compute(endpoint.model_name, request);
        if (cache_) {
            if (auto hit = cache_->get(key)) {
                ++cache_hits_;
                return *hit;
            }
        }
        std::string text = send_with_retry(endpoint, request, key);
        if (trim_copy(text).empty()) throw EmptyReplyError("empty completion from " + endpoint.model_name);
        if (cache_) cache_->put(key, text);
        return text;
    }

    std::vector<BatchReply> complete_batch(const EndpointSpec& endpoint, const std::vector<ChatRequest>& requests,
                                           std::size_t max_in_flight) {
        if (max_in_flight < 1) throw ValidationError("max_in_flight must be at least 1");
        std::vector<BatchReply> out(requests.size());
        if (requests.empty()) return out;
        std::atomic<std::size_t> next{0};
        std::mutex config_mutex;
        std::exception_ptr config_error;
        auto worker = [&] {
            for (std::size_t i = next++; i < requests.size(); i = next++) {
                try {
                    out[i].text = complete(endpoint, requests[i]);
                } catch (const ValidationError& e) {
                    // a misconfiguration fails every request alike; surface it once
                    out[i].error = e.what();
                    std::lock_guard lock(config_mutex);
                    if (!config_error) config_error = std::current_exception();
                } catch (const std::exception& e) {
                    out[i].error = e.what();
                }
            }
        };
        const std::size_t workers = std::min(max_in_flight, requests.size());
        if (workers == 1) {
            worker();
        } else {
            std::vector<std::jthread> pool;
            pool.reserve(workers);
            for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
        }
        if (config_error) std::rethrow_exception(config_error);
        return out;
    }

    std::uint64_t network_calls() const noexcept { return network_calls_; }
    std::uint64_t cache_hits() const noexcept { return cache_hits_; }
    const ResponseCache* cache() const noexcept { return cache_ ? &*cache_ : nullptr; }

private:
    std::shared_ptr<Backend> backend_;
    std::optional<ResponseCache> cache_;
    RetryPolicy retry_;
    std::size_t endpoint_limit_;
    std::atomic<std::uint64_t> network_calls_{0};
    std::atomic<std::uint64_t> cache_hits_{0};
    std::mutex permits_mutex_;
    std::map<std::string, std::unique_ptr<Permits>> permits_;

    Permits& permits_for(const EndpointSpec& endpoint) {
        std::lock_guard lock(permits_mutex_);
        auto& slot = permits_[endpoint.base_url + "|" + endpoint.model_name];
        if (!slot) slot = std::make_unique<Permits>(endpoint_limit_);
        return *slot;
    }

    std::string send_with_retry(const EndpointSpec& endpoint, const ChatRequest& request, const CacheKey& key) {
        auto& permits = permits_for(endpoint);
        Xoshiro256 jitter_rng(mix_seed(std::hash<std::thread::id>{}(std::this_thread::get_id()),
                                       static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count())));
        for (int attempt = 0;; ++attempt) {
            permits.acquire();
            try {
                ++network_calls_;
                auto text = backend_->send(endpoint, request, key);
                permits.release();
                return text;
            } catch (const TransportError&) {
                permits.release();
                if (attempt >= retry_.retries) throw;
            } catch (...) {
                permits.release();
                throw;
            }
            auto delay = retry_.base_delay * (1LL << attempt);
            double factor = 1.0 + retry_.jitter * (2.0 * jitter_rng.next_unit() - 1.0);
            std::this_thread::sleep_for(std::chrono::duration_cast<std::chrono::milliseconds>(delay * factor));
        }
    }
};

}  // namespace tapir
