#pragma once

#include <cstdlib>
#include <memory>
#include <string>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "tapir/gateway.hpp"

namespace tapir {

/// Splits "https://host:port/v1" into the scheme-host part and the path prefix.
struct UrlParts {
    std::string origin;
    std::string path;
};

inline UrlParts split_url(const std::string& url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ValidationError("base_url needs a scheme: " + url);
    auto path_start = url.find('/', scheme_end + 3);
    UrlParts parts;
    parts.origin = url.substr(0, path_start);
    parts.path = path_start == std::string::npos ? "" : url.substr(path_start);
    while (!parts.path.empty() && parts.path.back() == '/') parts.path.pop_back();
    return parts;
}

/// Request body for POST {base_url}/chat/completions.
inline nlohmann::json chat_completion_body(const EndpointSpec& endpoint, const ChatRequest& request) {
    nlohmann::json messages = nlohmann::json::array();
    if (!request.system.empty()) messages.push_back({{"role", "system"}, {"content", request.system}});
    messages.push_back({{"role", "user"}, {"content", request.user}});
    nlohmann::json body = {
        {"model", endpoint.model_name},
        {"messages", messages},
        {"temperature", request.params.temperature.to_double()},
        {"max_tokens", request.params.max_tokens},
    };
    if (!request.params.stop.empty()) body["stop"] = request.params.stop;
    return body;
}

/// Extracts choices[0].message.content; throws TransportError on a malformed body.
inline std::string chat_completion_text(const std::string& body) {
    try {
        auto j = nlohmann::json::parse(body);
        const auto& content = j.at("choices").at(0).at("message").at("content");
        return content.is_null() ? std::string() : content.get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw TransportError(std::string("malformed chat completion response: ") + e.what());
    }
}

/// Live backend speaking the chat-completions JSON protocol.
class HttpBackend : public Backend {
public:
    explicit HttpBackend(std::chrono::seconds timeout = std::chrono::seconds(120)) : timeout_(timeout) {}

    std::string send(const EndpointSpec& endpoint, const ChatRequest& request, const CacheKey&) override {
        const char* key = std::getenv(endpoint.api_key_env.c_str());
        if (key == nullptr || *key == '\0') {
            throw ValidationError("API key variable " + endpoint.api_key_env + " is not set");
        }
        auto url = split_url(endpoint.base_url);
        httplib::Client client(url.origin);
        client.set_read_timeout(timeout_);
        client.set_connection_timeout(std::chrono::seconds(30));
        client.set_bearer_token_auth(key);
        auto body = chat_completion_body(endpoint, request).dump();
        auto res = client.Post(url.path + "/chat/completions", body, "application/json");
        if (!res) throw TransportError("request to " + endpoint.base_url + " failed: " + httplib::to_string(res.error()));
        if (res->status == 429 || res->status >= 500) {
            throw TransportError("HTTP " + std::to_string(res->status) + " from " + endpoint.base_url);
        }
        if (res->status != 200) {
            throw Error("HTTP " + std::to_string(res->status) + " from " + endpoint.base_url + ": " + res->body);
        }
        return chat_completion_text(res->body);
    }

private:
    std::chrono::seconds timeout_;
};

}  // namespace tapir
