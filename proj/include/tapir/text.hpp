#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <openssl/evp.h>
#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include "tapir/errors.hpp"

namespace tapir {

/// Lowercase hex SHA-256 of the given bytes.
inline std::string sha256_hex(std::string_view bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw Error("sha256 failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xf]);
    }
    return out;
}

/// NFC, whitespace runs collapsed to one ASCII space, ends trimmed. Case is
/// preserved. Invalid UTF-8 sequences become U+FFFD.
inline std::string normalize_instruction(std::string_view text) {
    UErrorCode status = U_ZERO_ERROR;
    const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
    if (U_FAILURE(status)) throw Error("ICU NFC normalizer unavailable");
    icu::UnicodeString source = icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
    icu::UnicodeString composed = nfc->normalize(source, status);
    if (U_FAILURE(status)) throw Error("NFC normalization failed");

    icu::UnicodeString collapsed;
    bool pending_space = false;
    for (int32_t i = 0; i < composed.length();) {
        UChar32 c = composed.char32At(i);
        i += U16_LENGTH(c);
        if (u_isUWhiteSpace(c)) {
            pending_space = !collapsed.isEmpty();
            continue;
        }
        if (pending_space) collapsed.append(static_cast<UChar>(u' '));
        pending_space = false;
        collapsed.append(c);
    }
    std::string out;
    collapsed.toUTF8String(out);
    return out;
}

/// Content digest used as the record id.
inline std::string instruction_id(std::string_view instruction) {
    return sha256_hex(normalize_instruction(instruction));
}

/// Word 3-grams of a normalized text, ASCII-lowercased, sorted and unique.
/// Texts with fewer than three words yield one gram holding all their words.
inline std::vector<std::string> word_trigrams(std::string_view normalized) {
    std::vector<std::string> words;
    std::string current;
    for (char c : normalized) {
        if (c == ' ') {
            if (!current.empty()) words.push_back(std::move(current));
            current.clear();
        } else {
            current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    if (!current.empty()) words.push_back(std::move(current));

    std::vector<std::string> grams;
    if (words.size() < 3) {
        std::string all;
        for (const auto& w : words) {
            if (!all.empty()) all.push_back(' ');
            all += w;
        }
        if (!all.empty()) grams.push_back(std::move(all));
    } else {
        for (std::size_t i = 0; i + 2 < words.size(); ++i) {
            grams.push_back(words[i] + ' ' + words[i + 1] + ' ' + words[i + 2]);
        }
    }
    std::sort(grams.begin(), grams.end());
    grams.erase(std::unique(grams.begin(), grams.end()), grams.end());
    return grams;
}

inline bool contains(std::string_view haystack, std::string_view needle) {
    return haystack.find(needle) != std::string_view::npos;
}

inline std::string trim_copy(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return std::string(s);
}

/// Replaces every `{key}` occurrence in a template.
inline std::string substitute(std::string text, std::string_view key, std::string_view value) {
    const std::string token = "{" + std::string(key) + "}";
    for (std::size_t pos = text.find(token); pos != std::string::npos; pos = text.find(token, pos + value.size())) {
        text.replace(pos, token.size(), value);
    }
    return text;
}

}  // namespace tapir
