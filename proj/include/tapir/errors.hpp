#pragma once

#include <stdexcept>
#include <string>

namespace tapir {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Bad input data or configuration; maps to CLI exit status 1.
struct ValidationError : Error {
    using Error::Error;
};

/// A file could not be read or written.
struct IoError : Error {
    using Error::Error;
};

/// Malformed line in a JSONL input.
struct FormatError : Error {
    FormatError(std::string path, std::size_t line, const std::string& what)
        : Error(path + ":" + std::to_string(line) + ": " + what), path_(std::move(path)), line_(line) {}
    const std::string& path() const noexcept { return path_; }
    std::size_t line() const noexcept { return line_; }

private:
    std::string path_;
    std::size_t line_;
};

struct TransportError : Error {
    using Error::Error;
};

struct EmptyReplyError : Error {
    using Error::Error;
};

/// A judge reply without two in-range scores. Keeps the raw text for audit.
struct JudgeParseError : Error {
    JudgeParseError(const std::string& what, std::string raw) : Error(what), raw_(std::move(raw)) {}
    const std::string& raw() const noexcept { return raw_; }

private:
    std::string raw_;
};

}  // namespace tapir
