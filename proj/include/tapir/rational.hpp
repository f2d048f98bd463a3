#pragma once

#include <cctype>
#include <charconv>
#include <compare>
#include <cstdint>
#include <cstdlib>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace tapir {

/// Exact signed fraction with a positive denominator, always kept in lowest
/// terms. Used for judge scores, MFD values, mixture fractions and the alpha
/// schedule so that equality checks never depend on floating-point rounding.
class Rational {
public:
    constexpr Rational() = default;
    constexpr Rational(std::int64_t value) : num_(value) {}  // NOLINT(implicit)
    Rational(std::int64_t num, std::int64_t den) { assign(num, den); }

    std::int64_t num() const noexcept { return num_; }
    std::int64_t den() const noexcept { return den_; }

    double to_double() const noexcept { return static_cast<double>(num_) / static_cast<double>(den_); }

    /// Parses "7", "-2", "8.5", "1.25e-1" or "3/10".
    static Rational parse(std::string_view text) {
        auto trimmed = trim(text);
        if (trimmed.empty()) throw std::invalid_argument("empty rational");
        if (auto slash = trimmed.find('/'); slash != std::string_view::npos) {
            return Rational(parse_int(trimmed.substr(0, slash)), parse_int(trimmed.substr(slash + 1)));
        }
        return parse_decimal(trimmed);
    }

    /// Converts a double through its shortest round-trip decimal spelling, so
    /// 0.3 becomes exactly 3/10.
    static Rational from_double(double value) {
        char buf[64];
        auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
        if (ec != std::errc{}) throw std::invalid_argument("unrepresentable double");
        return parse_decimal(std::string_view(buf, static_cast<std::size_t>(end - buf)));
    }

    /// True when the value has a finite decimal expansion.
    bool is_terminating_decimal() const noexcept {
        auto d = den_;
        while (d % 2 == 0) d /= 2;
        while (d % 5 == 0) d /= 5;
        return d == 1;
    }

    /// Exact decimal spelling for terminating values, "p/q" otherwise.
    std::string to_string() const {
        if (den_ == 1) return std::to_string(num_);
        if (!is_terminating_decimal()) return std::to_string(num_) + "/" + std::to_string(den_);
        // scale to a power of ten
        __int128 n = num_;
        __int128 d = den_;
        int digits = 0;
        while (d != 1) {
            if (d % 10 == 0) {
                d /= 10;
            } else if (d % 2 == 0) {
                d /= 2;
                n *= 5;
            } else {
                d /= 5;
                n *= 2;
            }
            ++digits;
        }
        bool negative = n < 0;
        if (negative) n = -n;
        std::string s;
        while (n > 0) {
            s.insert(s.begin(), static_cast<char>('0' + static_cast<int>(n % 10)));
            n /= 10;
        }
        while (static_cast<int>(s.size()) <= digits) s.insert(s.begin(), '0');
        s.insert(s.end() - digits, '.');
        while (s.back() == '0') s.pop_back();
        if (s.back() == '.') s.pop_back();
        return negative ? "-" + s : s;
    }

    friend Rational operator+(const Rational& a, const Rational& b) {
        return from_wide(static_cast<__int128>(a.num_) * b.den_ + static_cast<__int128>(b.num_) * a.den_,
                         static_cast<__int128>(a.den_) * b.den_);
    }
    friend Rational operator-(const Rational& a, const Rational& b) {
        return from_wide(static_cast<__int128>(a.num_) * b.den_ - static_cast<__int128>(b.num_) * a.den_,
                         static_cast<__int128>(a.den_) * b.den_);
    }
    friend Rational operator*(const Rational& a, const Rational& b) {
        return from_wide(static_cast<__int128>(a.num_) * b.num_, static_cast<__int128>(a.den_) * b.den_);
    }
    friend Rational operator/(const Rational& a, const Rational& b) {
        if (b.num_ == 0) throw std::domain_error("rational division by zero");
        return from_wide(static_cast<__int128>(a.num_) * b.den_, static_cast<__int128>(a.den_) * b.num_);
    }
    Rational operator-() const { return from_wide(-static_cast<__int128>(num_), den_); }
    Rational& operator+=(const Rational& o) { return *this = *this + o; }
    Rational& operator-=(const Rational& o) { return *this = *this - o; }

    friend bool operator==(const Rational&, const Rational&) = default;
    friend std::strong_ordering operator<=>(const Rational& a, const Rational& b) {
        return static_cast<__int128>(a.num_) * b.den_ <=> static_cast<__int128>(b.num_) * a.den_;
    }

    /// Largest integer not above the value.
    std::int64_t floor() const noexcept {
        auto q = num_ / den_;
        if (num_ % den_ != 0 && num_ < 0) --q;
        return q;
    }

    /// Nearest integer, halves away from zero.
    std::int64_t round() const noexcept {
        auto twice = static_cast<__int128>(num_) * 2;
        auto d = static_cast<__int128>(den_) * 2;
        if (num_ >= 0) return static_cast<std::int64_t>((twice + den_) / d);
        return -static_cast<std::int64_t>((-twice + den_) / d);
    }

    friend std::ostream& operator<<(std::ostream& os, const Rational& r) { return os << r.to_string(); }

private:
    std::int64_t num_ = 0;
    std::int64_t den_ = 1;

    void assign(__int128 n, __int128 d) {
        if (d == 0) throw std::domain_error("rational with zero denominator");
        if (d < 0) {
            n = -n;
            d = -d;
        }
        __int128 a = n < 0 ? -n : n;
        __int128 b = d;
        while (b != 0) {
            auto t = a % b;
            a = b;
            b = t;
        }
        if (a > 1) {
            n /= a;
            d /= a;
        }
        constexpr __int128 lim = INT64_MAX;
        if (n > lim || n < -lim || d > lim) throw std::overflow_error("rational overflow");
        num_ = static_cast<std::int64_t>(n);
        den_ = static_cast<std::int64_t>(d);
    }

    static Rational from_wide(__int128 n, __int128 d) {
        Rational r;
        r.assign(n, d);
        return r;
    }

    static std::string_view trim(std::string_view s) {
        while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
        while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
        return s;
    }

    static std::int64_t parse_int(std::string_view s) {
        s = trim(s);
        if (!s.empty() && s.front() == '+') s.remove_prefix(1);
        std::int64_t v = 0;
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) {
            throw std::invalid_argument("malformed integer: " + std::string(s));
        }
        return v;
    }

    static Rational parse_decimal(std::string_view s) {
        bool negative = false;
        if (!s.empty() && (s.front() == '-' || s.front() == '+')) {
            negative = s.front() == '-';
            s.remove_prefix(1);
        }
        __int128 mantissa = 0;
        int scale = 0;
        bool any_digit = false;
        bool seen_point = false;
        std::size_t i = 0;
        for (; i < s.size(); ++i) {
            char c = s[i];
            if (c >= '0' && c <= '9') {
                any_digit = true;
                mantissa = mantissa * 10 + (c - '0');
                if (mantissa > static_cast<__int128>(INT64_MAX) * 1000) throw std::overflow_error("rational overflow");
                if (seen_point) ++scale;
            } else if (c == '.' && !seen_point) {
                seen_point = true;
            } else {
                break;
            }
        }
        if (!any_digit) throw std::invalid_argument("malformed decimal: " + std::string(s));
        int exponent = 0;
        if (i < s.size()) {
            if (s[i] != 'e' && s[i] != 'E') throw std::invalid_argument("malformed decimal: " + std::string(s));
            exponent = static_cast<int>(parse_int(s.substr(i + 1)));
        }
        int net = exponent - scale;
        if (net > 18 || net < -18) throw std::overflow_error("decimal exponent out of range");
        __int128 pow = 1;
        for (int k = 0; k < (net < 0 ? -net : net); ++k) pow *= 10;
        if (negative) mantissa = -mantissa;
        return net >= 0 ? from_wide(mantissa * pow, 1) : from_wide(mantissa, pow);
    }
};

/// JSON encoding: a number when the value is a terminating decimal, otherwise
/// a "p/q" string. Decoding accepts both.
inline void to_json(nlohmann::json& j, const Rational& r) {
    if (r.den() == 1) {
        j = r.num();
    } else if (r.is_terminating_decimal()) {
        j = nlohmann::json::parse(r.to_string());
    } else {
        j = r.to_string();
    }
}

inline void from_json(const nlohmann::json& j, Rational& r) {
    if (j.is_number_integer()) {
        r = Rational(j.get<std::int64_t>());
    } else if (j.is_number_float()) {
        r = Rational::from_double(j.get<double>());
    } else if (j.is_string()) {
        r = Rational::parse(j.get<std::string>());
    } else {
        throw std::invalid_argument("expected a number or fraction string");
    }
}

}  // namespace tapir
