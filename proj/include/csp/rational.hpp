#pragma once

#include <compare>
#include <cstdint>
#include <string>

namespace csp {

/// Non-negative fraction kept in the unreduced form it was built from
/// (e.g. 2336/32), so reports show the token-layer sum and the layer count.
struct Rational {
    __extension__ using Wide = unsigned __int128;

    std::uint64_t num = 0;
    std::uint64_t den = 1;

    std::uint64_t floor() const noexcept { return num / den; }
    double value() const noexcept { return static_cast<double>(num) / static_cast<double>(den); }
    std::string to_string() const { return std::to_string(num) + "/" + std::to_string(den); }

    friend bool operator==(const Rational& a, const Rational& b) noexcept {
        return static_cast<Wide>(a.num) * b.den == static_cast<Wide>(b.num) * a.den;
    }
    friend std::strong_ordering operator<=>(const Rational& a, const Rational& b) noexcept {
        return static_cast<Wide>(a.num) * b.den <=> static_cast<Wide>(b.num) * a.den;
    }
};

}  // namespace csp
