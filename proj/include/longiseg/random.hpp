#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace longiseg {

/// Uniform double in [0, 1) from the top 53 bits of one draw. The standard
/// distributions are implementation-defined, so results would differ between
/// standard libraries; these helpers make every sampled sequence a pure
/// function of the mt19937_64 state.
inline double uniform_double(std::mt19937_64& g) {
    return double(g() >> 11) * 0x1.0p-53;
}

/// Uniform double in [lo, hi).
inline double uniform_range(std::mt19937_64& g, double lo, double hi) {
    return lo + (hi - lo) * uniform_double(g);
}

/// Uniform integer in [0, n), n >= 1, by rejection (no modulo bias).
inline std::int64_t uniform_below(std::mt19937_64& g, std::int64_t n) {
    const std::uint64_t un = std::uint64_t(n);
    const std::uint64_t rem = (~un + 1) % un;  // 2^64 mod n
    std::uint64_t r = g();
    while (r < rem)
        r = g();
    return std::int64_t((r - rem) % un);
}

/// Standard normal via Box-Muller, cosine branch only: every call consumes
/// exactly two draws, so sequences are reproducible with no hidden state.
inline double normal_sample(std::mt19937_64& g) {
    const double u1 = (double(g() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double u2 = uniform_double(g);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace longiseg
