#pragma once

// Branch-free polynomial exp/log/sin/cos kernels plus the sigmoid used for
// utility gating.  These exist because the gating path evaluates a sigmoid per
// weight per step and std::exp is a scalar libm call the vectorizer cannot
// touch; the kernels below keep relative error under ~2e-14 (tested against
// libm in the unit suite) and contain no data-dependent branches, so gcc
// vectorizes loops over them.

#include <cmath>
#include <cstdint>
#include <cstring>

namespace upgd {
namespace fastmath {

namespace detail {
inline double to_double_bits(uint64_t b) {
    double d;
    std::memcpy(&d, &b, sizeof d);
    return d;
}
inline uint64_t to_bits(double d) {
    uint64_t b;
    std::memcpy(&b, &d, sizeof b);
    return b;
}
} // namespace detail

// exp(x), arguments clamped to [-745, 705] (results saturate there in double
// for every use in this library).  Range reduction x = k*ln2 + r with
// |r| <= ln2/2, degree-12 Taylor on r, 2^k patched onto the exponent bits.
inline double exp(double x) {
    constexpr double log2e  = 1.4426950408889634074;
    constexpr double ln2_hi = 6.93147180369123816490e-01;
    constexpr double ln2_lo = 1.90821492927058770002e-10;
    x = x < 705.0 ? x : 705.0;
    x = x > -745.0 ? x : -745.0;
    // Round to nearest via the 2^52 magic constant; |x * log2e| < 2^51 here.
    // Plain add/sub so the surrounding loop stays vectorizable.
    constexpr double round_magic = 6755399441055744.0;
    double kd = (x * log2e + round_magic) - round_magic;
    double r = (x - kd * ln2_hi) - kd * ln2_lo;
    // r^13/13! < 2e-16 at |r| = ln2/2.
    double p = 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    // 2^k via exponent arithmetic; k in [-1075, 1018] keeps this in range
    // because p is within [2^-1, 2^1].
    uint64_t bits = detail::to_bits(p) + (static_cast<uint64_t>(static_cast<int64_t>(kd)) << 52);
    return detail::to_double_bits(bits);
}

// Logistic function, exact 0.5 at 0, saturating smoothly at the extremes.
inline double sigmoid(double x) {
    x = x < 40.0 ? x : 40.0;
    x = x > -40.0 ? x : -40.0;
    return 1.0 / (1.0 + fastmath::exp(-x));
}

// ln(u) for u in (0, 1].  Mantissa normalized to [1/sqrt2, sqrt2), atanh
// series in s = (m-1)/(m+1).  Absolute error ~1e-14; used for the Box-Muller
// radius where that is far below the sampler's statistical resolution.
inline double log(double u) {
    constexpr double ln2 = 6.93147180559945286227e-01;
    constexpr double sqrt2 = 1.4142135623730951;
    uint64_t bits = detail::to_bits(u);
    double e = static_cast<double>(static_cast<int64_t>((bits >> 52) & 0x7ff) - 1023);
    double m = detail::to_double_bits((bits & 0xfffffffffffffull) | 0x3ff0000000000000ull);
    double adj = m > sqrt2 ? 1.0 : 0.0;
    m = m > sqrt2 ? m * 0.5 : m;
    e += adj;
    double s = (m - 1.0) / (m + 1.0);
    double s2 = s * s;
    double p = 2.0 / 17.0;
    p = p * s2 + 2.0 / 15.0;
    p = p * s2 + 2.0 / 13.0;
    p = p * s2 + 2.0 / 11.0;
    p = p * s2 + 2.0 / 9.0;
    p = p * s2 + 2.0 / 7.0;
    p = p * s2 + 2.0 / 5.0;
    p = p * s2 + 2.0 / 3.0;
    p = p * s2 + 2.0;
    return e * ln2 + p * s;
}

namespace detail {
// sin/cos kernels on [0, pi/2), used with quadrant folding below.
inline double sin_kernel(double x) {
    double x2 = x * x;
    double p = -1.0 / 121645100408832000.0;      // 1/19!
    p = p * x2 + 1.0 / 355687428096000.0;        // 1/17!
    p = p * x2 - 1.0 / 1307674368000.0;          // 1/15!
    p = p * x2 + 1.0 / 6227020800.0;             // 1/13!
    p = p * x2 - 1.0 / 39916800.0;
    p = p * x2 + 1.0 / 362880.0;
    p = p * x2 - 1.0 / 5040.0;
    p = p * x2 + 1.0 / 120.0;
    p = p * x2 - 1.0 / 6.0;
    p = p * x2 + 1.0;
    return p * x;
}
inline double cos_kernel(double x) {
    double x2 = x * x;
    double p = 1.0 / 2432902008176640000.0;      // 1/20!
    p = p * x2 - 1.0 / 6402373705728000.0;       // 1/18!
    p = p * x2 + 1.0 / 20922789888000.0;         // 1/16!
    p = p * x2 - 1.0 / 87178291200.0;            // 1/14!
    p = p * x2 + 1.0 / 479001600.0;
    p = p * x2 - 1.0 / 3628800.0;
    p = p * x2 + 1.0 / 40320.0;
    p = p * x2 - 1.0 / 720.0;
    p = p * x2 + 1.0 / 24.0;
    p = p * x2 - 0.5;
    return p * x2 + 1.0;
}
} // namespace detail

// sin and cos of 2*pi*u for u in [0, 1), evaluated together, branch-free.
inline void sincos_2pi(double u, double& s, double& c) {
    constexpr double half_pi = 1.57079632679489661923;
    double t = 4.0 * u;                     // [0, 4)
    int64_t j = static_cast<int64_t>(t);    // trunc == floor for t >= 0
    double jd = static_cast<double>(j);
    double psi = (t - jd) * half_pi;        // [0, pi/2)
    double sk = detail::sin_kernel(psi);
    double ck = detail::cos_kernel(psi);
    // quadrant j: (sin, cos) = (sk,ck), (ck,-sk), (-sk,-ck), (-ck,sk)
    bool odd = (j & 1) != 0;
    double ss = odd ? ck : sk;
    double cc = odd ? sk : ck;
    double ssign = j >= 2 ? -1.0 : 1.0;
    double csign = (j == 1 || j == 2) ? -1.0 : 1.0;
    s = ssign * ss;
    c = csign * cc;
}

} // namespace fastmath
} // namespace upgd
