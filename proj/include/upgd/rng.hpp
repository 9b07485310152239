#pragma once

// Deterministic random number generation.  Everything stochastic in the
// library flows from these generators so that a run is a pure function of its
// seed, independent of the standard library's distribution implementations.

#include <cstdint>
#include <cstddef>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#include "upgd/fastmath.hpp"

namespace upgd {

// SplitMix64, used for seeding and for deriving independent sub-seeds.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Stable sub-seed for (seed, index) pairs, e.g. the permutation of task k.
inline uint64_t derive_seed(uint64_t seed, uint64_t index) {
    uint64_t s = seed ^ (0x9e3779b97f4a7c15ull + index * 0xbf58476d1ce4e5b9ull);
    splitmix64(s);
    return splitmix64(s);
}

// xoshiro256++ core generator.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) {
        uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
    }

    uint64_t next_u64() {
        uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform double in [0, 1), 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Uniform integer in [0, n).  Multiply-shift; bias is at most n/2^64.
    uint64_t next_below(uint64_t n) {
        return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    // Standard normal via Box-Muller; second value of each pair is cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
        double u2 = next_double();
        double r = std::sqrt(-2.0 * fastmath::log(u1));
        double s, c;
        fastmath::sincos_2pi(u2, s, c);
        spare_ = r * s;
        have_spare_ = true;
        return r * c;
    }

    // Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4];
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// Bulk standard-normal source for per-weight perturbations.  Eight
// interleaved xoshiro256++ streams advance together, with AVX-512 when the
// target has it and a scalar loop otherwise; both paths produce the same
// lane-major word stream, so output is a fixed function of the seed on any
// machine.  The Box-Muller transform then runs over contiguous buffers.
class NoiseSource {
  public:
    static constexpr size_t kLanes = 8;

    explicit NoiseSource(uint64_t seed = 0) {
        uint64_t sm = seed;
        for (size_t k = 0; k < kLanes; ++k)
            for (size_t j = 0; j < 4; ++j) state_[j][k] = splitmix64(sm);
    }

    // dst[0..n) <- iid N(0, 1).  Each internal block of P uniform pairs
    // yields 2P values laid out cosine-half then sine-half.
    void fill(double* dst, size_t n) {
        constexpr size_t kBlock = 512;  // pairs per batch
        uint64_t raw1[kBlock], raw2[kBlock];
        double spill[2 * kBlock];
        size_t produced = 0;
        while (produced < n) {
            size_t pairs = (n - produced + 1) / 2;
            if (pairs > kBlock) pairs = kBlock;
            size_t rounded = (pairs + kLanes - 1) & ~(kLanes - 1);
            fill_raw(raw1, rounded);
            fill_raw(raw2, rounded);
            size_t take = 2 * pairs;
            if (take > n - produced) take = n - produced;
            // Full blocks land directly in the caller's buffer; only a final
            // odd element detours through the spill so the discarded sine
            // half never touches dst.
            double* out = take == 2 * pairs ? dst + produced : spill;
            for (size_t i = 0; i < pairs; ++i) {
                double u1 = static_cast<double>((raw1[i] >> 11) + 1) * 0x1.0p-53;  // (0, 1]
                double u2 = static_cast<double>(raw2[i] >> 11) * 0x1.0p-53;
                double r = std::sqrt(-2.0 * fastmath::log(u1));
                double s, c;
                fastmath::sincos_2pi(u2, s, c);
                out[i] = r * c;
                out[pairs + i] = r * s;
            }
            if (out == spill)
                for (size_t i = 0; i < take; ++i) dst[produced + i] = spill[i];
            produced += take;
        }
    }

  private:
    // out[0..count) <- raw generator words, count a multiple of kLanes.
    void fill_raw(uint64_t* out, size_t count) {
#if defined(__AVX512F__)
        __m512i s0 = _mm512_loadu_si512(state_[0]);
        __m512i s1 = _mm512_loadu_si512(state_[1]);
        __m512i s2 = _mm512_loadu_si512(state_[2]);
        __m512i s3 = _mm512_loadu_si512(state_[3]);
        for (size_t i = 0; i < count; i += kLanes) {
            __m512i r = _mm512_add_epi64(_mm512_rol_epi64(_mm512_add_epi64(s0, s3), 23), s0);
            __m512i t = _mm512_slli_epi64(s1, 17);
            s2 = _mm512_xor_si512(s2, s0);
            s3 = _mm512_xor_si512(s3, s1);
            s1 = _mm512_xor_si512(s1, s2);
            s0 = _mm512_xor_si512(s0, s3);
            s2 = _mm512_xor_si512(s2, t);
            s3 = _mm512_rol_epi64(s3, 45);
            _mm512_storeu_si512(out + i, r);
        }
        _mm512_storeu_si512(state_[0], s0);
        _mm512_storeu_si512(state_[1], s1);
        _mm512_storeu_si512(state_[2], s2);
        _mm512_storeu_si512(state_[3], s3);
#else
        for (size_t i = 0; i < count; i += kLanes) {
            for (size_t k = 0; k < kLanes; ++k) {
                uint64_t r = rotl(state_[0][k] + state_[3][k], 23) + state_[0][k];
                uint64_t t = state_[1][k] << 17;
                state_[2][k] ^= state_[0][k];
                state_[3][k] ^= state_[1][k];
                state_[1][k] ^= state_[2][k];
                state_[0][k] ^= state_[3][k];
                state_[2][k] ^= t;
                state_[3][k] = rotl(state_[3][k], 45);
                out[i + k] = r;
            }
        }
#endif
    }

    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t state_[4][kLanes];
};

} // namespace upgd
