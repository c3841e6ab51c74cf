#pragma once

#include <cstdint>
#include <random>

namespace racmf {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent child seeds from a parent.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t stream) noexcept {
    return mix_seed(mix_seed(parent) ^ mix_seed(stream + 0x632BE59BD9B4E019ull));
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline double uniform(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline float standard_normal(Rng& rng) { return std::normal_distribution<float>(0.0f, 1.0f)(rng); }

}  // namespace racmf
