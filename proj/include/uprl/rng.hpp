// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace uprl {

// Deterministic counter-based generator: splitmix64 evaluated on an
// incrementing counter. There is no global RNG anywhere in the project;
// every component derives its own stream from an explicit seed plus a
// label, so a run is reproducible from its seeds alone.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) noexcept : seed_(seed) {}

  // Independent stream addressed by (seed, label). Does not advance *this.
  Rng derived(std::string_view label) const noexcept {
    return Rng(mix(seed_ ^ fnv1a(label)));
  }
  Rng derived(std::uint64_t salt) const noexcept {
    return Rng(mix(seed_ ^ mix(salt + 0x9E3779B97F4A7C15ULL)));
  }

  std::uint64_t next_u64() noexcept {
    return mix(seed_ + 0x9E3779B97F4A7C15ULL * ++counter_);
  }

  // [0, 1), 53-bit resolution.
  double uniform01() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // [0, bound), bound >= 1. Lemire reduction: fixed consumption, no rejection loop.
  std::uint32_t uniform_below(std::uint32_t bound) noexcept {
    return static_cast<std::uint32_t>(
        (static_cast<unsigned __int128>(next_u64()) * bound) >> 64);
  }

  // Box-Muller; consumes exactly two draws per call, no cached spare.
  double gaussian() noexcept {
    const double u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log1p(-u1));
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }
  double gaussian(double mean, double stddev) noexcept {
    return mean + stddev * gaussian();
  }

  template <class T>
  void shuffle(std::vector<T>& v) noexcept {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = uniform_below(static_cast<std::uint32_t>(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t mix(std::uint64_t z) noexcept {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
  }
  static std::uint64_t fnv1a(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001B3ULL;
    }
    return h;
  }

  std::uint64_t seed_;
  std::uint64_t counter_{0};
};

}  // namespace uprl
