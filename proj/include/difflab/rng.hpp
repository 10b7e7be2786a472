// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string_view>

namespace difflab {

namespace detail {

constexpr std::uint64_t splitmix64_next(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t mix64(std::uint64_t x) {
  std::uint64_t s = x;
  return splitmix64_next(s);
}

constexpr std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace detail

/// Counter-keyed random stream.
///
/// A stream is fully determined by (seed, purpose tag, draw index, sub-index),
/// so Monte-Carlo shards can be evaluated in any order or on any worker and
/// still reproduce the same draws. Two estimators that share a tag share their
/// draws (common random numbers); distinct tags give independent streams.
///
/// The generator is xoshiro256++ seeded through splitmix64.
class Stream {
 public:
  using result_type = std::uint64_t;

  Stream(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0,
         std::uint64_t sub = 0) {
    std::uint64_t key = detail::mix64(seed);
    key = detail::mix64(key ^ detail::fnv1a(tag));
    key = detail::mix64(key ^ index);
    key = detail::mix64(key ^ (sub * 0xd1b54a32d192ed03ULL));
    for (auto& w : state_) w = detail::splitmix64_next(key);
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    const std::uint64_t result = detail::rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = detail::rotl(state_[3], 45);
    return result;
  }

  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  double normal() { return normal_(*this); }

  double rademacher() { return ((*this)() >> 63) ? 1.0 : -1.0; }

  /// Index drawn from an unnormalized cumulative table (last entry = total mass).
  std::size_t categorical_cdf(std::span<const double> cdf) {
    const double u = uniform() * cdf.back();
    std::size_t lo = 0, hi = cdf.size() - 1;
    while (lo < hi) {
      const std::size_t mid = (lo + hi) / 2;
      if (cdf[mid] > u) hi = mid; else lo = mid + 1;
    }
    return lo;
  }

 private:
  std::uint64_t state_[4]{};
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace difflab
