#pragma once

#include <cstdint>
#include <span>
#include <utility>

namespace diet::num {

/// Deterministic PRNG: xoshiro256** (Blackman & Vigna), state seeded by four
/// successive SplitMix64 outputs of the 64-bit seed. All derived draws
/// (uniform reals, bounded integers, normals, shuffles) are defined here
/// rather than through <random> distributions, whose algorithms are
/// implementation-defined, so a seed yields the same stream on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform();

  /// Uniform integer in [0, bound); bound must be positive. Lemire's
  /// multiply-shift with rejection, so the result is exactly unbiased.
  std::uint64_t below(std::uint64_t bound);

  /// Standard normal via the Box-Muller transform; the second variate of each
  /// pair is cached.
  double normal();

  template <typename T>
  void shuffle(std::span<T> values) {
    // Fisher-Yates, high index down.
    for (std::size_t i = values.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(values[i - 1], values[j]);
    }
  }

  /// Independent child stream; derived deterministically from this stream.
  Rng fork();

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace diet::num
