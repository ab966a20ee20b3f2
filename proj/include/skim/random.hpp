// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

namespace skim {

/// xoshiro256** seeded through splitmix64. Every stochastic component in the
/// project draws from its own instance so sequences depend only on the seed.
///
/// - uniform(): top 53 bits of next_u64() scaled by 2^-53, range [0, 1)
/// - normal(): Box-Muller on (u1, u2) with u1 in (0, 1]; the sine branch is
///   cached and returned by the following call
/// - below(n): Lemire's multiply-shift with rejection, unbiased
class Rng {
 public:
  explicit Rng(std::uint64_t seed) noexcept;

  std::uint64_t next_u64() noexcept;
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  double normal() noexcept;
  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }
  bool bernoulli(double p) noexcept { return uniform() < p; }
  std::uint64_t below(std::uint64_t n) noexcept;

 private:
  std::array<std::uint64_t, 4> s_{};
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace skim
