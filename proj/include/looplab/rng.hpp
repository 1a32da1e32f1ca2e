#pragma once

#include <array>
#include <cstdint>

namespace looplab {

/// xoshiro256** seeded through splitmix64.
///
/// All distributions are implemented here rather than through <random> so that
/// a seed produces the same stream with every standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  /// Independent stream keyed by (seed, a, b). Used for per-sample substreams
  /// so that serial and parallel loops draw identical numbers.
  static Rng substream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer on the closed range [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  /// Standard normal via Box-Muller.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::array<std::uint64_t, 4> s_{};
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace looplab
