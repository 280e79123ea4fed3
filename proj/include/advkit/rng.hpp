#pragma once

#include <cstdint>
#include <random>

namespace advkit {

/// Seeded random stream with platform-independent draws.
///
/// The standard distributions are implementation-defined, so every draw here
/// is derived directly from the raw 64-bit engine output. Two streams built
/// from the same seed produce the same sequence on every toolchain.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Stream for `(seed, index, purpose)`; independent of call order elsewhere.
  static Rng derive(std::uint64_t seed, std::uint64_t index, std::uint64_t purpose = 0);

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer on the closed range [lo, hi] (rejection sampling, unbiased).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  /// Standard normal via Box-Muller (one value per call, the pair is not cached).
  double normal();

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
};

/// SplitMix64 finalizer; used to mix seeds into independent stream seeds.
std::uint64_t mix64(std::uint64_t x);

}  // namespace advkit
