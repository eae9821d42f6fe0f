#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace atsg {

/// Portable pseudo-random source.
///
/// Raw bits come from std::mt19937_64, whose output sequence is fixed by the
/// standard. The conversions below are written out explicitly because the
/// standard distributions are implementation-defined; together they make every
/// seeded stream byte-reproducible across platforms and compilers:
///   uniform()      = (bits >> 11) * 2^-53                 in [0, 1)
///   uniform_int(n) = rejection sampling on the top bits  in [0, n)
///   normal()       = Box-Muller on two uniforms, cached second deviate
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n) {
    // Largest multiple of n that fits; reject the tail to stay unbiased.
    const std::uint64_t limit = (~std::uint64_t{0} / n) * n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Derives an independent child seed; used to give sub-tasks their own streams.
  std::uint64_t fork_seed() { return engine_() ^ 0x9E3779B97F4A7C15ULL; }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace atsg
