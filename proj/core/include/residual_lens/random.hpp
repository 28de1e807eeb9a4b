#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>

namespace residual_lens {

// Seeded generator whose derived variates are identical on every platform.
// std::mt19937_64's bit stream is fully specified; the standard distribution
// adaptors are not, so the conversions are done here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal by Box-Muller; the second variate is discarded so the
  // stream position depends only on the number of calls.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

  // Fills `out` with a uniformly distributed unit vector.
  void unit_vector(std::span<double> out) {
    double n2 = 0.0;
    while (n2 == 0.0) {
      n2 = 0.0;
      for (double& v : out) {
        v = normal();
        n2 += v * v;
      }
    }
    const double inv = 1.0 / std::sqrt(n2);
    for (double& v : out) v *= inv;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace residual_lens
