#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace xaqa {

// Deterministic RNG. std::mt19937_64 output is fully specified, and all
// bounded sampling below is implemented by hand, so identical seeds give
// identical streams on every platform and standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finalizer over (seed, stream); decorrelates per-example streams.
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t u64() { return engine_(); }

  // Uniform in [0, n). n must be > 0. Modulo bias is irrelevant at the
  // ranges used here (n << 2^64) and keeps the stream portable.
  std::uint64_t index(std::uint64_t n) { return u64() % n; }

  // Uniform integer in [lo, hi] inclusive.
  long range(long lo, long hi) { return lo + static_cast<long>(index(static_cast<std::uint64_t>(hi - lo + 1))); }

  // Uniform double in [0, 1).
  double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; caches the second variate.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Bernoulli with probability p.
  bool chance(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace xaqa
