#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "spectralx/common.hpp"

namespace spectralx {

// Deterministic RNG threaded explicitly through every stochastic op.
// mt19937_64 gives a standard-mandated bit stream; the float/normal
// conversions are spelled out here because the std::*_distribution
// algorithms are implementation-defined and runs must be reproducible.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random mantissa bits.
  real uniform() { return static_cast<real>(gen_() >> 11) * 0x1.0p-53; }

  real uniform(real lo, real hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n).
  int64_t below(int64_t n) {
    if (n <= 0) throw ValueError("Rng::below: n must be positive");
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return static_cast<int64_t>(x % un);
  }

  // Standard normal via Box-Muller; pairs are cached.
  real normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    real u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const real u2 = uniform();
    const real m = std::sqrt(-2.0 * std::log(u1));
    const real a = 6.283185307179586476925286766559 * u2;
    spare_ = m * std::sin(a);
    have_spare_ = true;
    return m * std::cos(a);
  }

  real normal(real mean, real stdev) { return mean + stdev * normal(); }

  // Independent sub-stream for a named component of a run.
  static Rng substream(uint64_t seed, uint64_t stream) {
    return Rng(seed * 0x9E3779B97F4A7C15ull + stream + 1);
  }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  real spare_ = 0.0;
};

// Fisher-Yates shuffle driven by Rng::below, for reproducible epoch orders.
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
    std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(rng.below(i + 1))]);
  }
}

}  // namespace spectralx
