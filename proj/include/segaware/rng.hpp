#pragma once

#include <cstdint>

namespace segaware {

// splitmix64 generator. Chosen over std::mt19937_64 because the standard does
// not pin down the floating-point distributions, and checkpoints/datasets must
// be byte-identical across platforms for a given seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform in [-bound, +bound).
  double uniform_pm(double bound) { return uniform(-bound, bound); }

  // Standard normal via Box-Muller; consumes two uniforms per pair.
  double normal();

  // Uniform integer in [0, n). Modulo reduction; the bias at 64 bits is
  // irrelevant here, reproducibility is not.
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  // Independent stream for a derived task (scene index, stage id, ...).
  Rng fork(std::uint64_t index) const { return Rng(state_ ^ (0xA5A5A5A5DEADBEEFULL + index * 0x9E3779B97F4A7C15ULL)); }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace segaware
