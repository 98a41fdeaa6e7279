#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "crnet/tensor.hpp"

namespace crnet {

// Seeded generator whose derived draws are identical on every platform.
// std::mt19937_64's raw output is fully specified by the standard; the
// std::*_distribution adaptors are not, so the conversions live here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  // Standard normal via Box-Muller; one draw per call.
  double normal();
  bool coin() { return (engine_() >> 63) != 0; }

 private:
  std::mt19937_64 engine_;
};

// SplitMix64 finalizer: decorrelates (seed, stream) pairs into a new seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);
// FNV-1a.
std::uint64_t hash_string(std::string_view text);

Tensor random_uniform(Shape shape, double lo, double hi, Rng& rng, DType dtype = DType::f32);
Tensor random_normal(Shape shape, double stddev, Rng& rng, DType dtype = DType::f32);

}  // namespace crnet
