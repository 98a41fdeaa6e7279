#include "crnet/rng.hpp"

#include <cmath>
#include <numbers>

namespace crnet {

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (hi <= lo) return lo;
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<std::int64_t>(engine_() % span);
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t hash_string(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Tensor random_uniform(Shape shape, double lo, double hi, Rng& rng, DType dtype) {
  const auto n = static_cast<std::size_t>(numel(shape));
  Buffer b(dtype, n);
  for (std::size_t i = 0; i < n; ++i) b.set(i, rng.uniform(lo, hi));
  return Tensor::from(std::move(shape), std::move(b));
}

Tensor random_normal(Shape shape, double stddev, Rng& rng, DType dtype) {
  const auto n = static_cast<std::size_t>(numel(shape));
  Buffer b(dtype, n);
  for (std::size_t i = 0; i < n; ++i) b.set(i, stddev * rng.normal());
  return Tensor::from(std::move(shape), std::move(b));
}

}  // namespace crnet
