#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "crnet/ops.hpp"
#include "crnet/rng.hpp"
#include "crnet/tensor.hpp"

namespace crnet::testing {

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double worst = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a.value(i) - b.value(i)));
  return worst;
}

// sum(w * y) for a fixed random w: a scalar probe whose gradient is not
// degenerate the way plain sum() can be.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor w = random_uniform(y.shape(), -1.0, 1.0, rng, y.dtype());
  return sum(mul(y, w));
}

// Values with magnitude in [lo, hi] and random sign, away from kinks at 0.
inline Tensor away_from_zero(Shape shape, double lo, double hi, Rng& rng, DType dtype = DType::f64) {
  const auto n = static_cast<std::size_t>(numel(shape));
  std::vector<double> v(n);
  for (auto& x : v) x = (rng.coin() ? 1.0 : -1.0) * rng.uniform(lo, hi);
  Tensor t = Tensor::from(std::move(shape), std::move(v));
  return t.to(dtype);
}

}  // namespace crnet::testing
