#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "crnet/tensor.hpp"

namespace crnet {

// Differentiable primitives. Image tensors are laid out [B, C, H, W] with the
// width axis innermost. Every operation rejects mixed dtypes.

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

// Cross-correlation, weight [Cout, Cin/groups, kh, kw], optional bias [Cout].
// groups == Cin with Cout == Cin is the depthwise case. Output extent is
// (H + 2*padding - kh) / stride + 1. Single-threaded results are bit-identical
// to multi-threaded ones: every output (and gradient) element is owned by one
// worker and reduced in a fixed order.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias = {},
              Conv2dOptions options = {});

// Non-overlapping-friendly pooling. H and W must be divisible by `stride`.
// avg_pool2d with kernel == stride == 2 sums pairwise so a constant window
// averages back to the same constant exactly.
Tensor avg_pool2d(const Tensor& input, int kernel = 2, int stride = 2);
// Gradient goes to the first maximum in row-major window order.
Tensor max_pool2d(const Tensor& input, int kernel = 2, int stride = 2);

// Bilinear resize with the align-corners = false convention: output pixel i
// samples source coordinate (i + 0.5) * in / out - 0.5, clamped to the valid
// range. Interpolation is evaluated as a + t * (b - a), so constant inputs are
// reproduced exactly.
Tensor bilinear_upsample(const Tensor& input, std::int64_t out_h, std::int64_t out_w);

// [B, C, H, W] -> [B, C, 1, 1]
Tensor global_avg_pool(const Tensor& input);

// Broadcasting arithmetic (numpy rules, trailing axes aligned).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double s);
Tensor mul_scalar(const Tensor& x, double s);
Tensor neg(const Tensor& x);
// x^p for x > 0; returns 0 with zero gradient for x <= 0.
Tensor pow_scalar(const Tensor& x, double p);
Tensor abs(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
// max(x, lo); gradient 1 where x > lo, else 0.
Tensor clamp_min(const Tensor& x, double lo);
Tensor sigmoid(const Tensor& x);

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))),
// with sqrt(2/pi) = 0.7978845608028654.
Tensor gelu(const Tensor& x);

// Full reductions to a 0-d tensor.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor narrow(const Tensor& x, int axis, std::int64_t start, std::int64_t length);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, int axis0, int axis1);

// out[i] = x[index[i]] for a flat index table; the gradient scatters back.
Tensor gather_flat(const Tensor& x, Shape out_shape, std::shared_ptr<const std::vector<std::int64_t>> index);

// [..., M, K] x [..., K, N] -> [..., M, N]; leading axes must match, or `b`
// may be 2-D and is then shared by every batch entry.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor softmax(const Tensor& x, int axis);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// Threads used by the convolution kernels. Reads CRNET_THREADS the first time
// it is called; `set_num_threads` overrides it.
int num_threads();
void set_num_threads(int n);

}  // namespace crnet
