#include "crnet/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "crnet/autograd.hpp"
#include "crnet/detail/dispatch.hpp"
#include "crnet/detail/elementwise.hpp"
#include "crnet/error.hpp"

namespace crnet {

using detail::dispatch;

namespace {

std::atomic<int> g_threads{0};

int env_threads() {
  if (const char* env = std::getenv("CRNET_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

// Work below this many multiply-adds is not worth waking a thread team for.
constexpr std::int64_t kParallelThreshold = 1 << 15;

template <class Body>
void parallel_for(std::int64_t count, std::int64_t work_per_item, Body body) {
#ifdef _OPENMP
  const int threads = num_threads();
  if (threads > 1 && count > 1 && count * work_per_item >= kParallelThreshold) {
#pragma omp parallel for schedule(static) num_threads(threads)
    for (std::int64_t i = 0; i < count; ++i) body(i);
    return;
  }
#else
  (void)work_per_item;
#endif
  for (std::int64_t i = 0; i < count; ++i) body(i);
}

void require_ndim(const Tensor& x, std::size_t ndim, const char* op) {
  if (!x.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
  if (x.ndim() != ndim) {
    throw ShapeError(std::string(op) + ": expected " + std::to_string(ndim) + "-d tensor, got " +
                     to_string(x.shape()));
  }
}

const char* axis_name(std::size_t axis) {
  static const char* names[] = {"batch", "channel", "height", "width"};
  return axis < 4 ? names[axis] : "axis";
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return -floor_div(-a, b); }

// Range of output columns whose tap `k` lands inside [0, in_extent).
std::pair<std::int64_t, std::int64_t> valid_range(std::int64_t in_extent, std::int64_t out_extent, int stride,
                                                  int padding, std::int64_t k) {
  std::int64_t lo = std::max<std::int64_t>(0, ceil_div(padding - k, stride));
  std::int64_t hi = std::min<std::int64_t>(out_extent - 1, floor_div(in_extent - 1 + padding - k, stride));
  return {lo, hi};
}

}  // namespace

int num_threads() {
  int n = g_threads.load();
  if (n <= 0) {
    n = env_threads();
    g_threads.store(n);
  }
  return n;
}

void set_num_threads(int n) { g_threads.store(n > 0 ? n : 1); }

// ---------------------------------------------------------------- conv2d

namespace {

struct ConvGeometry {
  std::int64_t batch, cin, h, w, cout, cin_g, cout_g, kh, kw, oh, ow;
  int stride, padding, groups;
};

template <class T>
void conv_forward(const ConvGeometry& g, const T* x, const T* wt, const T* bias, T* y) {
  const std::int64_t plane = g.oh * g.ow;
  parallel_for(g.batch * g.cout, plane * g.cin_g * g.kh * g.kw, [&](std::int64_t idx) {
    const std::int64_t b = idx / g.cout;
    const std::int64_t oc = idx % g.cout;
    const std::int64_t grp = oc / g.cout_g;
    T* out = y + idx * plane;
    std::fill(out, out + plane, bias ? bias[oc] : T(0));
    for (std::int64_t icg = 0; icg < g.cin_g; ++icg) {
      const std::int64_t ic = grp * g.cin_g + icg;
      const T* in = x + (b * g.cin + ic) * g.h * g.w;
      const T* wk = wt + (oc * g.cin_g + icg) * g.kh * g.kw;
      for (std::int64_t ky = 0; ky < g.kh; ++ky) {
        const auto [oy_lo, oy_hi] = valid_range(g.h, g.oh, g.stride, g.padding, ky);
        for (std::int64_t kx = 0; kx < g.kw; ++kx) {
          const T wv = wk[ky * g.kw + kx];
          const auto [ox_lo, ox_hi] = valid_range(g.w, g.ow, g.stride, g.padding, kx);
          for (std::int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
            const T* irow = in + (oy * g.stride - g.padding + ky) * g.w;
            T* orow = out + oy * g.ow;
            if (g.stride == 1) {
              const T* src = irow - g.padding + kx;
              for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox) orow[ox] += wv * src[ox];
            } else {
              for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox) {
                orow[ox] += wv * irow[ox * g.stride - g.padding + kx];
              }
            }
          }
        }
      }
    }
  });
}

template <class T>
void conv_backward_input(const ConvGeometry& g, const T* gy, const T* wt, T* gx) {
  const std::int64_t plane = g.oh * g.ow;
  parallel_for(g.batch * g.cin, plane * g.cout_g * g.kh * g.kw, [&](std::int64_t idx) {
    const std::int64_t b = idx / g.cin;
    const std::int64_t ic = idx % g.cin;
    const std::int64_t grp = ic / g.cin_g;
    const std::int64_t icg = ic % g.cin_g;
    T* dst = gx + idx * g.h * g.w;
    for (std::int64_t ocg = 0; ocg < g.cout_g; ++ocg) {
      const std::int64_t oc = grp * g.cout_g + ocg;
      const T* go = gy + (b * g.cout + oc) * plane;
      const T* wk = wt + (oc * g.cin_g + icg) * g.kh * g.kw;
      for (std::int64_t ky = 0; ky < g.kh; ++ky) {
        const auto [oy_lo, oy_hi] = valid_range(g.h, g.oh, g.stride, g.padding, ky);
        for (std::int64_t kx = 0; kx < g.kw; ++kx) {
          const T wv = wk[ky * g.kw + kx];
          const auto [ox_lo, ox_hi] = valid_range(g.w, g.ow, g.stride, g.padding, kx);
          for (std::int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
            T* drow = dst + (oy * g.stride - g.padding + ky) * g.w;
            const T* grow = go + oy * g.ow;
            if (g.stride == 1) {
              T* d = drow - g.padding + kx;
              for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox) d[ox] += wv * grow[ox];
            } else {
              for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox) {
                drow[ox * g.stride - g.padding + kx] += wv * grow[ox];
              }
            }
          }
        }
      }
    }
  });
}

template <class T>
void conv_backward_weight(const ConvGeometry& g, const T* gy, const T* x, T* gw, T* gb) {
  const std::int64_t plane = g.oh * g.ow;
  parallel_for(g.cout, g.batch * plane * g.cin_g * g.kh * g.kw, [&](std::int64_t oc) {
    const std::int64_t grp = oc / g.cout_g;
    if (gb) {
      T acc = 0;
      for (std::int64_t b = 0; b < g.batch; ++b) {
        const T* go = gy + (b * g.cout + oc) * plane;
        for (std::int64_t i = 0; i < plane; ++i) acc += go[i];
      }
      gb[oc] += acc;
    }
    if (!gw) return;
    for (std::int64_t icg = 0; icg < g.cin_g; ++icg) {
      const std::int64_t ic = grp * g.cin_g + icg;
      T* wk = gw + (oc * g.cin_g + icg) * g.kh * g.kw;
      for (std::int64_t ky = 0; ky < g.kh; ++ky) {
        const auto [oy_lo, oy_hi] = valid_range(g.h, g.oh, g.stride, g.padding, ky);
        for (std::int64_t kx = 0; kx < g.kw; ++kx) {
          const auto [ox_lo, ox_hi] = valid_range(g.w, g.ow, g.stride, g.padding, kx);
          T acc = 0;
          for (std::int64_t b = 0; b < g.batch; ++b) {
            const T* go = gy + (b * g.cout + oc) * plane;
            const T* in = x + (b * g.cin + ic) * g.h * g.w;
            for (std::int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
              const T* irow = in + (oy * g.stride - g.padding + ky) * g.w;
              const T* grow = go + oy * g.ow;
              if (g.stride == 1) {
                const T* src = irow - g.padding + kx;
                for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox) acc += grow[ox] * src[ox];
              } else {
                for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox) {
                  acc += grow[ox] * irow[ox * g.stride - g.padding + kx];
                }
              }
            }
          }
          wk[ky * g.kw + kx] += acc;
        }
      }
    }
  });
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, Conv2dOptions opt) {
  require_ndim(input, 4, "conv2d input");
  require_ndim(weight, 4, "conv2d weight");
  const DType dtype = common_dtype({input, weight, bias}, "conv2d");
  if (opt.stride < 1 || opt.padding < 0 || opt.groups < 1) {
    throw ShapeError("conv2d: invalid stride/padding/groups");
  }
  ConvGeometry g{};
  g.batch = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = weight.dim(0);
  g.cin_g = weight.dim(1);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = opt.stride;
  g.padding = opt.padding;
  g.groups = opt.groups;
  if (g.cin % g.groups != 0) {
    throw ShapeError("conv2d: channel axis of input (" + std::to_string(g.cin) + ") not divisible by groups " +
                     std::to_string(g.groups));
  }
  if (g.cout % g.groups != 0) {
    throw ShapeError("conv2d: output channel axis of weight (" + std::to_string(g.cout) +
                     ") not divisible by groups " + std::to_string(g.groups));
  }
  if (g.cin_g != g.cin / g.groups) {
    throw ShapeError("conv2d: channel axis mismatch, input has " + std::to_string(g.cin) + " channels / " +
                     std::to_string(g.groups) + " groups but weight expects " + std::to_string(g.cin_g));
  }
  if (g.kh % 2 == 0 || g.kw % 2 == 0) {
    throw ShapeError("conv2d: kernel height/width must be odd, got " + to_string(weight.shape()));
  }
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != g.cout)) {
    throw ShapeError("conv2d: bias channel axis " + to_string(bias.shape()) + " does not match " +
                     std::to_string(g.cout) + " output channels");
  }
  g.cout_g = g.cout / g.groups;
  const std::int64_t oh_num = g.h + 2 * g.padding - g.kh;
  const std::int64_t ow_num = g.w + 2 * g.padding - g.kw;
  if (oh_num < 0) throw ShapeError("conv2d: height axis too small for kernel");
  if (ow_num < 0) throw ShapeError("conv2d: width axis too small for kernel");
  g.oh = oh_num / g.stride + 1;
  g.ow = ow_num / g.stride + 1;

  Shape out_shape{g.batch, g.cout, g.oh, g.ow};
  return dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    Buffer out(dtype, static_cast<std::size_t>(numel(out_shape)));
    conv_forward<T>(g, input.data<T>().data(), weight.data<T>().data(),
                    bias.defined() ? bias.data<T>().data() : nullptr, out.view<T>().data());
    auto xdata = input.impl()->data;
    auto wdata = weight.impl()->data;
    return make_result(out_shape, std::move(out), "conv2d", {input, weight, bias},
                       [g, xdata, wdata](const Buffer& gy, std::span<Buffer* const> gin) {
                         const T* gyp = gy.view<T>().data();
                         if (gin[0]) {
                           conv_backward_input<T>(g, gyp, std::as_const(*wdata).view<T>().data(),
                                                  gin[0]->view<T>().data());
                         }
                         T* gw = gin[1] ? gin[1]->view<T>().data() : nullptr;
                         T* gb = gin[2] ? gin[2]->view<T>().data() : nullptr;
                         if (gw || gb) {
                           conv_backward_weight<T>(g, gyp, std::as_const(*xdata).view<T>().data(), gw, gb);
                         }
                       });
  });
}

// ---------------------------------------------------------------- pooling

namespace {

struct PoolGeometry {
  std::int64_t planes, h, w, oh, ow;
  int kernel, stride;
};

PoolGeometry pool_geometry(const Tensor& x, int kernel, int stride, const char* op) {
  require_ndim(x, 4, op);
  if (kernel < 1 || stride < 1) throw ShapeError(std::string(op) + ": kernel and stride must be positive");
  PoolGeometry g{};
  g.planes = x.dim(0) * x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  if (g.h % stride != 0) {
    throw ShapeError(std::string(op) + ": height axis " + std::to_string(g.h) + " not divisible by stride " +
                     std::to_string(stride));
  }
  if (g.w % stride != 0) {
    throw ShapeError(std::string(op) + ": width axis " + std::to_string(g.w) + " not divisible by stride " +
                     std::to_string(stride));
  }
  if (g.h < kernel || g.w < kernel) throw ShapeError(std::string(op) + ": input smaller than kernel");
  g.kernel = kernel;
  g.stride = stride;
  g.oh = (g.h - kernel) / stride + 1;
  g.ow = (g.w - kernel) / stride + 1;
  return g;
}

}  // namespace

Tensor avg_pool2d(const Tensor& x, int kernel, int stride) {
  const PoolGeometry g = pool_geometry(x, kernel, stride, "avg_pool2d");
  Shape out_shape{x.dim(0), x.dim(1), g.oh, g.ow};
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Buffer out(x.dtype(), static_cast<std::size_t>(numel(out_shape)));
    const T* xs = x.data<T>().data();
    T* ys = out.view<T>().data();
    const T inv = T(1) / static_cast<T>(kernel * kernel);
    for (std::int64_t p = 0; p < g.planes; ++p) {
      const T* in = xs + p * g.h * g.w;
      T* o = ys + p * g.oh * g.ow;
      for (std::int64_t oy = 0; oy < g.oh; ++oy) {
        for (std::int64_t ox = 0; ox < g.ow; ++ox) {
          const T* base = in + oy * stride * g.w + ox * stride;
          T acc;
          if (kernel == 2) {
            acc = (base[0] + base[1]) + (base[g.w] + base[g.w + 1]);
          } else {
            acc = 0;
            for (int ky = 0; ky < kernel; ++ky)
              for (int kx = 0; kx < kernel; ++kx) acc += base[ky * g.w + kx];
          }
          o[oy * g.ow + ox] = acc * inv;
        }
      }
    }
    return make_result(out_shape, std::move(out), "avg_pool2d", {x},
                       [g, inv](const Buffer& gy, std::span<Buffer* const> gin) {
                         if (!gin[0]) return;
                         const T* go = gy.view<T>().data();
                         T* gx = gin[0]->view<T>().data();
                         for (std::int64_t p = 0; p < g.planes; ++p) {
                           for (std::int64_t oy = 0; oy < g.oh; ++oy) {
                             for (std::int64_t ox = 0; ox < g.ow; ++ox) {
                               const T v = go[(p * g.oh + oy) * g.ow + ox] * inv;
                               T* base = gx + p * g.h * g.w + oy * g.stride * g.w + ox * g.stride;
                               for (int ky = 0; ky < g.kernel; ++ky)
                                 for (int kx = 0; kx < g.kernel; ++kx) base[ky * g.w + kx] += v;
                             }
                           }
                         }
                       });
  });
}

Tensor max_pool2d(const Tensor& x, int kernel, int stride) {
  const PoolGeometry g = pool_geometry(x, kernel, stride, "max_pool2d");
  Shape out_shape{x.dim(0), x.dim(1), g.oh, g.ow};
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto n = static_cast<std::size_t>(numel(out_shape));
    Buffer out(x.dtype(), n);
    auto argmax = std::make_shared<std::vector<std::int64_t>>(n);
    const T* xs = x.data<T>().data();
    T* ys = out.view<T>().data();
    for (std::int64_t p = 0; p < g.planes; ++p) {
      for (std::int64_t oy = 0; oy < g.oh; ++oy) {
        for (std::int64_t ox = 0; ox < g.ow; ++ox) {
          std::int64_t best = p * g.h * g.w + oy * stride * g.w + ox * stride;
          for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
              const std::int64_t at = p * g.h * g.w + (oy * stride + ky) * g.w + ox * stride + kx;
              if (xs[at] > xs[best]) best = at;
            }
          }
          const std::int64_t o = (p * g.oh + oy) * g.ow + ox;
          ys[o] = xs[best];
          (*argmax)[static_cast<std::size_t>(o)] = best;
        }
      }
    }
    return make_result(out_shape, std::move(out), "max_pool2d", {x},
                       [argmax](const Buffer& gy, std::span<Buffer* const> gin) {
                         if (!gin[0]) return;
                         const T* go = gy.view<T>().data();
                         T* gx = gin[0]->view<T>().data();
                         for (std::size_t i = 0; i < argmax->size(); ++i) gx[(*argmax)[i]] += go[i];
                       });
  });
}

// ---------------------------------------------------------------- upsample

namespace {

struct LerpTap {
  std::int64_t i0, i1;
  double t;
};

std::vector<LerpTap> lerp_taps(std::int64_t in, std::int64_t out) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(i)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

Tensor bilinear_upsample(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  require_ndim(x, 4, "bilinear_upsample");
  if (out_h <= 0 || out_w <= 0) throw ShapeError("bilinear_upsample: zero-sized target");
  const std::int64_t h = x.dim(2);
  const std::int64_t w = x.dim(3);
  if (out_h < h) throw ShapeError("bilinear_upsample: target height axis smaller than input");
  if (out_w < w) throw ShapeError("bilinear_upsample: target width axis smaller than input");
  const std::int64_t planes = x.dim(0) * x.dim(1);
  auto ty = std::make_shared<std::vector<LerpTap>>(lerp_taps(h, out_h));
  auto tx = std::make_shared<std::vector<LerpTap>>(lerp_taps(w, out_w));
  Shape out_shape{x.dim(0), x.dim(1), out_h, out_w};
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Buffer out(x.dtype(), static_cast<std::size_t>(numel(out_shape)));
    const T* xs = x.data<T>().data();
    T* ys = out.view<T>().data();
    for (std::int64_t p = 0; p < planes; ++p) {
      const T* in = xs + p * h * w;
      T* o = ys + p * out_h * out_w;
      for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const LerpTap& cy = (*ty)[static_cast<std::size_t>(oy)];
        const T ly = static_cast<T>(cy.t);
        const T* r0 = in + cy.i0 * w;
        const T* r1 = in + cy.i1 * w;
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          const LerpTap& cx = (*tx)[static_cast<std::size_t>(ox)];
          const T lx = static_cast<T>(cx.t);
          const T top = r0[cx.i0] + lx * (r0[cx.i1] - r0[cx.i0]);
          const T bot = r1[cx.i0] + lx * (r1[cx.i1] - r1[cx.i0]);
          o[oy * out_w + ox] = top + ly * (bot - top);
        }
      }
    }
    return make_result(
        out_shape, std::move(out), "bilinear_upsample", {x},
        [ty, tx, planes, h, w, out_h, out_w](const Buffer& gy, std::span<Buffer* const> gin) {
          if (!gin[0]) return;
          const T* go = gy.view<T>().data();
          T* gx = gin[0]->view<T>().data();
          for (std::int64_t p = 0; p < planes; ++p) {
            T* d = gx + p * h * w;
            const T* g = go + p * out_h * out_w;
            for (std::int64_t oy = 0; oy < out_h; ++oy) {
              const LerpTap& cy = (*ty)[static_cast<std::size_t>(oy)];
              const T ly = static_cast<T>(cy.t);
              T* r0 = d + cy.i0 * w;
              T* r1 = d + cy.i1 * w;
              for (std::int64_t ox = 0; ox < out_w; ++ox) {
                const LerpTap& cx = (*tx)[static_cast<std::size_t>(ox)];
                const T lx = static_cast<T>(cx.t);
                const T v = g[oy * out_w + ox];
                const T top = v * (T(1) - ly);
                const T bot = v * ly;
                r0[cx.i0] += top * (T(1) - lx);
                r0[cx.i1] += top * lx;
                r1[cx.i0] += bot * (T(1) - lx);
                r1[cx.i1] += bot * lx;
              }
            }
          }
        });
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require_ndim(x, 4, "global_avg_pool");
  const std::int64_t planes = x.dim(0) * x.dim(1);
  const std::int64_t hw = x.dim(2) * x.dim(3);
  if (hw == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  Shape out_shape{x.dim(0), x.dim(1), 1, 1};
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Buffer out(x.dtype(), static_cast<std::size_t>(planes));
    const T* xs = x.data<T>().data();
    T* ys = out.view<T>().data();
    const T inv = T(1) / static_cast<T>(hw);
    for (std::int64_t p = 0; p < planes; ++p) {
      T acc = 0;
      for (std::int64_t i = 0; i < hw; ++i) acc += xs[p * hw + i];
      ys[p] = acc * inv;
    }
    return make_result(out_shape, std::move(out), "global_avg_pool", {x},
                       [planes, hw, inv](const Buffer& gy, std::span<Buffer* const> gin) {
                         if (!gin[0]) return;
                         const T* go = gy.view<T>().data();
                         T* gx = gin[0]->view<T>().data();
                         for (std::int64_t p = 0; p < planes; ++p) {
                           const T v = go[p] * inv;
                           for (std::int64_t i = 0; i < hw; ++i) gx[p * hw + i] += v;
                         }
                       });
  });
}

// ---------------------------------------------------------------- broadcasting arithmetic

namespace {

enum class BinaryKind { add, sub, mul, div };

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t n = std::max(a.size(), b.size());
  Shape out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::int64_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    const std::int64_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) +
                       " are not broadcast-compatible on axis " + std::to_string(i));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Flat offsets into `src` for every element of `out` under broadcasting.
std::shared_ptr<std::vector<std::int64_t>> broadcast_offsets(const Shape& src, const Shape& out) {
  const std::size_t n = out.size();
  std::vector<std::int64_t> stride(n, 0);
  std::int64_t s = 1;
  for (std::size_t k = 0; k < src.size(); ++k) {
    const std::size_t i = n - 1 - k;
    const std::int64_t d = src[src.size() - 1 - k];
    stride[i] = d == 1 ? 0 : s;
    s *= d;
  }
  const std::int64_t total = numel(out);
  auto offsets = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(total));
  std::vector<std::int64_t> idx(n, 0);
  std::int64_t off = 0;
  for (std::int64_t e = 0; e < total; ++e) {
    (*offsets)[static_cast<std::size_t>(e)] = off;
    for (std::size_t i = n; i-- > 0;) {
      ++idx[i];
      off += stride[i];
      if (idx[i] < out[i]) break;
      off -= stride[i] * idx[i];
      idx[i] = 0;
    }
  }
  return offsets;
}

template <class T>
T binary_apply(BinaryKind k, T a, T b) {
  switch (k) {
    case BinaryKind::add: return a + b;
    case BinaryKind::sub: return a - b;
    case BinaryKind::mul: return a * b;
    case BinaryKind::div: return a / b;
  }
  return T(0);
}

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* op) {
  if (!a.defined() || !b.defined()) throw ShapeError(std::string(op) + ": undefined operand");
  const DType dtype = common_dtype({a, b}, op);
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape(), op);
  const bool same = a.shape() == out_shape && b.shape() == out_shape;
  std::shared_ptr<std::vector<std::int64_t>> oa, ob;
  if (!same) {
    oa = broadcast_offsets(a.shape(), out_shape);
    ob = broadcast_offsets(b.shape(), out_shape);
  }
  return dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    const auto n = static_cast<std::size_t>(numel(out_shape));
    Buffer out(dtype, n);
    const T* as = a.data<T>().data();
    const T* bs = b.data<T>().data();
    T* ys = out.view<T>().data();
    if (same) {
      switch (kind) {
        case BinaryKind::add: for (std::size_t i = 0; i < n; ++i) ys[i] = as[i] + bs[i]; break;
        case BinaryKind::sub: for (std::size_t i = 0; i < n; ++i) ys[i] = as[i] - bs[i]; break;
        case BinaryKind::mul: for (std::size_t i = 0; i < n; ++i) ys[i] = as[i] * bs[i]; break;
        case BinaryKind::div: for (std::size_t i = 0; i < n; ++i) ys[i] = as[i] / bs[i]; break;
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) ys[i] = binary_apply(kind, as[(*oa)[i]], bs[(*ob)[i]]);
    }
    auto adata = a.impl()->data;
    auto bdata = b.impl()->data;
    return make_result(
        out_shape, std::move(out), op, {a, b},
        [kind, adata, bdata, oa, ob, n](const Buffer& gy, std::span<Buffer* const> gin) {
          const T* g = gy.view<T>().data();
          const T* av = std::as_const(*adata).view<T>().data();
          const T* bv = std::as_const(*bdata).view<T>().data();
          auto ia = [&](std::size_t i) { return oa ? (*oa)[i] : static_cast<std::int64_t>(i); };
          auto ib = [&](std::size_t i) { return ob ? (*ob)[i] : static_cast<std::int64_t>(i); };
          if (gin[0]) {
            T* ga = gin[0]->view<T>().data();
            for (std::size_t i = 0; i < n; ++i) {
              T d = 1;
              if (kind == BinaryKind::mul) d = bv[ib(i)];
              if (kind == BinaryKind::div) d = T(1) / bv[ib(i)];
              ga[ia(i)] += g[i] * d;
            }
          }
          if (gin[1]) {
            T* gb = gin[1]->view<T>().data();
            for (std::size_t i = 0; i < n; ++i) {
              T d = 1;
              if (kind == BinaryKind::sub) d = -1;
              if (kind == BinaryKind::mul) d = av[ia(i)];
              if (kind == BinaryKind::div) {
                const T bvv = bv[ib(i)];
                d = -av[ia(i)] / (bvv * bvv);
              }
              gb[ib(i)] += g[i] * d;
            }
          }
        });
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::div, "div"); }

// ---------------------------------------------------------------- unary

Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary_op(
      x, "add_scalar", [s](auto v) { return v + static_cast<decltype(v)>(s); },
      [](auto, auto) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double s) {
  return detail::unary_op(
      x, "mul_scalar", [s](auto v) { return v * static_cast<decltype(v)>(s); },
      [s](auto v, auto) { return static_cast<decltype(v)>(s); });
}

Tensor neg(const Tensor& x) {
  return detail::unary_op(
      x, "neg", [](auto v) { return -v; }, [](auto v, auto) { return static_cast<decltype(v)>(-1); });
}

Tensor pow_scalar(const Tensor& x, double p) {
  return detail::unary_op(
      x, "pow",
      [p](auto v) {
        using T = decltype(v);
        return v > T(0) ? static_cast<T>(std::pow(v, static_cast<T>(p))) : T(0);
      },
      [p](auto v, auto) {
        using T = decltype(v);
        return v > T(0) ? static_cast<T>(p) * static_cast<T>(std::pow(v, static_cast<T>(p - 1))) : T(0);
      });
}

Tensor abs(const Tensor& x) {
  return detail::unary_op(
      x, "abs", [](auto v) { return std::abs(v); },
      [](auto v, auto) {
        using T = decltype(v);
        return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
      });
}

Tensor exp(const Tensor& x) {
  return detail::unary_op(
      x, "exp", [](auto v) { return std::exp(v); }, [](auto, auto y) { return y; });
}

Tensor log(const Tensor& x) {
  return detail::unary_op(
      x, "log", [](auto v) { return std::log(v); }, [](auto v, auto) { return decltype(v)(1) / v; });
}

Tensor clamp_min(const Tensor& x, double lo) {
  return detail::unary_op(
      x, "clamp_min",
      [lo](auto v) {
        using T = decltype(v);
        return v > static_cast<T>(lo) ? v : static_cast<T>(lo);
      },
      [lo](auto v, auto) {
        using T = decltype(v);
        return v > static_cast<T>(lo) ? T(1) : T(0);
      });
}

Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      x, "sigmoid",
      [](auto v) {
        using T = decltype(v);
        return T(1) / (T(1) + std::exp(-v));
      },
      [](auto, auto y) { return y * (decltype(y)(1) - y); });
}

Tensor gelu(const Tensor& x) {
  return detail::unary_op(
      x, "gelu",
      [](auto v) {
        using T = decltype(v);
        const T k0 = static_cast<T>(0.7978845608028654);
        const T k1 = static_cast<T>(0.044715);
        return T(0.5) * v * (T(1) + std::tanh(k0 * (v + k1 * v * v * v)));
      },
      [](auto v, auto) {
        using T = decltype(v);
        const T k0 = static_cast<T>(0.7978845608028654);
        const T k1 = static_cast<T>(0.044715);
        const T th = std::tanh(k0 * (v + k1 * v * v * v));
        return T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * k0 * (T(1) + T(3) * k1 * v * v);
      });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xs = x.data<T>();
    T acc = 0;
    for (T v : xs) acc += v;
    Buffer out(x.dtype(), 1);
    out.view<T>()[0] = acc;
    return make_result({}, std::move(out), "sum", {x}, [](const Buffer& gy, std::span<Buffer* const> gin) {
      if (!gin[0]) return;
      const T g = gy.view<T>()[0];
      for (T& d : gin[0]->view<T>()) d += g;
    });
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------- shape ops

namespace {

int normalize_axis(int axis, std::size_t ndim, const char* op) {
  const int n = static_cast<int>(ndim);
  if (axis < 0) axis += n;
  if (axis < 0 || axis >= n) throw ShapeError(std::string(op) + ": axis out of range");
  return axis;
}

}  // namespace

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const DType dtype = common_dtype(parts, "concat");
  const Shape& ref = parts[0].shape();
  axis = normalize_axis(axis, ref.size(), "concat");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.ndim() != ref.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < ref.size(); ++d) {
      if (static_cast<int>(d) != axis && p.dim(d) != ref[d]) {
        throw ShapeError(std::string("concat: ") + axis_name(d) + " axis mismatch between " + to_string(ref) +
                         " and " + to_string(p.shape()));
      }
    }
    out_shape[axis] += p.dim(static_cast<std::size_t>(axis));
  }
  std::int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= ref[d];
  std::int64_t inner = 1;
  for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < ref.size(); ++d) inner *= ref[d];
  std::vector<std::int64_t> chunk;
  for (const auto& p : parts) chunk.push_back(p.dim(static_cast<std::size_t>(axis)) * inner);
  const std::int64_t row = out_shape[axis] * inner;

  return dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    Buffer out(dtype, static_cast<std::size_t>(numel(out_shape)));
    T* ys = out.view<T>().data();
    std::int64_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const T* src = parts[k].data<T>().data();
      for (std::int64_t o = 0; o < outer; ++o) {
        std::copy(src + o * chunk[k], src + (o + 1) * chunk[k], ys + o * row + offset);
      }
      offset += chunk[k];
    }
    return make_result(out_shape, std::move(out), "concat", parts,
                       [chunk, outer, row](const Buffer& gy, std::span<Buffer* const> gin) {
                         const T* g = gy.view<T>().data();
                         std::int64_t off = 0;
                         for (std::size_t k = 0; k < chunk.size(); ++k) {
                           if (gin[k]) {
                             T* d = gin[k]->view<T>().data();
                             for (std::int64_t o = 0; o < outer; ++o) {
                               const T* s = g + o * row + off;
                               T* t = d + o * chunk[k];
                               for (std::int64_t i = 0; i < chunk[k]; ++i) t[i] += s[i];
                             }
                           }
                           off += chunk[k];
                         }
                       });
  });
}

Tensor narrow(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
  axis = normalize_axis(axis, x.ndim(), "narrow");
  const std::int64_t extent = x.dim(static_cast<std::size_t>(axis));
  if (start < 0 || length < 0 || start + length > extent) {
    throw ShapeError(std::string("narrow: range out of bounds on ") + axis_name(static_cast<std::size_t>(axis)) +
                     " axis");
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(static_cast<std::size_t>(d));
  std::int64_t inner = 1;
  for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < x.ndim(); ++d) inner *= x.dim(d);
  const std::int64_t src_row = extent * inner;
  const std::int64_t dst_row = length * inner;
  const std::int64_t off = start * inner;
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Buffer out(x.dtype(), static_cast<std::size_t>(numel(out_shape)));
    const T* xs = x.data<T>().data();
    T* ys = out.view<T>().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy(xs + o * src_row + off, xs + o * src_row + off + dst_row, ys + o * dst_row);
    }
    return make_result(out_shape, std::move(out), "narrow", {x},
                       [outer, src_row, dst_row, off](const Buffer& gy, std::span<Buffer* const> gin) {
                         if (!gin[0]) return;
                         const T* g = gy.view<T>().data();
                         T* d = gin[0]->view<T>().data();
                         for (std::int64_t o = 0; o < outer; ++o) {
                           for (std::int64_t i = 0; i < dst_row; ++i) d[o * src_row + off + i] += g[o * dst_row + i];
                         }
                       });
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  return make_result(shape, Buffer(x.buffer()), "reshape", {x},
                     [](const Buffer& gy, std::span<Buffer* const> gin) {
                       if (!gin[0]) return;
                       dispatch(gy.dtype(), [&](auto tag) {
                         using T = decltype(tag);
                         auto g = gy.view<T>();
                         auto d = gin[0]->view<T>();
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                         return 0;
                       });
                     });
}

Tensor gather_flat(const Tensor& x, Shape out_shape, std::shared_ptr<const std::vector<std::int64_t>> index) {
  if (static_cast<std::int64_t>(index->size()) != numel(out_shape)) {
    throw ShapeError("gather_flat: index table size does not match output shape " + to_string(out_shape));
  }
  const std::int64_t n_in = x.numel();
  for (auto i : *index) {
    if (i < 0 || i >= n_in) throw ShapeError("gather_flat: index out of range");
  }
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Buffer out(x.dtype(), index->size());
    const T* xs = x.data<T>().data();
    T* ys = out.view<T>().data();
    for (std::size_t i = 0; i < index->size(); ++i) ys[i] = xs[(*index)[i]];
    return make_result(out_shape, std::move(out), "gather_flat", {x},
                       [index](const Buffer& gy, std::span<Buffer* const> gin) {
                         if (!gin[0]) return;
                         const T* g = gy.view<T>().data();
                         T* d = gin[0]->view<T>().data();
                         for (std::size_t i = 0; i < index->size(); ++i) d[(*index)[i]] += g[i];
                       });
  });
}

Tensor transpose(const Tensor& x, int axis0, int axis1) {
  const std::size_t n = x.ndim();
  axis0 = normalize_axis(axis0, n, "transpose");
  axis1 = normalize_axis(axis1, n, "transpose");
  Shape out_shape = x.shape();
  std::swap(out_shape[axis0], out_shape[axis1]);
  std::vector<std::int64_t> in_stride(n, 1);
  for (std::size_t d = n; d-- > 1;) in_stride[d - 1] = in_stride[d] * x.dim(d);
  std::vector<std::int64_t> perm_stride = in_stride;
  std::swap(perm_stride[axis0], perm_stride[axis1]);
  auto index = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(x.numel()));
  std::vector<std::int64_t> idx(n, 0);
  std::int64_t off = 0;
  for (std::size_t e = 0; e < index->size(); ++e) {
    (*index)[e] = off;
    for (std::size_t d = n; d-- > 0;) {
      ++idx[d];
      off += perm_stride[d];
      if (idx[d] < out_shape[d]) break;
      off -= perm_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return gather_flat(x, out_shape, index);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2) throw ShapeError("matmul: operands must be at least 2-d");
  const DType dtype = common_dtype({a, b}, "matmul");
  const std::int64_t m = a.dim(a.ndim() - 2);
  const std::int64_t k = a.dim(a.ndim() - 1);
  const std::int64_t kb = b.dim(b.ndim() - 2);
  const std::int64_t nn = b.dim(b.ndim() - 1);
  if (k != kb) {
    throw ShapeError("matmul: inner axis mismatch " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::int64_t batch = a.numel() / (m * k);
  const bool shared_b = b.ndim() == 2;
  if (!shared_b) {
    if (b.ndim() != a.ndim()) throw ShapeError("matmul: batch rank mismatch");
    for (std::size_t d = 0; d + 2 < a.ndim(); ++d) {
      if (a.dim(d) != b.dim(d)) throw ShapeError("matmul: batch axis " + std::to_string(d) + " mismatch");
    }
  }
  Shape out_shape = a.shape();
  out_shape.back() = nn;
  return dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    Buffer out(dtype, static_cast<std::size_t>(numel(out_shape)));
    const T* as = a.data<T>().data();
    const T* bs = b.data<T>().data();
    T* ys = out.view<T>().data();
    for (std::int64_t bi = 0; bi < batch; ++bi) {
      const T* ap = as + bi * m * k;
      const T* bp = bs + (shared_b ? 0 : bi * k * nn);
      T* yp = ys + bi * m * nn;
      for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t kk = 0; kk < k; ++kk) {
          const T av = ap[i * k + kk];
          const T* brow = bp + kk * nn;
          T* yrow = yp + i * nn;
          for (std::int64_t j = 0; j < nn; ++j) yrow[j] += av * brow[j];
        }
      }
    }
    auto adata = a.impl()->data;
    auto bdata = b.impl()->data;
    return make_result(
        out_shape, std::move(out), "matmul", {a, b},
        [adata, bdata, batch, m, k, nn, shared_b](const Buffer& gy, std::span<Buffer* const> gin) {
          const T* g = gy.view<T>().data();
          const T* as = std::as_const(*adata).view<T>().data();
          const T* bs = std::as_const(*bdata).view<T>().data();
          for (std::int64_t bi = 0; bi < batch; ++bi) {
            const T* ap = as + bi * m * k;
            const T* bp = bs + (shared_b ? 0 : bi * k * nn);
            const T* gp = g + bi * m * nn;
            if (gin[0]) {
              T* ga = gin[0]->view<T>().data() + bi * m * k;
              for (std::int64_t i = 0; i < m; ++i) {
                for (std::int64_t kk = 0; kk < k; ++kk) {
                  T acc = 0;
                  for (std::int64_t j = 0; j < nn; ++j) acc += gp[i * nn + j] * bp[kk * nn + j];
                  ga[i * k + kk] += acc;
                }
              }
            }
            if (gin[1]) {
              T* gb = gin[1]->view<T>().data() + (shared_b ? 0 : bi * k * nn);
              for (std::int64_t i = 0; i < m; ++i) {
                for (std::int64_t kk = 0; kk < k; ++kk) {
                  const T av = ap[i * k + kk];
                  for (std::int64_t j = 0; j < nn; ++j) gb[kk * nn + j] += av * gp[i * nn + j];
                }
              }
            }
          }
        });
  });
}

Tensor softmax(const Tensor& x, int axis) {
  axis = normalize_axis(axis, x.ndim(), "softmax");
  std::int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(static_cast<std::size_t>(d));
  const std::int64_t len = x.dim(static_cast<std::size_t>(axis));
  std::int64_t inner = 1;
  for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < x.ndim(); ++d) inner *= x.dim(d);
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto out = std::make_shared<Buffer>(x.dtype(), static_cast<std::size_t>(x.numel()));
    const T* xs = x.data<T>().data();
    T* ys = out->view<T>().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * len * inner + in;
        T mx = xs[base];
        for (std::int64_t i = 1; i < len; ++i) mx = std::max(mx, xs[base + i * inner]);
        T total = 0;
        for (std::int64_t i = 0; i < len; ++i) {
          const T e = std::exp(xs[base + i * inner] - mx);
          ys[base + i * inner] = e;
          total += e;
        }
        for (std::int64_t i = 0; i < len; ++i) ys[base + i * inner] /= total;
      }
    }
    return make_result(x.shape(), out, "softmax", {x},
                       [out, outer, len, inner](const Buffer& gy, std::span<Buffer* const> gin) {
                         if (!gin[0]) return;
                         const T* g = gy.view<T>().data();
                         const T* y = std::as_const(*out).view<T>().data();
                         T* d = gin[0]->view<T>().data();
                         for (std::int64_t o = 0; o < outer; ++o) {
                           for (std::int64_t in = 0; in < inner; ++in) {
                             const std::int64_t base = o * len * inner + in;
                             T dot = 0;
                             for (std::int64_t i = 0; i < len; ++i) dot += g[base + i * inner] * y[base + i * inner];
                             for (std::int64_t i = 0; i < len; ++i) {
                               const std::int64_t at = base + i * inner;
                               d[at] += y[at] * (g[at] - dot);
                             }
                           }
                         }
                       });
  });
}

}  // namespace crnet
