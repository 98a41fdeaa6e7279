#pragma once

#include <memory>
#include <string>

#include "crnet/autograd.hpp"
#include "crnet/detail/dispatch.hpp"

namespace crnet::detail {

// Builds a differentiable elementwise map. `fwd(x)` returns f(x) and
// `deriv(x, y)` returns f'(x) given y = f(x); both are generic over the scalar
// type and are evaluated in that type.
template <class Fwd, class Deriv>
Tensor unary_op(const Tensor& x, std::string name, Fwd fwd, Deriv deriv) {
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto n = static_cast<std::size_t>(x.numel());
    auto out = std::make_shared<Buffer>(x.dtype(), n);
    auto xs = x.data<T>();
    auto ys = out->view<T>();
    for (std::size_t i = 0; i < n; ++i) ys[i] = static_cast<T>(fwd(xs[i]));
    auto xdata = x.impl()->data;
    return make_result(x.shape(), out, std::move(name), {x},
                       [xdata, out, deriv](const Buffer& g, std::span<Buffer* const> gin) {
                         if (!gin[0]) return;
                         auto gs = g.view<T>();
                         auto xv = std::as_const(*xdata).view<T>();
                         auto yv = std::as_const(*out).view<T>();
                         auto dst = gin[0]->view<T>();
                         for (std::size_t i = 0; i < gs.size(); ++i) {
                           dst[i] += gs[i] * static_cast<T>(deriv(xv[i], yv[i]));
                         }
                       });
  });
}

}  // namespace crnet::detail
