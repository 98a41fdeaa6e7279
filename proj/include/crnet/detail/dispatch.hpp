#pragma once

#include "crnet/tensor.hpp"

namespace crnet::detail {

// Calls `fn` with a value-initialized scalar of the runtime dtype so kernels
// can be written once as templates.
template <class Fn>
decltype(auto) dispatch(DType dtype, Fn&& fn) {
  if (dtype == DType::f64) {
    return fn(double{});
  }
  return fn(float{});
}

}  // namespace crnet::detail
