#pragma once

#include <functional>
#include <string>
#include <vector>

#include "crnet/tensor.hpp"

namespace crnet {

// Wraps freshly computed values into a tensor and, when grad mode is on and any
// input requires gradients, records the producing node. Operation authors call
// this once per primitive.
Tensor make_result(Shape shape, Buffer values, std::string op, const std::vector<Tensor>& inputs,
                   detail::BackwardFn backward);
// Variant for operations whose backward closure needs the output values: the
// closure may capture `values` (the storage, never the output tensor itself).
Tensor make_result(Shape shape, std::shared_ptr<Buffer> values, std::string op,
                   const std::vector<Tensor>& inputs, detail::BackwardFn backward);

// Throws ShapeError unless every input shares one dtype; returns it.
DType common_dtype(const std::vector<Tensor>& inputs, const char* op);

// Reverse-mode propagation from a scalar root. Leaf gradients accumulate across
// calls; intermediate gradients are recomputed from zero on each call.
void backward(const Tensor& root);

// Central-difference check of d f(x) / d x against the analytic gradient.
// Returns max over checked elements of |a - n| / max(|a|, |n|, 1e-8).
// `x` must be f64. When `max_elements` > 0 only an evenly strided subset of
// that many elements is perturbed.
double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                               double eps = 1e-5, std::int64_t max_elements = 0);

}  // namespace crnet
