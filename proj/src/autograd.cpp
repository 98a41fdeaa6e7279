#include "crnet/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "crnet/error.hpp"

namespace crnet {

using detail::TensorImpl;

DType common_dtype(const std::vector<Tensor>& inputs, const char* op) {
  DType dtype = DType::f32;
  bool first = true;
  for (const auto& t : inputs) {
    if (!t.defined()) continue;
    if (first) {
      dtype = t.dtype();
      first = false;
    } else if (t.dtype() != dtype) {
      throw ShapeError(std::string(op) + ": mixed dtypes " + to_string(dtype) + " and " +
                       to_string(t.dtype()));
    }
  }
  return dtype;
}

Tensor make_result(Shape shape, Buffer values, std::string op, const std::vector<Tensor>& inputs,
                   detail::BackwardFn backward_fn) {
  return make_result(std::move(shape), std::make_shared<Buffer>(std::move(values)), std::move(op), inputs,
                     std::move(backward_fn));
}

Tensor make_result(Shape shape, std::shared_ptr<Buffer> values, std::string op,
                   const std::vector<Tensor>& inputs, detail::BackwardFn backward_fn) {
  if (numel(shape) != static_cast<std::int64_t>(values->size())) {
    throw ShapeError(op + ": result shape " + to_string(shape) + " does not match " +
                     std::to_string(values->size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  Tensor out(std::move(impl));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& t : inputs) {
    if (t.defined() && t.requires_grad()) any = true;
  }
  if (!any) return out;
  auto node = std::make_shared<detail::Node>();
  node->op = std::move(op);
  node->backward = std::move(backward_fn);
  for (const auto& t : inputs) node->inputs.push_back(t.defined() ? t.impl() : nullptr);
  out.impl()->grad_fn = std::move(node);
  out.impl()->requires_grad = true;
  return out;
}

void backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1) {
    throw ShapeError("backward: root must be scalar, got shape " +
                     (root.defined() ? to_string(root.shape()) : std::string("<undefined>")));
  }
  if (!root.requires_grad()) throw ShapeError("backward: root does not require grad");

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root.impl().get(), 0);
  visited.insert(root.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const auto* node = impl->grad_fn.get();
    if (node && next < node->inputs.size()) {
      TensorImpl* child = node->inputs[next++].get();
      if (child && child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  for (TensorImpl* impl : order) {
    if (impl->grad_fn || !impl->grad) {
      impl->grad = std::make_shared<Buffer>(impl->data->dtype(), impl->data->size());
    }
  }
  root.impl()->grad->fill(1.0);

  std::vector<Buffer*> slots;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* impl = *it;
    if (!impl->grad_fn) continue;
    const auto& node = *impl->grad_fn;
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      const auto& in = node.inputs[i];
      if (in && in->requires_grad) slots[i] = in->grad.get();
    }
    node.backward(*impl->grad, slots);
  }
}

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                               double eps, std::int64_t max_elements) {
  if (x.dtype() != DType::f64) {
    throw ShapeError("finite_difference_check requires an f64 (verify64) tensor");
  }
  Tensor probe = x.clone();
  probe.set_requires_grad(true);
  Tensor y = f(probe);
  backward(y);
  const auto analytic = probe.grad().to_vector();

  const std::int64_t n = x.numel();
  std::int64_t step = 1;
  if (max_elements > 0 && n > max_elements) step = (n + max_elements - 1) / max_elements;

  NoGradGuard no_grad;
  Tensor work = x.clone();
  auto values = work.mutable_data<double>();
  double worst = 0.0;
  for (std::int64_t i = 0; i < n; i += step) {
    const double original = values[i];
    values[i] = original + eps;
    const double plus = f(work).item();
    values[i] = original - eps;
    const double minus = f(work).item();
    values[i] = original;
    const double numeric = (plus - minus) / (2.0 * eps);
    const double a = analytic[static_cast<std::size_t>(i)];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace crnet
