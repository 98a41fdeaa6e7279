#include "crnet/tensor.hpp"

#include <cstring>
#include <sstream>

#include "crnet/error.hpp"

namespace crnet {

const char* to_string(DType dtype) { return dtype == DType::f64 ? "f64" : "f32"; }

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------- Buffer

Buffer::Buffer(DType dtype, std::size_t size) {
  if (dtype == DType::f64) {
    data_ = std::vector<double>(size, 0.0);
  } else {
    data_ = std::vector<float>(size, 0.0f);
  }
}

Buffer::Buffer(std::vector<float> values) : data_(std::move(values)) {}
Buffer::Buffer(std::vector<double> values) : data_(std::move(values)) {}

DType Buffer::dtype() const { return data_.index() == 1 ? DType::f64 : DType::f32; }

std::size_t Buffer::size() const {
  return std::visit([](const auto& v) { return v.size(); }, data_);
}

template <class T>
std::span<T> Buffer::view() {
  auto* v = std::get_if<std::vector<T>>(&data_);
  if (!v) throw ShapeError(std::string("buffer dtype mismatch: holds ") + to_string(dtype()));
  return {v->data(), v->size()};
}

template <class T>
std::span<const T> Buffer::view() const {
  const auto* v = std::get_if<std::vector<T>>(&data_);
  if (!v) throw ShapeError(std::string("buffer dtype mismatch: holds ") + to_string(dtype()));
  return {v->data(), v->size()};
}

template std::span<float> Buffer::view<float>();
template std::span<double> Buffer::view<double>();
template std::span<const float> Buffer::view<float>() const;
template std::span<const double> Buffer::view<double>() const;

double Buffer::get(std::size_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v[i]); }, data_);
}

void Buffer::set(std::size_t i, double value) {
  std::visit([&](auto& v) { v[i] = static_cast<typename std::decay_t<decltype(v)>::value_type>(value); },
             data_);
}

void Buffer::fill(double value) {
  std::visit(
      [&](auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        std::fill(v.begin(), v.end(), static_cast<T>(value));
      },
      data_);
}

Buffer Buffer::converted(DType target) const {
  if (target == dtype()) return *this;
  Buffer out(target, size());
  for (std::size_t i = 0; i < size(); ++i) out.set(i, get(i));
  return out;
}

// ---------------------------------------------------------------- grad mode

namespace {
thread_local bool t_grad_enabled = true;

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, Buffer buffer) {
  if (numel(shape) != static_cast<std::int64_t>(buffer.size())) {
    throw ShapeError("tensor shape " + to_string(shape) + " does not match buffer of " +
                     std::to_string(buffer.size()) + " elements");
  }
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + to_string(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::make_shared<Buffer>(std::move(buffer));
  return impl;
}
}  // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

Tensor Tensor::zeros(Shape shape, DType dtype) {
  auto n = static_cast<std::size_t>(crnet::numel(shape));
  return Tensor(make_impl(std::move(shape), Buffer(dtype, n)));
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  auto n = static_cast<std::size_t>(crnet::numel(shape));
  Buffer b(dtype, n);
  b.fill(value);
  return Tensor(make_impl(std::move(shape), std::move(b)));
}

Tensor Tensor::from(Shape shape, std::vector<float> values) {
  return Tensor(make_impl(std::move(shape), Buffer(std::move(values))));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  return Tensor(make_impl(std::move(shape), Buffer(std::move(values))));
}

Tensor Tensor::from(Shape shape, Buffer values) {
  return Tensor(make_impl(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::ndim() const { return impl_->shape.size(); }

std::int64_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
  }
  return impl_->shape[axis];
}

std::int64_t Tensor::numel() const { return crnet::numel(impl_->shape); }
DType Tensor::dtype() const { return impl_->data->dtype(); }

template <class T>
std::span<const T> Tensor::data() const {
  return std::as_const(*impl_->data).view<T>();
}

template <class T>
std::span<T> Tensor::mutable_data() {
  if (impl_->grad_fn) throw ShapeError("mutable access to a non-leaf tensor");
  return impl_->data->view<T>();
}

template std::span<const float> Tensor::data<float>() const;
template std::span<const double> Tensor::data<double>() const;
template std::span<float> Tensor::mutable_data<float>();
template std::span<double> Tensor::mutable_data<double>();

const Buffer& Tensor::buffer() const { return *impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return impl_->data->get(0);
}

double Tensor::value(std::int64_t flat_index) const {
  return impl_->data->get(static_cast<std::size_t>(flat_index));
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(static_cast<std::size_t>(numel()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = impl_->data->get(i);
  return out;
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (impl_->grad_fn && !flag) {
    throw ShapeError("cannot clear requires_grad on a non-leaf tensor; use detach()");
  }
  impl_->requires_grad = flag;
  if (!flag) impl_->grad.reset();
  return *this;
}

bool Tensor::is_leaf() const { return impl_->grad_fn == nullptr; }
bool Tensor::has_grad() const { return impl_->grad != nullptr; }

Tensor Tensor::grad() const {
  if (!impl_->grad) throw ShapeError("tensor has no gradient");
  auto g = std::make_shared<detail::TensorImpl>();
  g->shape = impl_->shape;
  g->data = impl_->grad;
  return Tensor(std::move(g));
}

void Tensor::zero_grad() {
  if (impl_->grad) impl_->grad->fill(0.0);
}

void Tensor::clear_grad() { impl_->grad.reset(); }

Tensor Tensor::detach() const {
  auto d = std::make_shared<detail::TensorImpl>();
  d->shape = impl_->shape;
  d->data = impl_->data;
  return Tensor(std::move(d));
}

Tensor Tensor::clone() const { return Tensor(make_impl(impl_->shape, *impl_->data)); }

Tensor Tensor::to(DType target) const {
  return Tensor(make_impl(impl_->shape, impl_->data->converted(target)));
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  if (a.dtype() == DType::f32) {
    auto x = a.data<float>();
    auto y = b.data<float>();
    return std::memcmp(x.data(), y.data(), x.size_bytes()) == 0;
  }
  auto x = a.data<double>();
  auto y = b.data<double>();
  return std::memcmp(x.data(), y.data(), x.size_bytes()) == 0;
}

}  // namespace crnet
