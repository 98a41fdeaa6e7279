#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace crnet {

// Scalar precision of a tensor. f32 is the working precision for training and
// inference; f64 exists for finite-difference gradient verification.
enum class DType : std::uint32_t { f32 = 0, f64 = 1 };

const char* to_string(DType dtype);

template <class T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Contiguous, row-major scalar storage of one dtype.
class Buffer {
 public:
  Buffer(DType dtype, std::size_t size);
  explicit Buffer(std::vector<float> values);
  explicit Buffer(std::vector<double> values);

  DType dtype() const;
  std::size_t size() const;

  template <class T>
  std::span<T> view();
  template <class T>
  std::span<const T> view() const;

  double get(std::size_t i) const;
  void set(std::size_t i, double value);
  void fill(double value);
  Buffer converted(DType dtype) const;

 private:
  std::variant<std::vector<float>, std::vector<double>> data_;
};

namespace detail {

struct TensorImpl;

// Backward closure: receives the gradient of the node's output and one slot per
// input (nullptr for inputs that do not require gradients). Implementations
// accumulate into the slots with +=.
using BackwardFn = std::function<void(const Buffer& grad_out, std::span<Buffer* const> grad_in)>;

struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::shared_ptr<Buffer> data;
  std::shared_ptr<Buffer> grad;
  std::shared_ptr<Node> grad_fn;
  bool requires_grad = false;
};

}  // namespace detail

// Dense N-dimensional array with an optional gradient slot and a link to the
// operation that produced it. Copies are shallow handles onto the same storage.
//
// Values are immutable after creation; the one exception is `mutable_data()`
// on leaf tensors, which the optimizer uses to update parameters in place.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl);

  static Tensor zeros(Shape shape, DType dtype = DType::f32);
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor from(Shape shape, std::vector<float> values);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor from(Shape shape, Buffer values);
  static Tensor scalar(double value, DType dtype = DType::f32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const;
  std::int64_t dim(std::size_t axis) const;
  std::int64_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<const T> data() const;
  template <class T>
  std::span<T> mutable_data();
  const Buffer& buffer() const;

  double item() const;
  double value(std::int64_t flat_index) const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  // Gradient as a tensor sharing the grad slot's storage. Throws if absent.
  Tensor grad() const;
  void zero_grad();
  void clear_grad();

  // Same storage, no graph linkage, requires_grad = false.
  Tensor detach() const;
  // Deep copy of the values, no graph linkage.
  Tensor clone() const;
  Tensor to(DType dtype) const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

bool grad_enabled();

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Bitwise equality of shape, dtype and values.
bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace crnet
