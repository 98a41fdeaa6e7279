#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "crnet/io.hpp"
#include "crnet/tensor.hpp"

namespace crnet {

std::string join_path(std::string_view prefix, std::string_view name);

// Declared shape of one learnable tensor. `fan_in` sets the init bound
// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for convolutions.
struct ParamSpec {
  std::string path;
  Shape shape;
  std::int64_t fan_in = 1;
};

// Ordered list of parameter declarations. Building a layout never allocates
// tensor storage, so counting parameters of the full-size model is cheap.
class ParamLayout {
 public:
  void add(std::string path, Shape shape, std::int64_t fan_in);
  // Conv weight [cout, cin/groups, k, k] plus bias [cout] under `path`.
  void add_conv(const std::string& path, std::int64_t cin, std::int64_t cout, int k, int groups = 1);

  const std::vector<ParamSpec>& specs() const { return specs_; }
  std::int64_t count() const;
  // Scalar count of every spec whose path starts with `prefix`.
  std::int64_t count(std::string_view prefix) const;

 private:
  std::vector<ParamSpec> specs_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Named, ordered collection of parameter tensors. Iteration order is the
// declaration order, which fixes checkpoint layout and optimizer pairing.
class ParamStore {
 public:
  ParamStore() = default;

  // Draws each tensor from a stream seeded by (seed, path), so adding or
  // reordering unrelated parameters never changes existing values.
  static ParamStore initialize(const ParamLayout& layout, std::uint64_t seed, DType dtype = DType::f32);
  static ParamStore zeros(const ParamLayout& layout, DType dtype = DType::f32);
  static ParamStore from_named(NamedTensors entries);

  void add(std::string path, Tensor tensor);
  bool contains(std::string_view path) const;
  const Tensor& at(std::string_view path) const;
  Tensor& at(std::string_view path);

  std::size_t size() const { return entries_.size(); }
  const NamedTensors& entries() const { return entries_; }
  NamedTensors& entries() { return entries_; }
  std::int64_t count() const;

  void set_requires_grad(bool flag);
  void zero_grad();
  ParamStore clone() const;
  ParamStore to(DType dtype) const;

  // Throws ParamError naming the first missing, extra or mis-shaped path.
  void validate(const ParamLayout& layout) const;

 private:
  NamedTensors entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Read-only window onto a ParamStore rooted at a path prefix.
class ParamView {
 public:
  ParamView(const ParamStore& store, std::string prefix = {}) : store_(&store), prefix_(std::move(prefix)) {}

  const Tensor& operator[](std::string_view name) const { return store_->at(join_path(prefix_, name)); }
  ParamView sub(std::string_view name) const { return {*store_, join_path(prefix_, name)}; }
  const std::string& prefix() const { return prefix_; }

 private:
  const ParamStore* store_;
  std::string prefix_;
};

}  // namespace crnet
