#include "crnet/params.hpp"

#include <algorithm>
#include <cmath>

#include "crnet/error.hpp"
#include "crnet/rng.hpp"

namespace crnet {

std::string join_path(std::string_view prefix, std::string_view name) {
  if (prefix.empty()) return std::string(name);
  if (name.empty()) return std::string(prefix);
  std::string out;
  out.reserve(prefix.size() + name.size() + 1);
  out.append(prefix).append(".").append(name);
  return out;
}

void ParamLayout::add(std::string path, Shape shape, std::int64_t fan_in) {
  if (index_.count(path)) throw ParamError("duplicate parameter path '" + path + "'");
  index_.emplace(path, specs_.size());
  specs_.push_back({std::move(path), std::move(shape), fan_in});
}

void ParamLayout::add_conv(const std::string& path, std::int64_t cin, std::int64_t cout, int k, int groups) {
  if (groups < 1 || cin % groups != 0 || cout % groups != 0) {
    throw ConfigError(path + ": channels " + std::to_string(cin) + "->" + std::to_string(cout) +
                      " not divisible by groups " + std::to_string(groups));
  }
  const std::int64_t fan_in = cin / groups * k * k;
  add(join_path(path, "weight"), {cout, cin / groups, k, k}, fan_in);
  add(join_path(path, "bias"), {cout}, fan_in);
}

std::int64_t ParamLayout::count() const { return count(""); }

std::int64_t ParamLayout::count(std::string_view prefix) const {
  std::int64_t total = 0;
  for (const auto& s : specs_) {
    if (s.path.compare(0, prefix.size(), prefix) == 0) total += numel(s.shape);
  }
  return total;
}

ParamStore ParamStore::initialize(const ParamLayout& layout, std::uint64_t seed, DType dtype) {
  ParamStore store;
  for (const auto& s : layout.specs()) {
    Rng rng(mix_seed(seed, hash_string(s.path)));
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.fan_in));
    store.add(s.path, random_uniform(s.shape, -bound, bound, rng, dtype));
  }
  return store;
}

ParamStore ParamStore::zeros(const ParamLayout& layout, DType dtype) {
  ParamStore store;
  for (const auto& s : layout.specs()) store.add(s.path, Tensor::zeros(s.shape, dtype));
  return store;
}

ParamStore ParamStore::from_named(NamedTensors entries) {
  ParamStore store;
  for (auto& [path, t] : entries) store.add(std::move(path), std::move(t));
  return store;
}

void ParamStore::add(std::string path, Tensor tensor) {
  if (index_.count(path)) throw ParamError("duplicate parameter path '" + path + "'");
  index_.emplace(path, entries_.size());
  entries_.emplace_back(std::move(path), std::move(tensor));
}

bool ParamStore::contains(std::string_view path) const { return index_.count(std::string(path)) != 0; }

const Tensor& ParamStore::at(std::string_view path) const {
  auto it = index_.find(std::string(path));
  if (it == index_.end()) throw ParamError("missing parameter '" + std::string(path) + "'");
  return entries_[it->second].second;
}

Tensor& ParamStore::at(std::string_view path) {
  return const_cast<Tensor&>(static_cast<const ParamStore&>(*this).at(path));
}

std::int64_t ParamStore::count() const {
  std::int64_t total = 0;
  for (const auto& e : entries_) total += e.second.numel();
  return total;
}

void ParamStore::set_requires_grad(bool flag) {
  for (auto& e : entries_) e.second.set_requires_grad(flag);
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.second.clear_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [path, t] : entries_) out.add(path, t.clone().set_requires_grad(t.requires_grad()));
  return out;
}

ParamStore ParamStore::to(DType dtype) const {
  ParamStore out;
  for (const auto& [path, t] : entries_) out.add(path, t.to(dtype).set_requires_grad(t.requires_grad()));
  return out;
}

void ParamStore::validate(const ParamLayout& layout) const {
  std::vector<std::string> missing, extra, mismatched;
  std::unordered_map<std::string, int> declared;
  for (const auto& s : layout.specs()) {
    declared.emplace(s.path, 0);
    auto it = index_.find(s.path);
    if (it == index_.end()) {
      missing.push_back(s.path);
    } else if (entries_[it->second].second.shape() != s.shape) {
      mismatched.push_back(s.path + " " + to_string(entries_[it->second].second.shape()) + " != expected " +
                           to_string(s.shape));
    }
  }
  for (const auto& e : entries_) {
    if (!declared.count(e.first)) extra.push_back(e.first);
  }
  if (missing.empty() && extra.empty() && mismatched.empty()) return;
  auto list = [](const std::vector<std::string>& v) {
    constexpr std::size_t kShown = 8;
    std::string s;
    for (std::size_t i = 0; i < std::min(v.size(), kShown); ++i) s += (i ? ", " : "") + v[i];
    if (v.size() > kShown) s += ", ... (" + std::to_string(v.size() - kShown) + " more)";
    return s;
  };
  std::string msg;
  if (!missing.empty()) msg = "missing parameter '" + missing.front() + "'";
  else if (!mismatched.empty()) msg = "shape mismatch for parameter " + mismatched.front();
  else msg = "unexpected parameter '" + extra.front() + "'";
  if (!missing.empty()) msg += "; missing: " + list(missing);
  if (!extra.empty()) msg += "; extra: " + list(extra);
  if (!mismatched.empty()) msg += "; mis-shaped: " + list(mismatched);
  throw ParamError(msg);
}

}  // namespace crnet
