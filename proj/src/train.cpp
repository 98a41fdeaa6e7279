#include "crnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "crnet/autograd.hpp"
#include "crnet/error.hpp"
#include "crnet/io.hpp"
#include "crnet/ops.hpp"

namespace crnet {

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(initial_lr > 0 && std::isfinite(initial_lr), "train.initial_lr must be positive");
  need(lr_gamma > 0 && lr_gamma <= 1, "train.lr_gamma must be in (0, 1]");
  need(lr_step_epochs >= 1, "train.lr_step_epochs must be >= 1");
  need(crop >= 2 && crop % 2 == 0, "train.crop must be even and >= 2");
  need(epochs >= 1, "train.epochs must be >= 1");
  need(max_steps >= 0, "train.max_steps must be >= 0");
  need(batch >= 1, "train.batch must be >= 1");
  need(weight_decay >= 0, "train.weight_decay must be >= 0");
  need(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "train.beta1 and train.beta2 must be in [0, 1)");
  need(eps > 0, "train.eps must be positive");
  need(checkpoint_every >= 1, "train.checkpoint_every must be >= 1");
}

double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ConfigError("lr_at: epoch must be >= 0");
  return cfg.initial_lr * std::pow(cfg.lr_gamma, epoch / cfg.lr_step_epochs);
}

OptimState OptimState::zeros_like(const ParamStore& params) {
  OptimState s;
  for (const auto& [path, t] : params.entries()) {
    s.m.add(path, Tensor::zeros(t.shape(), t.dtype()));
    s.v.add(path, Tensor::zeros(t.shape(), t.dtype()));
  }
  return s;
}

bool decays(const std::string& path) {
  constexpr std::string_view suffix = ".bias";
  return !(path.size() >= suffix.size() && path.compare(path.size() - suffix.size(), suffix.size(), suffix) == 0);
}

namespace {

template <class T>
void adamw_update(std::span<T> p, std::span<const T> g, std::span<T> m, std::span<T> v, double lr, double wd,
                  double b1, double b2, double eps, double bc1, double bc2) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    double pi = static_cast<double>(p[i]) * (1.0 - lr * wd);
    const double gi = static_cast<double>(g[i]);
    const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
    const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
    pi -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
    p[i] = static_cast<T>(pi);
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
  }
}

}  // namespace

void adamw_step(ParamStore& params, OptimState& state, const AdamWOptions& o) {
  for (const auto& [path, t] : params.entries()) {
    if (!t.has_grad()) throw ParamError("adamw_step: parameter '" + path + "' has no gradient");
    if (!state.m.contains(path) || !state.v.contains(path)) {
      throw ParamError("adamw_step: optimizer state lacks '" + path + "'");
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (auto& [path, t] : params.entries()) {
    const double wd = decays(path) ? o.weight_decay : 0.0;
    Tensor g = t.grad();
    Tensor& m = state.m.at(path);
    Tensor& v = state.v.at(path);
    if (t.dtype() == DType::f32) {
      adamw_update<float>(t.mutable_data<float>(), g.data<float>(), m.mutable_data<float>(), v.mutable_data<float>(),
                          o.lr, wd, o.beta1, o.beta2, o.eps, bc1, bc2);
    } else {
      adamw_update<double>(t.mutable_data<double>(), g.data<double>(), m.mutable_data<double>(),
                           v.mutable_data<double>(), o.lr, wd, o.beta1, o.beta2, o.eps, bc1, bc2);
    }
  }
}

AugmentDraw draw_augment(std::int64_t height, std::int64_t width, std::int64_t crop, bool geometric, Rng& rng) {
  if (crop > height || crop > width) {
    throw ConfigError("crop " + std::to_string(crop) + " exceeds sample extent " + std::to_string(height) + "x" +
                      std::to_string(width));
  }
  AugmentDraw d;
  d.crop = crop;
  d.top = rng.uniform_int(0, height - crop);
  d.left = rng.uniform_int(0, width - crop);
  if (geometric) {
    d.flip = rng.coin();
    d.quarter_turns = static_cast<int>(rng.uniform_int(0, 3));
  }
  return d;
}

namespace {

Tensor augment_plane_stack(const Tensor& x, const AugmentDraw& d) {
  const std::int64_t c_n = x.dim(0), h = x.dim(1), w = x.dim(2), n = d.crop;
  auto index = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(c_n * n * n));
  std::size_t k = 0;
  for (std::int64_t c = 0; c < c_n; ++c) {
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < n; ++j) {
        std::int64_t y = i, xx = j;
        // Undo the rotations: a counter-clockwise quarter turn reads out(i, j) = in(j, n - 1 - i).
        for (int r = 0; r < d.quarter_turns; ++r) {
          const std::int64_t ny = xx, nx = n - 1 - y;
          y = ny;
          xx = nx;
        }
        if (d.flip) xx = n - 1 - xx;
        (*index)[k++] = (c * h + d.top + y) * w + d.left + xx;
      }
    }
  }
  NoGradGuard no_grad;
  return gather_flat(x, {c_n, n, n}, index);
}

}  // namespace

SampleRecord apply_augment(const SampleRecord& sample, const AugmentDraw& d) {
  const auto& shape = sample.gt.shape();
  if (d.crop < 1 || d.top < 0 || d.left < 0 || d.top + d.crop > shape[1] || d.left + d.crop > shape[2]) {
    throw ConfigError("augment: crop window out of bounds");
  }
  SampleRecord out;
  out.id = sample.id;
  out.stack.exposure_times = sample.stack.exposure_times;
  for (int i = 0; i < kFrames; ++i) out.stack.frames[i] = augment_plane_stack(sample.stack.frames[i], d);
  out.gt = augment_plane_stack(sample.gt, d);
  return out;
}

SampleRecord augment(const SampleRecord& sample, std::int64_t crop, Rng& rng) {
  return apply_augment(sample, draw_augment(sample.gt.dim(1), sample.gt.dim(2), crop, true, rng));
}

std::string loss_csv(const std::vector<LossRecord>& history) {
  std::string out = "step,epoch,lr,loss\n";
  char buf[128];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%lld,%d,%.9g,%.9g\n", static_cast<long long>(r.step), r.epoch, r.lr, r.loss);
    out += buf;
  }
  return out;
}

namespace {

constexpr const char* kM = "optim.m/";
constexpr const char* kV = "optim.v/";

bool starts_with(const std::string& s, std::string_view prefix) { return s.compare(0, prefix.size(), prefix) == 0; }

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  NamedTensors e = ckpt.params.entries();
  for (const auto& [p, t] : ckpt.optim.m.entries()) e.emplace_back(kM + p, t);
  for (const auto& [p, t] : ckpt.optim.v.entries()) e.emplace_back(kV + p, t);
  e.emplace_back("optim.step", Tensor::from({1}, std::vector<double>{static_cast<double>(ckpt.optim.step)}));
  std::vector<double> h;
  for (const auto& r : ckpt.history) {
    h.insert(h.end(), {static_cast<double>(r.step), static_cast<double>(r.epoch), r.lr, r.loss});
  }
  const auto rows = static_cast<std::int64_t>(ckpt.history.size());
  e.emplace_back("train.history", Tensor::from({rows, 4}, std::move(h)));
  save_archive(path, e);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Checkpoint c;
  bool has_step = false;
  for (auto& [name, t] : load_archive(path)) {
    if (starts_with(name, kM)) {
      c.optim.m.add(name.substr(std::string_view(kM).size()), t);
    } else if (starts_with(name, kV)) {
      c.optim.v.add(name.substr(std::string_view(kV).size()), t);
    } else if (name == "optim.step") {
      c.optim.step = static_cast<std::int64_t>(t.value(0));
      has_step = true;
    } else if (name == "train.history") {
      if (t.ndim() != 2 || t.dim(1) != 4) throw FormatError(path.string() + ": train.history must be [n,4]");
      for (std::int64_t r = 0; r < t.dim(0); ++r) {
        c.history.push_back({static_cast<std::int64_t>(t.value(r * 4)), static_cast<int>(t.value(r * 4 + 1)),
                             t.value(r * 4 + 2), t.value(r * 4 + 3)});
      }
    } else {
      c.params.add(name, t);
    }
  }
  if (!has_step) throw FormatError(path.string() + ": not a training checkpoint (no optim.step)");
  for (const auto& [p, t] : c.params.entries()) {
    if (!c.optim.m.contains(p) || !c.optim.v.contains(p)) {
      throw FormatError(path.string() + ": optimizer state missing for '" + p + "'");
    }
  }
  return c;
}

ParamStore load_params(const std::filesystem::path& path) {
  ParamStore params;
  for (auto& [name, t] : load_archive(path)) {
    if (starts_with(name, "optim.") || starts_with(name, "train.")) continue;
    params.add(name, t);
  }
  return params;
}

std::int64_t steps_per_epoch(std::size_t samples, const TrainConfig& cfg) {
  return (static_cast<std::int64_t>(samples) + cfg.batch - 1) / cfg.batch;
}

std::int64_t total_steps(std::size_t samples, const TrainConfig& cfg) {
  return cfg.max_steps > 0 ? cfg.max_steps : steps_per_epoch(samples, cfg) * cfg.epochs;
}

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(mix_seed(seed, hash_string("epoch")), static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

Tensor stack_gt(const std::vector<SampleRecord>& batch) {
  std::vector<Tensor> parts;
  for (const auto& s : batch) parts.push_back(reshape(s.gt, {1, s.gt.dim(0), s.gt.dim(1), s.gt.dim(2)}));
  return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

}  // namespace

TrainResult train(const std::vector<SampleRecord>& samples, const CRNetConfig& model_cfg, const TrainConfig& cfg,
                  const TrainOptions& options) {
  model_cfg.validate();
  cfg.validate();
  if (samples.empty()) throw ConfigError("train: dataset is empty");
  for (const auto& s : samples) {
    if (cfg.crop > s.gt.dim(1) || cfg.crop > s.gt.dim(2)) {
      throw ConfigError("train.crop " + std::to_string(cfg.crop) + " exceeds sample '" + s.id + "' extent " +
                        std::to_string(s.gt.dim(1)) + "x" + std::to_string(s.gt.dim(2)));
    }
  }
  const ParamLayout layout = model_layout(model_cfg);

  TrainResult r;
  if (options.resume) {
    r.params = options.resume->params.clone();
    r.params.validate(layout);
    r.optim.m = options.resume->optim.m.clone();
    r.optim.v = options.resume->optim.v.clone();
    r.optim.step = options.resume->optim.step;
    r.history = options.resume->history;
  } else {
    r.params = init_params(model_cfg, options.init_seed);
    r.optim = OptimState::zeros_like(r.params);
  }
  r.params.set_requires_grad(true);

  const bool persist = !options.out_dir.empty();
  if (persist) std::filesystem::create_directories(options.out_dir);
  auto save = [&] {
    if (!persist) return;
    save_checkpoint(options.out_dir / "checkpoint.crt1a", {r.params, r.optim, r.history});
    write_file_atomic(options.out_dir / "loss.csv", loss_csv(r.history));
  };

  const std::int64_t spe = steps_per_epoch(samples.size(), cfg);
  const std::int64_t total = total_steps(samples.size(), cfg);
  int cached_epoch = -1;
  std::vector<std::size_t> order;
  for (std::int64_t step = r.optim.step; step < total; ++step) {
    if (options.stop_after > 0 && step >= options.stop_after) break;
    const int epoch = static_cast<int>(step / spe);
    const std::int64_t slot = step % spe;
    if (epoch != cached_epoch) {
      order = epoch_order(samples.size(), cfg.seed, epoch);
      cached_epoch = epoch;
    }
    Rng rng(mix_seed(mix_seed(cfg.seed, hash_string("step")), static_cast<std::uint64_t>(step)));
    std::vector<SampleRecord> batch;
    std::vector<const ExposureStack*> stacks;
    const auto begin = static_cast<std::size_t>(slot * cfg.batch);
    const auto end = std::min(samples.size(), begin + static_cast<std::size_t>(cfg.batch));
    for (std::size_t i = begin; i < end; ++i) {
      const auto& s = samples[order[i]];
      batch.push_back(apply_augment(s, draw_augment(s.gt.dim(1), s.gt.dim(2), cfg.crop, cfg.augment, rng)));
    }
    for (const auto& s : batch) stacks.push_back(&s.stack);

    Tensor pred = forward_batch_unclamped(StackBatch::from(stacks), r.params, model_cfg);
    Tensor loss = training_loss(pred, stack_gt(batch), model_cfg.mu);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      save();
      throw NumericError("non-finite loss at step " + std::to_string(step) +
                         (persist ? "; last good checkpoint kept in " + options.out_dir.string() : std::string()));
    }
    backward(loss);
    const double lr = lr_at(epoch, cfg);
    adamw_step(r.params, r.optim, {lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay});
    r.params.zero_grad();

    LossRecord rec{step, epoch, lr, value};
    r.history.push_back(rec);
    if (options.on_step) options.on_step(rec);
    if (persist && slot == spe - 1 && (epoch + 1) % cfg.checkpoint_every == 0) save();
  }
  save();
  r.params.set_requires_grad(false);
  return r;
}

Tensor predict(const SampleRecord& sample, const ParamStore& params, const CRNetConfig& cfg) {
  NoGradGuard no_grad;
  return forward(sample.stack, params, cfg);
}

EvalResult evaluate(const std::vector<SampleRecord>& samples, const ParamStore& params, const CRNetConfig& cfg) {
  if (samples.empty()) throw ConfigError("evaluate: dataset is empty");
  EvalResult out;
  std::vector<MetricReport> reports;
  for (const auto& s : samples) {
    reports.push_back(measure(predict(s, params, cfg), s.gt, cfg.mu));
    out.per_sample.emplace_back(s.id, reports.back());
  }
  out.mean = mean_report(reports);
  return out;
}

}  // namespace crnet
