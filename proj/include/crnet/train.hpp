#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "crnet/metrics.hpp"
#include "crnet/model.hpp"
#include "crnet/params.hpp"
#include "crnet/rng.hpp"
#include "crnet/synth.hpp"

namespace crnet {

struct TrainConfig {
  double initial_lr = 1e-4;
  double lr_gamma = 0.5;
  int lr_step_epochs = 80;
  std::int64_t crop = 128;
  int epochs = 1;
  // When positive, overrides epochs * steps_per_epoch as the run length.
  std::int64_t max_steps = 0;
  int batch = 4;
  std::uint64_t seed = 0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool augment = true;
  // Checkpoint cadence in epochs; a final checkpoint is always written.
  int checkpoint_every = 10;

  void validate() const;
};

// initial_lr * lr_gamma ^ floor(epoch / lr_step_epochs).
double lr_at(int epoch, const TrainConfig& cfg);

struct OptimState {
  ParamStore m;
  ParamStore v;
  std::int64_t step = 0;

  static OptimState zeros_like(const ParamStore& params);
};

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Parameters whose path ends in ".bias" are exempt from weight decay.
bool decays(const std::string& path);

// Decoupled weight decay p *= 1 - lr * wd, then the bias-corrected Adam step
// p -= lr * m_hat / (sqrt(v_hat) + eps), evaluated in double. Every parameter
// must carry a gradient; the first one without is reported by path.
void adamw_step(ParamStore& params, OptimState& state, const AdamWOptions& options);

struct AugmentDraw {
  std::int64_t top = 0;
  std::int64_t left = 0;
  std::int64_t crop = 0;
  bool flip = false;     // mirror along the width axis, applied after cropping
  int quarter_turns = 0;  // counter-clockwise, applied after the flip
};

AugmentDraw draw_augment(std::int64_t height, std::int64_t width, std::int64_t crop, bool geometric, Rng& rng);
// Applies one draw identically to every frame and to the ground truth.
SampleRecord apply_augment(const SampleRecord& sample, const AugmentDraw& draw);
SampleRecord augment(const SampleRecord& sample, std::int64_t crop, Rng& rng);

struct LossRecord {
  std::int64_t step = 0;
  int epoch = 0;
  double lr = 0;
  double loss = 0;
};

std::string loss_csv(const std::vector<LossRecord>& history);

struct Checkpoint {
  ParamStore params;
  OptimState optim;
  std::vector<LossRecord> history;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Parameters only; accepts either a full checkpoint or a bare parameter archive.
ParamStore load_params(const std::filesystem::path& path);

struct TrainOptions {
  // Where checkpoint.crt1a and loss.csv go; empty disables persistence.
  std::filesystem::path out_dir;
  std::optional<Checkpoint> resume;
  std::uint64_t init_seed = 0;
  // Stop after this many steps of the schedule (for tests that interrupt a run).
  std::int64_t stop_after = 0;
  std::function<void(const LossRecord&)> on_step;
};

struct TrainResult {
  ParamStore params;
  OptimState optim;
  std::vector<LossRecord> history;
};

std::int64_t steps_per_epoch(std::size_t samples, const TrainConfig& cfg);
std::int64_t total_steps(std::size_t samples, const TrainConfig& cfg);

// Sample order for each epoch and augmentation for each step come from
// streams seeded by (seed, epoch) and (seed, step), so a resumed run replays
// the same batches as an unbroken one.
TrainResult train(const std::vector<SampleRecord>& samples, const CRNetConfig& model_cfg, const TrainConfig& train_cfg,
                  const TrainOptions& options = {});

struct EvalResult {
  std::vector<std::pair<std::string, MetricReport>> per_sample;
  MetricReport mean;
};

Tensor predict(const SampleRecord& sample, const ParamStore& params, const CRNetConfig& cfg);
EvalResult evaluate(const std::vector<SampleRecord>& samples, const ParamStore& params, const CRNetConfig& cfg);

}  // namespace crnet
