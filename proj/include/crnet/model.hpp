#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "crnet/blocks.hpp"
#include "crnet/params.hpp"
#include "crnet/tensor.hpp"

namespace crnet {

inline constexpr int kFrames = 5;
// Packed RGGB planes per raw frame.
inline constexpr int kRawChannels = 4;

enum class FusionMode { joint, recurrent };
const char* to_string(FusionMode mode);
FusionMode parse_fusion_mode(const std::string& text);

struct CRNetConfig {
  std::int64_t base_channels = 64;
  int n_ceb = 10;
  int n_hfem = 3;
  MbbSplit mbb_split{3, 1};
  PoolKind pool_kind = PoolKind::avg;
  int attn_window = 8;
  int attn_heads = 4;
  int ca_reduction = 4;
  FfnMode ffn_mode = FfnMode::inverted;
  int ffn_expansion = 4;
  CebKernelMode ceb_kernel_mode = CebKernelMode::dw7;
  FusionMode fusion_mode = FusionMode::joint;
  // Pass the unseparated map to attention and pair it with its pooled copy.
  bool freq_separation = true;
  double gamma = 1.0 / 2.2;
  double mu = 5000.0;

  // Throws ConfigError naming the first invalid field.
  void validate() const;
  bool operator==(const CRNetConfig&) const = default;
};

// Five raw frames [C_raw, H, W] ordered from shortest to longest exposure;
// frame 0 is the reference.
struct ExposureStack {
  std::array<Tensor, kFrames> frames;
  std::array<double, kFrames> exposure_times{1, 4, 16, 64, 256};

  void validate() const;
};

// Batched form: frames[i] is [B, C_raw, H, W]; one exposure row per sample.
struct StackBatch {
  std::array<Tensor, kFrames> frames;
  std::vector<std::array<double, kFrames>> exposure_times;

  static StackBatch from(const std::vector<const ExposureStack*>& stacks);
  std::int64_t batch() const { return frames[0].dim(0); }
  void validate() const;
};

// Per-frame [B, 2, H, W] (dx, dy) displacement in pixels. Frame 0 is unused.
using FlowSet = std::array<Tensor, kFrames>;

// I_i = concat(R_i / (dt_i / dt_0) clipped at 0, that value ^ gamma), each [B, 2*C_raw, H, W].
std::array<Tensor, kFrames> preprocess(const StackBatch& batch, double gamma);
std::array<Tensor, kFrames> preprocess(const ExposureStack& stack, double gamma);

// Backward warp: out(y, x) = feature(y + dy, x + dx), bilinear with clamped
// borders. Differentiable with respect to `feature`. `flow` is [B, 2, H, W]
// or [2, H, W] (shared by the batch).
Tensor warp_by_flow(const Tensor& feature, const Tensor& flow);

// Integer block matching by sum of absolute differences over [B, C, H, W]
// inputs. The result satisfies warp_by_flow(frame, flow) ~ ref: a frame whose
// content sits 2 px to the right of ref yields (+2, 0). Ties prefer zero
// displacement, then the first candidate in row-major (dy, dx) order.
Tensor estimate_flow(const Tensor& ref, const Tensor& frame, int block = 8, int radius = 4);

// Flows for frames 1..4 against frame 0, matched on the mean of the
// gamma-mapped channels of the preprocessed inputs.
FlowSet estimate_flows(const std::array<Tensor, kFrames>& inputs, int block = 8, int radius = 4);

ParamLayout model_layout(const CRNetConfig& cfg);
std::int64_t count_params(const CRNetConfig& cfg);
// Weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)) seeded per path; biases zero.
ParamStore init_params(const CRNetConfig& cfg, std::uint64_t seed, DType dtype = DType::f32);

// One High-Frequency Enhancement Module.
Tensor hfem(const Tensor& x, const ParamView& p, const CRNetConfig& cfg);

// Head output before the clamp at 0.
Tensor forward_batch_unclamped(const StackBatch& batch, const ParamStore& params, const CRNetConfig& cfg,
                               const std::optional<FlowSet>& flows = std::nullopt);
// Returns [B, C_raw, H, W]; H and W must be multiples of 2 and of attn_window.
Tensor forward_batch(const StackBatch& batch, const ParamStore& params, const CRNetConfig& cfg,
                     const std::optional<FlowSet>& flows = std::nullopt);
// Returns [C_raw, H, W].
Tensor forward(const ExposureStack& stack, const ParamStore& params, const CRNetConfig& cfg,
               const std::optional<FlowSet>& flows = std::nullopt);

inline const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> names{"full",     "no_freq_sep",           "mbb_2_2",  "mbb_4_0",
                                              "ceb_3x3x3", "ceb_5x5_3x3",          "ffn_normal_bottleneck",
                                              "ffn_flat", "recurrent"};
  return names;
}

CRNetConfig ablation_config(const std::string& name, const CRNetConfig& base);

struct AblationModel {
  CRNetConfig cfg;
  ParamStore params;
};
AblationModel build_ablation_variant(const std::string& name, const CRNetConfig& base, std::uint64_t seed);

}  // namespace crnet
