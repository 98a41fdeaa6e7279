#pragma once

#include <string>

#include "crnet/params.hpp"
#include "crnet/tensor.hpp"

namespace crnet {

enum class PoolKind { avg, max };
enum class FfnMode { inverted, normal_bottleneck, flat };
enum class CebKernelMode { dw7, three_dw3, dw5_dw3 };

struct MbbSplit {
  int a = 3;
  int b = 1;
  bool operator==(const MbbSplit&) const = default;
};

const char* to_string(PoolKind kind);
const char* to_string(FfnMode mode);
const char* to_string(CebKernelMode mode);
PoolKind parse_pool_kind(const std::string& text);
FfnMode parse_ffn_mode(const std::string& text);
CebKernelMode parse_ceb_kernel_mode(const std::string& text);

// Same-size convolution with the `weight` and `bias` found under `p`; padding
// is derived from the kernel extent.
Tensor apply_conv(const ParamView& p, const Tensor& x, int groups = 1);

struct FreqPair {
  Tensor low;   // pool(F), half resolution
  Tensor high;  // F - upsample(low)
};

FreqPair frequency_separate(const Tensor& f, PoolKind kind);

// Non-overlapping window multi-head self-attention with 1x1 q/k/v/o
// projections and a residual add. `attention` (optional) receives the
// softmax weights, shape [B * windows, heads, window^2, window^2].
void declare_window_attention(ParamLayout& layout, const std::string& prefix, std::int64_t channels);
Tensor window_self_attention(const Tensor& x, const ParamView& p, int heads, int window,
                             Tensor* attention = nullptr);

// A(F) + B(F) + F where A and B are chains of 3x3 conv + GELU of length
// split.a and split.b. An empty chain is the identity path and shares the
// residual addition, so (4, 0) yields A(F) + F.
void declare_multi_branch_block(ParamLayout& layout, const std::string& prefix, std::int64_t channels,
                                MbbSplit split);
Tensor multi_branch_block(const Tensor& x, const ParamView& p, MbbSplit split);

// F * sigmoid(conv1x1(GELU(conv1x1(global_avg_pool(F))))), C -> C/reduction -> C.
void declare_channel_attention(ParamLayout& layout, const std::string& prefix, std::int64_t channels,
                               int reduction);
Tensor channel_attention(const Tensor& x, const ParamView& p);

// conv1x1(CA(conv3x3(concat(up(low), high)))).
void declare_freq_fuse(ParamLayout& layout, const std::string& prefix, std::int64_t channels, int reduction);
Tensor freq_fuse(const Tensor& high, const Tensor& low, const ParamView& p);

// conv1x1 -> GELU -> conv1x1 plus residual. Hidden width: C * expansion
// (inverted), C / expansion (normal_bottleneck) or C (flat).
std::int64_t ffn_hidden(std::int64_t channels, FfnMode mode, int expansion);
void declare_conv_ffn(ParamLayout& layout, const std::string& prefix, std::int64_t channels, FfnMode mode,
                      int expansion);
Tensor conv_ffn(const Tensor& x, const ParamView& p);

// F1 + conv_ffn(GELU(pw_out(GELU(depthwise(GELU(pw_in(F1))))))). The depthwise
// stage is one 7x7, three 3x3, or 5x5 then 3x3, each followed by GELU.
void declare_conv_enhancement_block(ParamLayout& layout, const std::string& prefix, std::int64_t channels,
                                    CebKernelMode kernel_mode, FfnMode ffn_mode, int expansion);
Tensor conv_enhancement_block(const Tensor& x, const ParamView& p, CebKernelMode kernel_mode);

}  // namespace crnet
