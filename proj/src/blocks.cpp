#include "crnet/blocks.hpp"

#include <cmath>
#include <memory>

#include "crnet/error.hpp"
#include "crnet/ops.hpp"

namespace crnet {

const char* to_string(PoolKind kind) { return kind == PoolKind::avg ? "avg" : "max"; }

const char* to_string(FfnMode mode) {
  switch (mode) {
    case FfnMode::inverted: return "inverted";
    case FfnMode::normal_bottleneck: return "normal_bottleneck";
    case FfnMode::flat: return "flat";
  }
  return "?";
}

const char* to_string(CebKernelMode mode) {
  switch (mode) {
    case CebKernelMode::dw7: return "dw7";
    case CebKernelMode::three_dw3: return "three_dw3";
    case CebKernelMode::dw5_dw3: return "dw5_dw3";
  }
  return "?";
}

PoolKind parse_pool_kind(const std::string& text) {
  if (text == "avg") return PoolKind::avg;
  if (text == "max") return PoolKind::max;
  throw ConfigError("unknown pool kind '" + text + "' (expected avg or max)");
}

FfnMode parse_ffn_mode(const std::string& text) {
  if (text == "inverted") return FfnMode::inverted;
  if (text == "normal_bottleneck") return FfnMode::normal_bottleneck;
  if (text == "flat") return FfnMode::flat;
  throw ConfigError("unknown ffn mode '" + text + "' (expected inverted, normal_bottleneck or flat)");
}

CebKernelMode parse_ceb_kernel_mode(const std::string& text) {
  if (text == "dw7") return CebKernelMode::dw7;
  if (text == "three_dw3") return CebKernelMode::three_dw3;
  if (text == "dw5_dw3") return CebKernelMode::dw5_dw3;
  throw ConfigError("unknown ceb kernel mode '" + text + "' (expected dw7, three_dw3 or dw5_dw3)");
}

Tensor apply_conv(const ParamView& p, const Tensor& x, int groups) {
  const Tensor& w = p["weight"];
  return conv2d(x, w, p["bias"], {.stride = 1, .padding = static_cast<int>(w.dim(2) / 2), .groups = groups});
}

FreqPair frequency_separate(const Tensor& f, PoolKind kind) {
  if (f.ndim() != 4) throw ShapeError("frequency_separate: expected [B,C,H,W], got " + to_string(f.shape()));
  if (f.dim(2) % 2 != 0) throw ShapeError("frequency_separate: odd height axis " + std::to_string(f.dim(2)));
  if (f.dim(3) % 2 != 0) throw ShapeError("frequency_separate: odd width axis " + std::to_string(f.dim(3)));
  Tensor low = kind == PoolKind::avg ? avg_pool2d(f) : max_pool2d(f);
  Tensor high = sub(f, bilinear_upsample(low, f.dim(2), f.dim(3)));
  return {low, high};
}

void declare_window_attention(ParamLayout& layout, const std::string& prefix, std::int64_t channels) {
  for (const char* name : {"q", "k", "v", "o"}) layout.add_conv(join_path(prefix, name), channels, channels, 1);
}

namespace {

// Flat index table mapping [N, heads, T, d] token layout to [B, C, H, W].
std::shared_ptr<std::vector<std::int64_t>> window_index(const Shape& s, int heads, int window) {
  const std::int64_t b_n = s[0], c_n = s[1], h_n = s[2], w_n = s[3];
  const std::int64_t d = c_n / heads;
  const std::int64_t wy_n = h_n / window, wx_n = w_n / window;
  const std::int64_t t_n = std::int64_t{window} * window;
  auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(b_n * c_n * h_n * w_n));
  std::size_t i = 0;
  for (std::int64_t b = 0; b < b_n; ++b)
    for (std::int64_t wy = 0; wy < wy_n; ++wy)
      for (std::int64_t wx = 0; wx < wx_n; ++wx)
        for (std::int64_t hh = 0; hh < heads; ++hh)
          for (std::int64_t t = 0; t < t_n; ++t)
            for (std::int64_t j = 0; j < d; ++j) {
              const std::int64_t y = wy * window + t / window;
              const std::int64_t x = wx * window + t % window;
              (*idx)[i++] = ((b * c_n + hh * d + j) * h_n + y) * w_n + x;
            }
  return idx;
}

}  // namespace

Tensor window_self_attention(const Tensor& x, const ParamView& p, int heads, int window, Tensor* attention) {
  if (x.ndim() != 4) throw ShapeError("window_self_attention: expected [B,C,H,W], got " + to_string(x.shape()));
  if (heads < 1 || x.dim(1) % heads != 0) {
    throw ShapeError("window_self_attention: channel axis " + std::to_string(x.dim(1)) +
                     " not divisible by heads " + std::to_string(heads));
  }
  if (window < 1 || x.dim(2) % window != 0) {
    throw ShapeError("window_self_attention: height axis " + std::to_string(x.dim(2)) +
                     " not divisible by window " + std::to_string(window));
  }
  if (x.dim(3) % window != 0) {
    throw ShapeError("window_self_attention: width axis " + std::to_string(x.dim(3)) +
                     " not divisible by window " + std::to_string(window));
  }
  const std::int64_t d = x.dim(1) / heads;
  const std::int64_t n = x.dim(0) * (x.dim(2) / window) * (x.dim(3) / window);
  const std::int64_t t = std::int64_t{window} * window;
  const Shape tokens{n, heads, t, d};

  auto to_tokens = window_index(x.shape(), heads, window);
  auto from_tokens = std::make_shared<std::vector<std::int64_t>>(to_tokens->size());
  for (std::size_t i = 0; i < to_tokens->size(); ++i) (*from_tokens)[static_cast<std::size_t>((*to_tokens)[i])] = static_cast<std::int64_t>(i);

  Tensor q = gather_flat(apply_conv(p.sub("q"), x), tokens, to_tokens);
  Tensor k = gather_flat(apply_conv(p.sub("k"), x), tokens, to_tokens);
  Tensor v = gather_flat(apply_conv(p.sub("v"), x), tokens, to_tokens);
  Tensor scores = mul_scalar(matmul(q, transpose(k, 2, 3)), 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor weights = softmax(scores, 3);
  if (attention) *attention = weights;
  Tensor mixed = gather_flat(matmul(weights, v), x.shape(), from_tokens);
  return add(x, apply_conv(p.sub("o"), mixed));
}

namespace {

void check_split(MbbSplit split) {
  if (split.a < 0 || split.b < 0 || split.a + split.b != 4) {
    throw ConfigError("multi-branch split (" + std::to_string(split.a) + "," + std::to_string(split.b) +
                      ") must be non-negative and sum to 4");
  }
}

Tensor conv_chain(const Tensor& x, const ParamView& p, const char* branch, int length) {
  Tensor y = x;
  for (int i = 0; i < length; ++i) y = gelu(apply_conv(p.sub(branch + std::to_string(i)), y));
  return y;
}

}  // namespace

void declare_multi_branch_block(ParamLayout& layout, const std::string& prefix, std::int64_t channels,
                                MbbSplit split) {
  check_split(split);
  for (int i = 0; i < split.a; ++i) layout.add_conv(join_path(prefix, "a" + std::to_string(i)), channels, channels, 3);
  for (int i = 0; i < split.b; ++i) layout.add_conv(join_path(prefix, "b" + std::to_string(i)), channels, channels, 3);
}

Tensor multi_branch_block(const Tensor& x, const ParamView& p, MbbSplit split) {
  check_split(split);
  if (split.b == 0) return add(conv_chain(x, p, "a", split.a), x);
  if (split.a == 0) return add(conv_chain(x, p, "b", split.b), x);
  return add(add(conv_chain(x, p, "a", split.a), conv_chain(x, p, "b", split.b)), x);
}

void declare_channel_attention(ParamLayout& layout, const std::string& prefix, std::int64_t channels,
                               int reduction) {
  if (reduction < 1 || channels % reduction != 0) {
    throw ConfigError(prefix + ": channels " + std::to_string(channels) + " not divisible by reduction " +
                      std::to_string(reduction));
  }
  layout.add_conv(join_path(prefix, "squeeze"), channels, channels / reduction, 1);
  layout.add_conv(join_path(prefix, "excite"), channels / reduction, channels, 1);
}

Tensor channel_attention(const Tensor& x, const ParamView& p) {
  Tensor g = sigmoid(apply_conv(p.sub("excite"), gelu(apply_conv(p.sub("squeeze"), global_avg_pool(x)))));
  return mul(x, g);
}

void declare_freq_fuse(ParamLayout& layout, const std::string& prefix, std::int64_t channels, int reduction) {
  layout.add_conv(join_path(prefix, "conv3"), 2 * channels, channels, 3);
  declare_channel_attention(layout, join_path(prefix, "ca"), channels, reduction);
  layout.add_conv(join_path(prefix, "conv1"), channels, channels, 1);
}

Tensor freq_fuse(const Tensor& high, const Tensor& low, const ParamView& p) {
  if (high.ndim() != 4 || low.ndim() != 4) throw ShapeError("freq_fuse: expected [B,C,H,W] inputs");
  if (low.dim(2) * 2 != high.dim(2)) {
    throw ShapeError("freq_fuse: low height axis " + std::to_string(low.dim(2)) + " is not half of " +
                     std::to_string(high.dim(2)));
  }
  if (low.dim(3) * 2 != high.dim(3)) {
    throw ShapeError("freq_fuse: low width axis " + std::to_string(low.dim(3)) + " is not half of " +
                     std::to_string(high.dim(3)));
  }
  Tensor up = bilinear_upsample(low, high.dim(2), high.dim(3));
  Tensor y = apply_conv(p.sub("conv3"), concat({up, high}, 1));
  return apply_conv(p.sub("conv1"), channel_attention(y, p.sub("ca")));
}

std::int64_t ffn_hidden(std::int64_t channels, FfnMode mode, int expansion) {
  if (expansion < 1) throw ConfigError("ffn expansion must be >= 1, got " + std::to_string(expansion));
  switch (mode) {
    case FfnMode::inverted: return channels * expansion;
    case FfnMode::normal_bottleneck:
      if (channels % expansion != 0) {
        throw ConfigError("normal_bottleneck ffn: channels " + std::to_string(channels) +
                          " not divisible by expansion " + std::to_string(expansion));
      }
      return channels / expansion;
    case FfnMode::flat: return channels;
  }
  return channels;
}

void declare_conv_ffn(ParamLayout& layout, const std::string& prefix, std::int64_t channels, FfnMode mode,
                      int expansion) {
  const std::int64_t hidden = ffn_hidden(channels, mode, expansion);
  layout.add_conv(join_path(prefix, "expand"), channels, hidden, 1);
  layout.add_conv(join_path(prefix, "project"), hidden, channels, 1);
}

Tensor conv_ffn(const Tensor& x, const ParamView& p) {
  return add(apply_conv(p.sub("project"), gelu(apply_conv(p.sub("expand"), x))), x);
}

namespace {

std::vector<int> depthwise_kernels(CebKernelMode mode) {
  switch (mode) {
    case CebKernelMode::dw7: return {7};
    case CebKernelMode::three_dw3: return {3, 3, 3};
    case CebKernelMode::dw5_dw3: return {5, 3};
  }
  return {};
}

}  // namespace

void declare_conv_enhancement_block(ParamLayout& layout, const std::string& prefix, std::int64_t channels,
                                    CebKernelMode kernel_mode, FfnMode ffn_mode, int expansion) {
  layout.add_conv(join_path(prefix, "pw_in"), channels, channels, 1);
  const auto kernels = depthwise_kernels(kernel_mode);
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    layout.add_conv(join_path(prefix, "dw" + std::to_string(i)), channels, channels, kernels[i],
                    static_cast<int>(channels));
  }
  layout.add_conv(join_path(prefix, "pw_out"), channels, channels, 1);
  declare_conv_ffn(layout, join_path(prefix, "ffn"), channels, ffn_mode, expansion);
}

Tensor conv_enhancement_block(const Tensor& x, const ParamView& p, CebKernelMode kernel_mode) {
  const int groups = static_cast<int>(x.dim(1));
  Tensor y = gelu(apply_conv(p.sub("pw_in"), x));
  const auto kernels = depthwise_kernels(kernel_mode);
  for (std::size_t i = 0; i < kernels.size(); ++i) y = gelu(apply_conv(p.sub("dw" + std::to_string(i)), y, groups));
  y = gelu(apply_conv(p.sub("pw_out"), y));
  return add(x, conv_ffn(y, p.sub("ffn")));
}

}  // namespace crnet
