#include "crnet/model.hpp"

#include <cmath>
#include <limits>

#include "crnet/autograd.hpp"
#include "crnet/detail/dispatch.hpp"
#include "crnet/error.hpp"
#include "crnet/ops.hpp"

namespace crnet {

using detail::dispatch;

const char* to_string(FusionMode mode) { return mode == FusionMode::joint ? "joint" : "recurrent"; }

FusionMode parse_fusion_mode(const std::string& text) {
  if (text == "joint") return FusionMode::joint;
  if (text == "recurrent") return FusionMode::recurrent;
  throw ConfigError("unknown fusion mode '" + text + "' (expected joint or recurrent)");
}

void CRNetConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(base_channels >= 1, "model.base_channels must be >= 1");
  need(n_ceb >= 1, "model.n_ceb must be >= 1");
  need(n_hfem >= 1, "model.n_hfem must be >= 1");
  need(mbb_split.a >= 0 && mbb_split.b >= 0 && mbb_split.a + mbb_split.b == 4,
       "model.mbb_split must be two non-negative counts summing to 4");
  need(attn_window >= 1, "model.attn_window must be >= 1");
  need(attn_heads >= 1 && base_channels % attn_heads == 0, "model.attn_heads must divide model.base_channels");
  need(ca_reduction >= 1 && base_channels % ca_reduction == 0,
       "model.ca_reduction must divide model.base_channels");
  need(ffn_expansion >= 1, "model.ffn_expansion must be >= 1");
  need(ffn_mode != FfnMode::normal_bottleneck || base_channels % ffn_expansion == 0,
       "model.ffn_expansion must divide model.base_channels for the normal_bottleneck ffn");
  need(gamma > 0 && std::isfinite(gamma), "model.gamma must be positive");
  need(mu > 0 && std::isfinite(mu), "model.mu must be positive");
}

namespace {

void check_exposures(const std::array<double, kFrames>& t) {
  for (int i = 0; i < kFrames; ++i) {
    if (!(t[i] > 0) || !std::isfinite(t[i])) {
      throw ShapeError("exposure time " + std::to_string(i) + " must be positive and finite");
    }
    if (i > 0 && !(t[i] > t[i - 1])) {
      throw ShapeError("exposure times must be strictly increasing (frame " + std::to_string(i) + ")");
    }
  }
}

}  // namespace

void ExposureStack::validate() const {
  check_exposures(exposure_times);
  for (int i = 0; i < kFrames; ++i) {
    const auto& f = frames[i];
    if (!f.defined() || f.ndim() != 3 || f.dim(0) != kRawChannels) {
      throw ShapeError("frame " + std::to_string(i) + " must be [4,H,W]");
    }
    if (f.shape() != frames[0].shape() || f.dtype() != frames[0].dtype()) {
      throw ShapeError("frame " + std::to_string(i) + " shape " + to_string(f.shape()) + " differs from frame 0 " +
                       to_string(frames[0].shape()));
    }
  }
}

StackBatch StackBatch::from(const std::vector<const ExposureStack*>& stacks) {
  if (stacks.empty()) throw ShapeError("StackBatch: no samples");
  StackBatch out;
  for (int i = 0; i < kFrames; ++i) {
    std::vector<Tensor> parts;
    for (const auto* s : stacks) {
      const auto& f = s->frames[i];
      parts.push_back(reshape(f, {1, f.dim(0), f.dim(1), f.dim(2)}));
    }
    out.frames[i] = parts.size() == 1 ? parts[0] : concat(parts, 0);
  }
  for (const auto* s : stacks) {
    s->validate();
    out.exposure_times.push_back(s->exposure_times);
  }
  return out;
}

void StackBatch::validate() const {
  for (int i = 0; i < kFrames; ++i) {
    const auto& f = frames[i];
    if (!f.defined() || f.ndim() != 4 || f.dim(1) != kRawChannels) {
      throw ShapeError("batched frame " + std::to_string(i) + " must be [B,4,H,W]");
    }
    if (f.shape() != frames[0].shape() || f.dtype() != frames[0].dtype()) {
      throw ShapeError("batched frame " + std::to_string(i) + " differs in shape from frame 0");
    }
  }
  if (static_cast<std::int64_t>(exposure_times.size()) != frames[0].dim(0)) {
    throw ShapeError("batch has " + std::to_string(frames[0].dim(0)) + " samples but " +
                     std::to_string(exposure_times.size()) + " exposure rows");
  }
  for (const auto& t : exposure_times) check_exposures(t);
}

std::array<Tensor, kFrames> preprocess(const StackBatch& batch, double gamma) {
  batch.validate();
  const std::int64_t b = batch.batch();
  std::array<Tensor, kFrames> out;
  for (int i = 0; i < kFrames; ++i) {
    Buffer ratio(batch.frames[i].dtype(), static_cast<std::size_t>(b));
    for (std::int64_t s = 0; s < b; ++s) {
      const auto& t = batch.exposure_times[static_cast<std::size_t>(s)];
      ratio.set(static_cast<std::size_t>(s), t[i] / t[0]);
    }
    Tensor normalized = clamp_min(div(batch.frames[i], Tensor::from({b, 1, 1, 1}, std::move(ratio))), 0.0);
    out[i] = concat({normalized, pow_scalar(normalized, gamma)}, 1);
  }
  return out;
}

std::array<Tensor, kFrames> preprocess(const ExposureStack& stack, double gamma) {
  auto batched = preprocess(StackBatch::from({&stack}), gamma);
  for (auto& t : batched) t = reshape(t, {t.dim(1), t.dim(2), t.dim(3)});
  return batched;
}

Tensor warp_by_flow(const Tensor& feature, const Tensor& flow) {
  if (feature.ndim() != 4) throw ShapeError("warp_by_flow: feature must be [B,C,H,W]");
  const std::int64_t b_n = feature.dim(0), c_n = feature.dim(1), h_n = feature.dim(2), w_n = feature.dim(3);
  const bool shared = flow.ndim() == 3;
  if (!(shared || flow.ndim() == 4)) throw ShapeError("warp_by_flow: flow must be [B,2,H,W] or [2,H,W]");
  const std::size_t off = shared ? 0 : 1;
  if (!shared && flow.dim(0) != b_n) throw ShapeError("warp_by_flow: flow batch axis mismatch");
  if (flow.dim(off) != 2) throw ShapeError("warp_by_flow: flow channel axis must be 2");
  if (flow.dim(off + 1) != h_n) throw ShapeError("warp_by_flow: flow height axis mismatch");
  if (flow.dim(off + 2) != w_n) throw ShapeError("warp_by_flow: flow width axis mismatch");

  struct Tap {
    std::int64_t i00, i01, i10, i11;
    double fx, fy;
  };
  const std::int64_t plane = h_n * w_n;
  auto taps = std::make_shared<std::vector<Tap>>(static_cast<std::size_t>(b_n * plane));
  const Buffer& fb = flow.buffer();
  for (std::int64_t b = 0; b < b_n; ++b) {
    const std::int64_t base = shared ? 0 : b * 2 * plane;
    for (std::int64_t y = 0; y < h_n; ++y) {
      for (std::int64_t x = 0; x < w_n; ++x) {
        const double dx = fb.get(static_cast<std::size_t>(base + y * w_n + x));
        const double dy = fb.get(static_cast<std::size_t>(base + plane + y * w_n + x));
        if (!std::isfinite(dx) || !std::isfinite(dy)) throw NumericError("warp_by_flow: non-finite flow");
        const double sx = std::clamp(static_cast<double>(x) + dx, 0.0, static_cast<double>(w_n - 1));
        const double sy = std::clamp(static_cast<double>(y) + dy, 0.0, static_cast<double>(h_n - 1));
        const auto x0 = static_cast<std::int64_t>(std::floor(sx));
        const auto y0 = static_cast<std::int64_t>(std::floor(sy));
        const std::int64_t x1 = std::min(x0 + 1, w_n - 1);
        const std::int64_t y1 = std::min(y0 + 1, h_n - 1);
        (*taps)[static_cast<std::size_t>(b * plane + y * w_n + x)] = {
            y0 * w_n + x0, y0 * w_n + x1, y1 * w_n + x0, y1 * w_n + x1, sx - static_cast<double>(x0),
            sy - static_cast<double>(y0)};
      }
    }
  }

  return dispatch(feature.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Buffer out(feature.dtype(), static_cast<std::size_t>(feature.numel()));
    const T* xs = feature.data<T>().data();
    T* ys = out.view<T>().data();
    for (std::int64_t b = 0; b < b_n; ++b) {
      for (std::int64_t c = 0; c < c_n; ++c) {
        const T* in = xs + (b * c_n + c) * plane;
        T* o = ys + (b * c_n + c) * plane;
        for (std::int64_t p = 0; p < plane; ++p) {
          const Tap& t = (*taps)[static_cast<std::size_t>(b * plane + p)];
          const T fx = static_cast<T>(t.fx), fy = static_cast<T>(t.fy);
          const T top = in[t.i00] + fx * (in[t.i01] - in[t.i00]);
          const T bot = in[t.i10] + fx * (in[t.i11] - in[t.i10]);
          o[p] = top + fy * (bot - top);
        }
      }
    }
    return make_result(feature.shape(), std::move(out), "warp_by_flow", {feature},
                       [taps, b_n, c_n, plane](const Buffer& gy, std::span<Buffer* const> gin) {
                         if (!gin[0]) return;
                         const T* go = gy.view<T>().data();
                         T* gx = gin[0]->view<T>().data();
                         for (std::int64_t b = 0; b < b_n; ++b) {
                           for (std::int64_t c = 0; c < c_n; ++c) {
                             const T* g = go + (b * c_n + c) * plane;
                             T* d = gx + (b * c_n + c) * plane;
                             for (std::int64_t p = 0; p < plane; ++p) {
                               const Tap& t = (*taps)[static_cast<std::size_t>(b * plane + p)];
                               const T fx = static_cast<T>(t.fx), fy = static_cast<T>(t.fy);
                               d[t.i00] += g[p] * (1 - fx) * (1 - fy);
                               d[t.i01] += g[p] * fx * (1 - fy);
                               d[t.i10] += g[p] * (1 - fx) * fy;
                               d[t.i11] += g[p] * fx * fy;
                             }
                           }
                         }
                       });
  });
}

Tensor estimate_flow(const Tensor& ref, const Tensor& frame, int block, int radius) {
  if (ref.ndim() != 4 || ref.shape() != frame.shape()) {
    throw ShapeError("estimate_flow: ref " + to_string(ref.shape()) + " and frame " + to_string(frame.shape()) +
                     " must be matching [B,C,H,W]");
  }
  if (block < 1 || radius < 0) throw ConfigError("estimate_flow: block must be >= 1 and radius >= 0");
  const std::int64_t b_n = ref.dim(0), c_n = ref.dim(1), h_n = ref.dim(2), w_n = ref.dim(3);
  const std::int64_t plane = h_n * w_n;
  const Buffer& rb = ref.buffer();
  const Buffer& fb = frame.buffer();
  Buffer flow(ref.dtype(), static_cast<std::size_t>(b_n * 2 * plane));
  for (std::int64_t b = 0; b < b_n; ++b) {
    for (std::int64_t by = 0; by < h_n; by += block) {
      for (std::int64_t bx = 0; bx < w_n; bx += block) {
        const std::int64_t ey = std::min(by + block, h_n), ex = std::min(bx + block, w_n);
        auto sad = [&](int dy, int dx) {
          double total = 0;
          for (std::int64_t c = 0; c < c_n; ++c) {
            const std::int64_t base = (b * c_n + c) * plane;
            for (std::int64_t y = by; y < ey; ++y) {
              const std::int64_t sy = std::clamp<std::int64_t>(y + dy, 0, h_n - 1);
              for (std::int64_t x = bx; x < ex; ++x) {
                const std::int64_t sx = std::clamp<std::int64_t>(x + dx, 0, w_n - 1);
                total += std::abs(rb.get(static_cast<std::size_t>(base + y * w_n + x)) -
                                  fb.get(static_cast<std::size_t>(base + sy * w_n + sx)));
              }
            }
          }
          return total;
        };
        int best_dx = 0, best_dy = 0;
        double best = sad(0, 0);
        for (int dy = -radius; dy <= radius; ++dy) {
          for (int dx = -radius; dx <= radius; ++dx) {
            if (dx == 0 && dy == 0) continue;
            const double s = sad(dy, dx);
            if (s < best) {
              best = s;
              best_dx = dx;
              best_dy = dy;
            }
          }
        }
        for (std::int64_t y = by; y < ey; ++y) {
          for (std::int64_t x = bx; x < ex; ++x) {
            flow.set(static_cast<std::size_t>(b * 2 * plane + y * w_n + x), best_dx);
            flow.set(static_cast<std::size_t>(b * 2 * plane + plane + y * w_n + x), best_dy);
          }
        }
      }
    }
  }
  return Tensor::from({b_n, 2, h_n, w_n}, std::move(flow));
}

FlowSet estimate_flows(const std::array<Tensor, kFrames>& inputs, int block, int radius) {
  NoGradGuard no_grad;
  std::array<Tensor, kFrames> guide;
  for (int i = 0; i < kFrames; ++i) {
    const auto& x = inputs[i];
    const std::int64_t c = x.dim(1) / 2;
    Tensor l = narrow(x.detach(), 1, c, c);
    Tensor acc = narrow(l, 1, 0, 1);
    for (std::int64_t k = 1; k < c; ++k) acc = add(acc, narrow(l, 1, k, 1));
    guide[i] = mul_scalar(acc, 1.0 / static_cast<double>(c));
  }
  FlowSet flows;
  for (int i = 1; i < kFrames; ++i) flows[i] = estimate_flow(guide[0], guide[i], block, radius);
  return flows;
}

ParamLayout model_layout(const CRNetConfig& cfg) {
  cfg.validate();
  const std::int64_t c = cfg.base_channels;
  ParamLayout layout;
  layout.add_conv("shallow", 2 * kRawChannels, c, 3);
  layout.add_conv("reduce", kFrames * c, c, 1);
  for (int k = 0; k < cfg.n_hfem; ++k) {
    const std::string h = "hfem" + std::to_string(k);
    declare_window_attention(layout, h + ".attn", c);
    declare_multi_branch_block(layout, h + ".mbb_high0", c, cfg.mbb_split);
    for (int j = 0; j < 3; ++j) declare_multi_branch_block(layout, h + ".mbb_low" + std::to_string(j), c, cfg.mbb_split);
    declare_freq_fuse(layout, h + ".fuse", c, cfg.ca_reduction);
    for (int j = 0; j < cfg.n_ceb; ++j) {
      declare_conv_enhancement_block(layout, h + ".ceb" + std::to_string(j), c, cfg.ceb_kernel_mode, cfg.ffn_mode,
                                     cfg.ffn_expansion);
    }
  }
  layout.add_conv("ref", c, c, 3);
  layout.add_conv("fusion.conv0", (cfg.n_hfem + 1) * c, c, 3);
  layout.add_conv("fusion.conv1", c, c, 3);
  layout.add_conv("head", c, kRawChannels, 3);
  return layout;
}

std::int64_t count_params(const CRNetConfig& cfg) { return model_layout(cfg).count(); }

ParamStore init_params(const CRNetConfig& cfg, std::uint64_t seed, DType dtype) {
  ParamStore store = ParamStore::initialize(model_layout(cfg), seed, dtype);
  for (auto& [path, t] : store.entries()) {
    if (path.size() > 5 && path.compare(path.size() - 5, 5, ".bias") == 0) t = Tensor::zeros(t.shape(), dtype);
  }
  return store;
}

Tensor hfem(const Tensor& x, const ParamView& p, const CRNetConfig& cfg) {
  Tensor high, low;
  if (cfg.freq_separation) {
    FreqPair fp = frequency_separate(x, cfg.pool_kind);
    high = fp.high;
    low = fp.low;
  } else {
    high = x;
    low = cfg.pool_kind == PoolKind::avg ? avg_pool2d(x) : max_pool2d(x);
  }
  Tensor h = window_self_attention(high, p.sub("attn"), cfg.attn_heads, cfg.attn_window);
  h = multi_branch_block(h, p.sub("mbb_high0"), cfg.mbb_split);
  Tensor l = low;
  for (int j = 0; j < 3; ++j) l = multi_branch_block(l, p.sub("mbb_low" + std::to_string(j)), cfg.mbb_split);
  Tensor y = freq_fuse(h, l, p.sub("fuse"));
  for (int j = 0; j < cfg.n_ceb; ++j) y = conv_enhancement_block(y, p.sub("ceb" + std::to_string(j)), cfg.ceb_kernel_mode);
  return y;
}

namespace {

std::vector<Tensor> hfem_chain(Tensor x, const ParamStore& params, const CRNetConfig& cfg) {
  std::vector<Tensor> outs;
  for (int k = 0; k < cfg.n_hfem; ++k) {
    x = hfem(x, ParamView(params, "hfem" + std::to_string(k)), cfg);
    outs.push_back(x);
  }
  return outs;
}

}  // namespace

Tensor forward_batch_unclamped(const StackBatch& batch, const ParamStore& params, const CRNetConfig& cfg,
                               const std::optional<FlowSet>& flows) {
  params.validate(model_layout(cfg));
  const auto inputs = preprocess(batch, cfg.gamma);
  const std::int64_t h = inputs[0].dim(2), w = inputs[0].dim(3);
  if (h % 2 != 0 || w % 2 != 0 || h % cfg.attn_window != 0 || w % cfg.attn_window != 0) {
    throw ShapeError("forward: spatial extent " + std::to_string(h) + "x" + std::to_string(w) +
                     " must be a multiple of 2 and of model.attn_window (" + std::to_string(cfg.attn_window) + ")");
  }
  const FlowSet flow = flows ? *flows : estimate_flows(inputs);
  const ParamView p(params);

  std::array<Tensor, kFrames> feats;
  for (int i = 0; i < kFrames; ++i) {
    feats[i] = gelu(apply_conv(p.sub("shallow"), inputs[i]));
    if (i > 0 && flow[i].defined()) feats[i] = warp_by_flow(feats[i], flow[i]);
  }

  std::vector<Tensor> outs;
  if (cfg.fusion_mode == FusionMode::joint) {
    outs = hfem_chain(apply_conv(p.sub("reduce"), concat(std::vector<Tensor>(feats.begin(), feats.end()), 1)), params, cfg);
  } else {
    const Tensor zero = Tensor::zeros(feats[0].shape(), feats[0].dtype());
    Tensor state;
    for (int t = 0; t < kFrames; ++t) {
      std::vector<Tensor> slots(kFrames, zero);
      slots[static_cast<std::size_t>(t)] = feats[t];
      Tensor x = apply_conv(p.sub("reduce"), concat(slots, 1));
      if (state.defined()) x = add(x, state);
      outs = hfem_chain(x, params, cfg);
      state = outs.back();
    }
  }

  outs.push_back(gelu(apply_conv(p.sub("ref"), feats[0])));
  Tensor y = gelu(apply_conv(p.sub("fusion.conv0"), concat(outs, 1)));
  y = gelu(apply_conv(p.sub("fusion.conv1"), y));
  return apply_conv(p.sub("head"), y);
}

Tensor forward_batch(const StackBatch& batch, const ParamStore& params, const CRNetConfig& cfg,
                     const std::optional<FlowSet>& flows) {
  return clamp_min(forward_batch_unclamped(batch, params, cfg, flows), 0.0);
}

Tensor forward(const ExposureStack& stack, const ParamStore& params, const CRNetConfig& cfg,
               const std::optional<FlowSet>& flows) {
  Tensor out = forward_batch(StackBatch::from({&stack}), params, cfg, flows);
  return reshape(out, {out.dim(1), out.dim(2), out.dim(3)});
}

CRNetConfig ablation_config(const std::string& name, const CRNetConfig& base) {
  CRNetConfig cfg = base;
  if (name == "full") {
  } else if (name == "no_freq_sep") {
    cfg.freq_separation = false;
  } else if (name == "mbb_2_2") {
    cfg.mbb_split = {2, 2};
  } else if (name == "mbb_4_0") {
    cfg.mbb_split = {4, 0};
  } else if (name == "ceb_3x3x3") {
    cfg.ceb_kernel_mode = CebKernelMode::three_dw3;
  } else if (name == "ceb_5x5_3x3") {
    cfg.ceb_kernel_mode = CebKernelMode::dw5_dw3;
  } else if (name == "ffn_normal_bottleneck") {
    cfg.ffn_mode = FfnMode::normal_bottleneck;
  } else if (name == "ffn_flat") {
    cfg.ffn_mode = FfnMode::flat;
  } else if (name == "recurrent") {
    cfg.fusion_mode = FusionMode::recurrent;
  } else {
    std::string known;
    for (const auto& n : ablation_variants()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown ablation variant '" + name + "' (expected one of " + known + ")");
  }
  cfg.validate();
  return cfg;
}

AblationModel build_ablation_variant(const std::string& name, const CRNetConfig& base, std::uint64_t seed) {
  CRNetConfig cfg = ablation_config(name, base);
  return {cfg, init_params(cfg, seed)};
}

}  // namespace crnet
