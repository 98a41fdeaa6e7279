// Acceptance run: one PASS/FAIL line per criterion. With no arguments every
// criterion runs; otherwise only the named ones. Exit status is nonzero when
// any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "crnet/autograd.hpp"
#include "crnet/blocks.hpp"
#include "crnet/config.hpp"
#include "crnet/io.hpp"
#include "crnet/metrics.hpp"
#include "crnet/model.hpp"
#include "crnet/ops.hpp"
#include "crnet/synth.hpp"
#include "crnet/train.hpp"

using namespace crnet;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  std::function<Outcome()> run;
};

std::string num(double v, const char* f = "%.3g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// sum(w * y) with w drawn from `lo..hi`; elementwise checks keep w away from 0
// so no checked gradient is tiny relative to the summation round-off.
Tensor probe(const Tensor& y, double lo = -1.0, double hi = 1.0, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(y, random_uniform(y.shape(), lo, hi, rng, y.dtype())));
}

Tensor positive_probe(const Tensor& y) { return probe(y, 0.5, 1.5); }

ParamStore replaced(const ParamStore& store, const std::string& path, const Tensor& value) {
  NamedTensors e = store.entries();
  for (auto& kv : e) {
    if (kv.first == path) kv.second = value;
  }
  return ParamStore::from_named(e);
}

// ---------------------------------------------------------------- gradients

struct GradCase {
  std::string name;
  double tol;
  std::function<double()> worst;  // max relative error of this case
};

std::vector<GradCase> primitive_cases() {
  const DType f64 = DType::f64;
  std::vector<GradCase> cases;
  auto image = [f64](std::uint64_t seed, double lo = -1, double hi = 1) {
    Rng rng(seed);
    return random_uniform({1, 4, 8, 8}, lo, hi, rng, f64);
  };
  auto fd = [](const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
    return finite_difference_check(f, x);
  };
  // Elementwise primitives: 1e-6.
  cases.push_back({"gelu", 1e-6, [=] { return fd([](const Tensor& t) { return positive_probe(gelu(t)); }, image(1, -3, 3)); }});
  cases.push_back({"sigmoid", 1e-6, [=] { return fd([](const Tensor& t) { return positive_probe(sigmoid(t)); }, image(2, -4, 4)); }});
  cases.push_back({"exp", 1e-6, [=] { return fd([](const Tensor& t) { return positive_probe(exp(t)); }, image(3)); }});
  cases.push_back({"log", 1e-6, [=] { return fd([](const Tensor& t) { return positive_probe(log(t)); }, image(4, 0.2, 2)); }});
  cases.push_back({"pow", 1e-6, [=] {
                     return fd([](const Tensor& t) { return positive_probe(pow_scalar(t, 1.0 / 2.2)); }, image(5, 0.05, 2));
                   }});
  cases.push_back({"abs", 1e-6, [=] {
                     Tensor x = image(6, 0.05, 1);
                     Tensor signs = image(7);
                     Tensor xs = mul(x, div(signs, abs(signs)));
                     return fd([](const Tensor& t) { return positive_probe(abs(t)); }, xs.detach());
                   }});
  cases.push_back({"clamp_min", 1e-6, [=] {
                     return fd([](const Tensor& t) { return positive_probe(clamp_min(t, 0.0)); }, image(8, 0.05, 1));
                   }});
  cases.push_back({"add_sub_mul_div", 1e-6, [=] {
                     Tensor s = image(9, 0.5, 1.5);
                     return fd([s](const Tensor& t) { return positive_probe(sub(add(mul(t, s), div(t, s)), mul_scalar(t, 0.25))); },
                               image(10));
                   }});
  cases.push_back({"add_scalar_neg", 1e-6, [=] {
                     return fd([](const Tensor& t) { return positive_probe(neg(add_scalar(t, 0.3))); }, image(11));
                   }});
  cases.push_back({"sum_mean", 1e-6, [=] {
                     return fd([](const Tensor& t) { return add(sum(t), mul_scalar(mean(t), 3.0)); }, image(12));
                   }});
  // Structured primitives: 1e-3.
  cases.push_back({"conv2d_input", 1e-3, [=] {
                     Rng rng(13);
                     Tensor w = random_uniform({4, 4, 3, 3}, -1, 1, rng, f64), b = random_uniform({4}, -1, 1, rng, f64);
                     return fd([=](const Tensor& t) { return probe(conv2d(t, w, b, {.padding = 1})); }, image(14));
                   }});
  cases.push_back({"conv2d_weight", 1e-3, [=] {
                     Rng rng(15);
                     Tensor x = image(16), w = random_uniform({4, 4, 3, 3}, -1, 1, rng, f64);
                     return fd([=](const Tensor& t) { return probe(conv2d(x, t, {}, {.stride = 2, .padding = 1})); }, w);
                   }});
  cases.push_back({"conv2d_bias", 1e-3, [=] {
                     Rng rng(17);
                     Tensor x = image(18), w = random_uniform({4, 4, 1, 1}, -1, 1, rng, f64);
                     return fd([=](const Tensor& t) { return probe(conv2d(x, w, t)); }, random_uniform({4}, -1, 1, rng, f64));
                   }});
  cases.push_back({"conv2d_depthwise", 1e-3, [=] {
                     Rng rng(19);
                     Tensor x = image(20), w = random_uniform({4, 1, 7, 7}, -1, 1, rng, f64);
                     return std::max(fd([=](const Tensor& t) { return probe(conv2d(x, t, {}, {.padding = 3, .groups = 4})); }, w),
                                     fd([=](const Tensor& t) { return probe(conv2d(t, w, {}, {.padding = 3, .groups = 4})); }, x));
                   }});
  cases.push_back({"avg_pool2d", 1e-3, [=] { return fd([](const Tensor& t) { return probe(avg_pool2d(t)); }, image(21)); }});
  cases.push_back({"max_pool2d", 1e-3, [=] { return fd([](const Tensor& t) { return probe(max_pool2d(t)); }, image(22)); }});
  cases.push_back({"bilinear_upsample", 1e-3, [=] {
                     Rng rng(23);
                     return fd([](const Tensor& t) { return probe(bilinear_upsample(t, 8, 8)); },
                               random_uniform({1, 4, 4, 4}, -1, 1, rng, f64));
                   }});
  cases.push_back({"global_avg_pool", 1e-3, [=] { return fd([](const Tensor& t) { return probe(global_avg_pool(t)); }, image(24)); }});
  cases.push_back({"concat_narrow", 1e-3, [=] {
                     return fd([](const Tensor& t) { return probe(narrow(concat({t, mul(t, t)}, 1), 1, 2, 5)); }, image(25));
                   }});
  cases.push_back({"reshape_transpose", 1e-3, [=] {
                     return fd([](const Tensor& t) { return probe(transpose(reshape(t, {4, 64}), 0, 1)); }, image(26));
                   }});
  cases.push_back({"matmul", 1e-3, [=] {
                     Rng rng(27);
                     Tensor a = random_uniform({2, 6, 5}, -1, 1, rng, f64), b = random_uniform({2, 5, 4}, -1, 1, rng, f64);
                     return std::max(fd([=](const Tensor& t) { return probe(matmul(t, b)); }, a),
                                     fd([=](const Tensor& t) { return probe(matmul(a, t)); }, b));
                   }});
  cases.push_back({"softmax", 1e-3, [=] {
                     return std::max(fd([](const Tensor& t) { return probe(softmax(t, 3)); }, image(28, -3, 3)),
                                     fd([](const Tensor& t) { return probe(softmax(t, 1)); }, image(29, -3, 3)));
                   }});
  cases.push_back({"warp_by_flow", 1e-3, [=] {
                     Rng rng(30);
                     Tensor flow = random_uniform({1, 2, 8, 8}, -1.7, 1.7, rng, f64);
                     return fd([flow](const Tensor& t) { return probe(warp_by_flow(t, flow)); }, image(31));
                   }});
  return cases;
}

// Input and every parameter of one block; parameters listed in `null_grad`
// have an exactly vanishing gradient and must come out as ~0 instead.
double block_worst(const ParamLayout& layout, const std::function<Tensor(const Tensor&, const ParamStore&)>& block,
                   const std::vector<std::string>& null_grad = {}) {
  Rng rng(40);
  const Tensor x = random_normal({1, 4, 8, 8}, 1.0, rng, DType::f64);
  const auto store = ParamStore::initialize(layout, 21, DType::f64);
  double worst = finite_difference_check([&](const Tensor& t) { return probe(block(t, store)); }, x, 1e-5, 64);
  for (const auto& [path, value] : store.entries()) {
    if (std::find(null_grad.begin(), null_grad.end(), path) != null_grad.end()) {
      auto p = store.clone();
      p.set_requires_grad(true);
      backward(probe(block(x, p)));
      for (double g : p.at(path).grad().to_vector()) {
        if (std::abs(g) > 1e-12) worst = std::max(worst, 1.0);
      }
      continue;
    }
    const std::string name = path;
    worst = std::max(worst, finite_difference_check(
                                [&](const Tensor& w) { return probe(block(x, replaced(store, name, w))); }, value, 1e-5, 16));
  }
  return worst;
}

template <class Declare>
ParamLayout layout_of(Declare declare) {
  ParamLayout layout;
  declare(layout);
  return layout;
}

std::vector<GradCase> block_cases() {
  std::vector<GradCase> cases;
  for (PoolKind kind : {PoolKind::avg, PoolKind::max}) {
    cases.push_back({std::string("frequency_separate_") + to_string(kind), 1e-3, [kind] {
                       Rng rng(41);
                       const Tensor x = random_normal({1, 4, 8, 8}, 1.0, rng, DType::f64);
                       return finite_difference_check(
                           [kind](const Tensor& t) {
                             auto [low, high] = frequency_separate(t, kind);
                             return add(probe(low, -1, 1, 1), probe(high, -1, 1, 2));
                           },
                           x);
                     }});
  }
  cases.push_back({"window_self_attention", 1e-3, [] {
                     return block_worst(layout_of([](ParamLayout& l) { declare_window_attention(l, "a", 4); }),
                                        [](const Tensor& t, const ParamStore& s) {
                                          return window_self_attention(t, ParamView(s, "a"), 2, 4);
                                        },
                                        {"a.k.bias"});
                   }});
  for (MbbSplit split : {MbbSplit{3, 1}, MbbSplit{2, 2}, MbbSplit{4, 0}}) {
    cases.push_back({"multi_branch_block_" + std::to_string(split.a) + "_" + std::to_string(split.b), 1e-3, [split] {
                       return block_worst(layout_of([split](ParamLayout& l) { declare_multi_branch_block(l, "m", 4, split); }),
                                          [split](const Tensor& t, const ParamStore& s) {
                                            return multi_branch_block(t, ParamView(s, "m"), split);
                                          });
                     }});
  }
  cases.push_back({"channel_attention", 1e-3, [] {
                     return block_worst(layout_of([](ParamLayout& l) { declare_channel_attention(l, "c", 4, 2); }),
                                        [](const Tensor& t, const ParamStore& s) { return channel_attention(t, ParamView(s, "c")); });
                   }});
  cases.push_back({"freq_fuse", 1e-3, [] {
                     Rng rng(42);
                     const Tensor other = random_normal({1, 4, 4, 4}, 1.0, rng, DType::f64);
                     const auto layout = layout_of([](ParamLayout& l) { declare_freq_fuse(l, "f", 4, 2); });
                     const double high = block_worst(layout, [other](const Tensor& t, const ParamStore& s) {
                       return freq_fuse(t, other, ParamView(s, "f"));
                     });
                     // The low band enters at half resolution.
                     const auto store = ParamStore::initialize(layout, 21, DType::f64);
                     const Tensor h = random_normal({1, 4, 8, 8}, 1.0, rng, DType::f64);
                     const double low = finite_difference_check(
                         [&](const Tensor& l) { return probe(freq_fuse(h, l, ParamView(store, "f"))); }, other);
                     return std::max(high, low);
                   }});
  for (FfnMode mode : {FfnMode::inverted, FfnMode::normal_bottleneck, FfnMode::flat}) {
    cases.push_back({std::string("conv_ffn_") + to_string(mode), 1e-3, [mode] {
                       return block_worst(layout_of([mode](ParamLayout& l) { declare_conv_ffn(l, "n", 4, mode, 4); }),
                                          [](const Tensor& t, const ParamStore& s) { return conv_ffn(t, ParamView(s, "n")); });
                     }});
  }
  for (CebKernelMode mode : {CebKernelMode::dw7, CebKernelMode::three_dw3, CebKernelMode::dw5_dw3}) {
    cases.push_back({std::string("conv_enhancement_block_") + to_string(mode), 1e-3, [mode] {
                       return block_worst(
                           layout_of([mode](ParamLayout& l) {
                             declare_conv_enhancement_block(l, "e", 4, mode, FfnMode::inverted, 4);
                           }),
                           [mode](const Tensor& t, const ParamStore& s) {
                             return conv_enhancement_block(t, ParamView(s, "e"), mode);
                           });
                     }});
  }
  cases.push_back({"mu_law", 1e-6, [] {
                     Rng rng(43);
                     // The third derivative over the first is ~2 mu^2 near 0, so tiny
                     // inputs with eps=1e-5 carry ~1e-5 truncation error by themselves.
                     return finite_difference_check([](const Tensor& t) { return positive_probe(mu_law(t)); },
                                                    random_uniform({1, 4, 8, 8}, 0.01, 1.0, rng, DType::f64), 1e-6);
                   }});
  cases.push_back({"l1_tonemapped_loss", 1e-6, [] {
                     Rng rng(44);
                     const Tensor target = random_uniform({1, 4, 8, 8}, 0.0, 1.0, rng, DType::f64);
                     // Keep every prediction at least 0.02 away from its target.
                     Tensor offset = random_uniform({1, 4, 8, 8}, 0.02, 0.3, rng, DType::f64);
                     const Tensor pred = add(target, offset).detach();
                     return finite_difference_check([&](const Tensor& t) { return l1_tonemapped_loss(t, target); }, pred);
                   }});
  cases.push_back({"full_tiny_forward", 1e-3, [] {
                     CRNetConfig cfg;
                     cfg.base_channels = 4;
                     cfg.n_ceb = 1;
                     cfg.n_hfem = 1;
                     cfg.attn_window = 4;
                     cfg.attn_heads = 2;
                     cfg.ca_reduction = 2;
                     auto params = ParamStore::initialize(model_layout(cfg), 6, DType::f64);
                     // Sharper queries and keys so attention is far from uniform.
                     // The q/k gradients are still ~1e-7 of the loss, so the step is
                     // 1e-4: at 1e-5 the quotient is round-off bound and the error
                     // grows as 1/eps.
                     for (const char* p : {"hfem0.attn.q.weight", "hfem0.attn.k.weight"}) {
                       params = replaced(params, p, mul_scalar(params.at(p), 6.0));
                     }
                     Rng rng(45);
                     ExposureStack s;
                     for (auto& f : s.frames) f = random_uniform({kRawChannels, 8, 8}, 0.2, 1.0, rng, DType::f64);
                     FlowSet flows;
                     for (int i = 1; i < kFrames; ++i) flows[i] = Tensor::zeros({1, 2, 8, 8}, DType::f64);
                     auto run = [&](const ExposureStack& st, const ParamStore& ps) {
                       return probe(forward_batch_unclamped(StackBatch::from({&st}), ps, cfg, flows));
                     };
                     double worst = 0;
                     std::string worst_path;
                     for (const auto& [path, value] : params.entries()) {
                       const std::string name = path;
                       if (name == "hfem0.attn.k.bias") continue;  // exactly zero gradient, see the block case
                       const double err = finite_difference_check(
                           [&](const Tensor& w) { return run(s, replaced(params, name, w)); }, value, 1e-4, 4);
                       if (err > worst) worst = err, worst_path = name;
                     }
                     const double frame_err = finite_difference_check(
                         [&](const Tensor& f) {
                           ExposureStack st = s;
                           st.frames[0] = f;
                           return run(st, params);
                         },
                         s.frames[0], 1e-5, 16);
                     return std::max(worst, frame_err);
                   }});
  return cases;
}

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  auto cases = primitive_cases();
  for (auto& c : block_cases()) cases.push_back(std::move(c));
  std::string failures;
  double worst_ratio = 0;
  for (const auto& c : cases) {
    const double err = c.worst();
    worst_ratio = std::max(worst_ratio, err / c.tol);
    if (!(err <= c.tol)) failures += " " + c.name + "=" + num(err);
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = failures.empty() && secs < 300;
  o.detail = std::to_string(cases.size()) + " cases, worst err/tol " + num(worst_ratio) + ", " + num(secs, "%.1f") +
             " s" + (failures.empty() ? "" : "; failed:" + failures);
  return o;
}

// ---------------------------------------------------------------- other criteria

Outcome frequency_identity() {
  Rng rng(31);
  double worst = 0;
  for (int i = 0; i < 50; ++i) {
    const std::int64_t h = 2 * rng.uniform_int(1, 8), w = 2 * rng.uniform_int(1, 8);
    const Tensor f = random_normal({rng.uniform_int(1, 2), rng.uniform_int(1, 6), h, w}, 2.0, rng);
    for (PoolKind kind : {PoolKind::avg, PoolKind::max}) {
      auto [low, high] = frequency_separate(f, kind);
      const Tensor back = add(high, bilinear_upsample(low, h, w));
      for (std::int64_t k = 0; k < f.numel(); ++k) worst = std::max(worst, std::abs(back.value(k) - f.value(k)));
    }
  }
  return {worst <= 1e-6, "50 tensors x {avg,max}, max abs error " + num(worst)};
}

// Frozen 16x16 pair: rows y, columns x.
Tensor pattern(bool second) {
  std::vector<double> v(256);
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      v[static_cast<std::size_t>(y * 16 + x)] =
          second ? 0.45 + 0.25 * std::sin(0.8 * x + 0.5 * y + 0.3) + 0.05 * ((7 * x + 3 * y) % 5) / 4.0
                 : 0.5 + 0.3 * std::sin(0.9 * x + 0.4 * y) + 0.1 * std::cos(1.7 * y);
    }
  }
  return Tensor::from({16, 16}, std::move(v));
}

Outcome metric_oracles() {
  const Tensor ends = mu_law(Tensor::from({2}, std::vector<double>{0.0, 1.0}));
  const bool t_exact = ends.value(0) == 0.0 && ends.value(1) == 1.0;
  const double p20 = psnr(Tensor::full({10, 10}, 0.3, DType::f64), Tensor::full({10, 10}, 0.4, DType::f64));
  Rng rng(7);
  const Tensor a = random_uniform({3, 20, 24}, 0, 1, rng, DType::f64);
  const double self = ssim(a, a);
  // Direct-formula value computed independently before the implementation.
  const double pair = ssim(pattern(false), pattern(true));
  const bool pass = t_exact && std::abs(p20 - 20.0) <= 1e-9 && std::abs(self - 1.0) <= 1e-9 &&
                    std::abs(pair - 0.8219163426233405) <= 1e-6;
  return {pass, std::string("T(0),T(1) ") + (t_exact ? "exact" : "inexact") + ", PSNR " + num(p20, "%.12f") +
                    " dB, SSIM(x,x)-1 " + num(self - 1.0) + ", frozen pair " + num(pair, "%.16f")};
}

Outcome zero_init_identity() {
  Rng rng(20);
  const Tensor x = random_normal({1, 8, 8, 8}, 1.0, rng);
  int checked = 0, exact = 0;
  auto check = [&](const Tensor& y) {
    ++checked;
    exact += bit_equal(y, x);
  };
  {
    const auto s = ParamStore::zeros(layout_of([](ParamLayout& l) { declare_window_attention(l, "a", 8); }));
    check(window_self_attention(x, ParamView(s, "a"), 4, 4));
  }
  for (MbbSplit split : {MbbSplit{3, 1}, MbbSplit{2, 2}, MbbSplit{4, 0}}) {
    const auto s = ParamStore::zeros(layout_of([split](ParamLayout& l) { declare_multi_branch_block(l, "m", 8, split); }));
    check(multi_branch_block(x, ParamView(s, "m"), split));
  }
  for (FfnMode mode : {FfnMode::inverted, FfnMode::normal_bottleneck, FfnMode::flat}) {
    const auto s = ParamStore::zeros(layout_of([mode](ParamLayout& l) { declare_conv_ffn(l, "n", 8, mode, 4); }));
    check(conv_ffn(x, ParamView(s, "n")));
  }
  for (CebKernelMode mode : {CebKernelMode::dw7, CebKernelMode::three_dw3, CebKernelMode::dw5_dw3}) {
    const auto s = ParamStore::zeros(
        layout_of([mode](ParamLayout& l) { declare_conv_enhancement_block(l, "e", 8, mode, FfnMode::inverted, 4); }));
    check(conv_enhancement_block(x, ParamView(s, "e"), mode));
  }
  return {checked == exact, std::to_string(exact) + "/" + std::to_string(checked) +
                                " residual blocks bit-exact (attention, MBB x3, ConvFFN x3, CEB x3)"};
}

Outcome ablation_parity() {
  RunConfig desk = preset("desk");
  CRNetConfig base = desk.model;
  std::vector<std::int64_t> counts;
  for (MbbSplit split : {MbbSplit{3, 1}, MbbSplit{2, 2}, MbbSplit{4, 0}}) {
    base.mbb_split = split;
    counts.push_back(count_params(base));
  }
  const bool parity = counts[0] == counts[1] && counts[1] == counts[2];
  SceneSpec scene = desk.scene;
  scene.height = scene.width = 16;
  const auto data = generate_dataset(2, 5, scene, desk.degrade);
  TrainConfig tc = desk.train;
  tc.crop = 16;
  tc.max_steps = 20;
  int ok = 0;
  std::string failures;
  for (const auto& name : ablation_variants()) {
    try {
      const AblationModel m = build_ablation_variant(name, desk.model, 0);
      const Tensor y = forward(data[0].stack, m.params, m.cfg);
      TrainOptions opts;
      opts.resume = Checkpoint{m.params, OptimState::zeros_like(m.params), {}};
      const auto r = train(data, m.cfg, tc, opts);
      bool finite = r.history.size() == 20;
      for (const auto& rec : r.history) finite = finite && std::isfinite(rec.loss);
      if (y.shape() == Shape{kRawChannels, 16, 16} && finite) {
        ++ok;
      } else {
        failures += " " + name;
      }
    } catch (const std::exception& e) {
      failures += " " + name + "(" + e.what() + ")";
    }
  }
  return {parity && ok == 9, "MBB splits 3/1, 2/2, 4/0 -> " + std::to_string(counts[0]) + "/" +
                                 std::to_string(counts[1]) + "/" + std::to_string(counts[2]) + " params; " +
                                 std::to_string(ok) + "/9 variants forward + 20 steps" +
                                 (failures.empty() ? "" : "; failed:" + failures)};
}

Outcome overfit() {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig desk = preset("desk");
  // Pre-registered sample: dataset seed 0, init seed 0.
  const auto data = generate_dataset(1, 0, desk.scene, desk.degrade);
  TrainConfig tc = desk.train;
  TrainOptions opts;
  opts.init_seed = 0;
  double best = 0;
  std::int64_t first = -1;
  for (std::int64_t steps = 100; steps <= 2000; steps += 100) {
    tc.max_steps = steps;
    auto r = train(data, desk.model, tc, opts);
    const double p = evaluate(data, r.params, desk.model).mean.psnr_mu;
    best = std::max(best, p);
    if (p >= 30.0) {
      first = steps;
      break;
    }
    opts.resume = Checkpoint{std::move(r.params), std::move(r.optim), std::move(r.history)};
  }
  const double secs = seconds_since(t0);
  return {first > 0 && secs < 900, "desk config, 1 sample: best PSNR-mu " + num(best, "%.2f") + " dB" +
                                       (first > 0 ? ", >= 30 dB at step " + std::to_string(first) : ", never >= 30 dB") +
                                       ", " + num(secs, "%.1f") + " s"};
}

Outcome smoke() {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig desk = preset("desk");
  int ok = 0;
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto data = generate_dataset(16, 1000 + seed, desk.scene, desk.degrade);
    TrainConfig tc = desk.train;
    tc.max_steps = 200;
    tc.seed = seed;
    TrainOptions opts;
    opts.init_seed = seed;
    const auto r = train(data, desk.model, tc, opts);
    double head = 0, tail = 0;
    for (int i = 0; i < 10; ++i) {
      head += r.history[static_cast<std::size_t>(i)].loss;
      tail += r.history[r.history.size() - 10 + static_cast<std::size_t>(i)].loss;
    }
    const double ratio = tail / head;
    worst = std::max(worst, ratio);
    ok += ratio <= 0.5;
  }
  return {ok >= 9, std::to_string(ok) + "/10 seeds with last-10 / first-10 mean loss <= 0.5 (worst " + num(worst) +
                       "), " + num(seconds_since(t0), "%.1f") + " s"};
}

Outcome determinism_persistence() {
  const RunConfig desk = preset("desk");
  SceneSpec scene = desk.scene;
  scene.height = scene.width = 16;
  auto bytes = [&](std::uint64_t seed) {
    std::string all;
    for (const auto& s : generate_dataset(3, seed, scene, desk.degrade)) all += encode_archive(sample_entries(s));
    return all;
  };
  const bool data_same = bytes(4) == bytes(4) && bytes(4) != bytes(5);

  const auto data = generate_dataset(3, 4, scene, desk.degrade);
  TrainConfig tc = desk.train;
  tc.crop = 16;
  tc.max_steps = 6;
  tc.augment = true;
  const auto a = train(data, desk.model, tc), b = train(data, desk.model, tc);
  bool train_same = a.history.size() == b.history.size();
  for (std::size_t i = 0; train_same && i < a.history.size(); ++i) train_same = a.history[i].loss == b.history[i].loss;
  for (const auto& [p, t] : a.params.entries()) train_same = train_same && bit_equal(t, b.params.at(p));

  const auto path = std::filesystem::temp_directory_path() / "crnet_acceptance_ckpt.crt1a";
  save_checkpoint(path, {a.params, a.optim, a.history});
  const Checkpoint back = load_checkpoint(path);
  const bool ckpt_same = bit_equal(predict(data[0], back.params, desk.model), predict(data[0], a.params, desk.model));
  std::filesystem::remove(path);
  return {data_same && train_same && ckpt_same, std::string("dataset bytes ") + (data_same ? "identical" : "DIFFER") +
                                                    ", training " + (train_same ? "bit-identical" : "DIFFERS") +
                                                    ", checkpoint forward " + (ckpt_same ? "bit-identical" : "DIFFERS")};
}

Outcome lr_schedule() {
  const TrainConfig cfg;
  const double a = lr_at(0, cfg), b = lr_at(80, cfg), c = lr_at(160, cfg);
  return {a == 1e-4 && b == 5e-5 && c == 2.5e-5,
          "epochs 0/80/160 -> " + num(a, "%g") + " / " + num(b, "%g") + " / " + num(c, "%g")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {"gradient_suite", gradient_suite},
      {"frequency_identity", frequency_identity},
      {"metric_oracles", metric_oracles},
      {"zero_init_identity", zero_init_identity},
      {"ablation_parity", ablation_parity},
      {"overfit", overfit},
      {"smoke_training", smoke},
      {"determinism_persistence", determinism_persistence},
      {"lr_schedule", lr_schedule},
  };
  std::vector<std::string> selected(argv + 1, argv + argc);
  for (const auto& s : selected) {
    if (std::none_of(criteria.begin(), criteria.end(), [&](const Criterion& c) { return c.name == s; })) {
      std::fprintf(stderr, "unknown criterion '%s'\n", s.c_str());
      return 2;
    }
  }
  bool all = true;
  for (const auto& c : criteria) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.name) == selected.end()) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("%s  %-24s %s\n", o.pass ? "PASS" : "FAIL", c.name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
