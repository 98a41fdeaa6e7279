#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <string>

#include "crnet/autograd.hpp"
#include "crnet/error.hpp"
#include "crnet/metrics.hpp"
#include "crnet/model.hpp"
#include "crnet/ops.hpp"
#include "crnet/rng.hpp"
#include "test_util.hpp"

namespace crnet {
namespace {

using testing::max_abs_diff;
using testing::weighted_sum;

CRNetConfig tiny_config() {
  CRNetConfig cfg;
  cfg.base_channels = 4;
  cfg.n_ceb = 1;
  cfg.n_hfem = 2;
  cfg.attn_window = 4;
  cfg.attn_heads = 2;
  cfg.ca_reduction = 2;
  return cfg;
}

ExposureStack random_stack(std::int64_t h, std::int64_t w, std::uint64_t seed, DType dtype = DType::f32) {
  Rng rng(seed);
  ExposureStack s;
  for (auto& f : s.frames) f = random_uniform({kRawChannels, h, w}, 0.0, 1.0, rng, dtype);
  return s;
}

FlowSet zero_flows(std::int64_t h, std::int64_t w, DType dtype = DType::f32) {
  FlowSet flows;
  for (int i = 1; i < kFrames; ++i) flows[i] = Tensor::zeros({1, 2, h, w}, dtype);
  return flows;
}

// Hand-written closed form, independent of model_layout.
std::int64_t conv_count(std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t groups = 1) {
  return cout * (cin / groups) * k * k + cout;
}

std::int64_t expected_count(std::int64_t c, int n_ceb, int n_hfem, int r, int e) {
  std::int64_t hfem = 4 * conv_count(c, c, 1) + 16 * conv_count(c, c, 3) + conv_count(2 * c, c, 3) +
                      conv_count(c, c / r, 1) + conv_count(c / r, c, 1) + conv_count(c, c, 1);
  std::int64_t ceb = 2 * conv_count(c, c, 1) + conv_count(c, c, 7, c) + conv_count(c, e * c, 1) + conv_count(e * c, c, 1);
  return conv_count(2 * kRawChannels, c, 3) + conv_count(kFrames * c, c, 1) + n_hfem * (hfem + n_ceb * ceb) +
         conv_count(c, c, 3) + conv_count((n_hfem + 1) * c, c, 3) + conv_count(c, c, 3) + conv_count(c, kRawChannels, 3);
}

TEST(Preprocess, ScalarOracle) {
  ExposureStack s;
  for (auto& f : s.frames) f = Tensor::full({kRawChannels, 2, 2}, 0.25, DType::f64);
  const auto in = preprocess(s, 1.0 / 2.2);
  ASSERT_EQ(in[1].shape(), (Shape{2 * kRawChannels, 2, 2}));
  EXPECT_EQ(in[1].value(0), 0.0625);
  // 0.0625 ** (1 / 2.2), evaluated with 25-digit arithmetic.
  EXPECT_NEAR(in[1].value(kRawChannels * 4), 0.2835781305488656452481244, 1e-15);
}

TEST(Preprocess, ReferenceFrameIdentityAndZero) {
  ExposureStack s = random_stack(4, 6, 1, DType::f64);
  s.frames[2] = Tensor::zeros({kRawChannels, 4, 6}, DType::f64);
  const auto in = preprocess(s, 1.0 / 2.2);
  EXPECT_TRUE(bit_equal(narrow(in[0], 0, 0, kRawChannels), s.frames[0]));
  EXPECT_TRUE(bit_equal(narrow(in[0], 0, kRawChannels, kRawChannels), pow_scalar(s.frames[0], 1.0 / 2.2)));
  for (double v : in[2].to_vector()) EXPECT_EQ(v, 0.0);
}

TEST(Preprocess, NegativeRawIsClippedBeforeGamma) {
  ExposureStack s = random_stack(2, 2, 2);
  s.frames[0] = Tensor::full({kRawChannels, 2, 2}, -0.01);
  const auto in = preprocess(s, 1.0 / 2.2);
  for (double v : in[0].to_vector()) EXPECT_EQ(v, 0.0);
}

TEST(Preprocess, RejectsNonIncreasingExposures) {
  ExposureStack s = random_stack(2, 2, 3);
  s.exposure_times = {1, 4, 4, 64, 256};
  EXPECT_THROW(preprocess(s, 1.0 / 2.2), ShapeError);
  s.exposure_times = {1, 4, 16, 64, -1};
  EXPECT_THROW(preprocess(s, 1.0 / 2.2), ShapeError);
  s = random_stack(2, 2, 3);
  s.frames[3] = Tensor::zeros({kRawChannels, 2, 3});
  EXPECT_THROW(preprocess(s, 1.0 / 2.2), ShapeError);
}

TEST(Preprocess, ExposureScaleInvariance) {
  ExposureStack a = random_stack(8, 8, 4);
  ExposureStack b = a;
  for (auto& t : b.exposure_times) t *= 8.0;
  const auto ia = preprocess(a, 1.0 / 2.2), ib = preprocess(b, 1.0 / 2.2);
  for (int i = 0; i < kFrames; ++i) EXPECT_TRUE(bit_equal(ia[i], ib[i])) << i;
  const auto cfg = tiny_config();
  const auto params = init_params(cfg, 5);
  EXPECT_TRUE(bit_equal(forward(a, params, cfg, zero_flows(8, 8)), forward(b, params, cfg, zero_flows(8, 8))));
}

Tensor horizontal_ramp(std::int64_t h, std::int64_t w) {
  std::vector<double> v(static_cast<std::size_t>(h * w));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) v[static_cast<std::size_t>(y * w + x)] = static_cast<double>(x);
  return Tensor::from({1, 1, h, w}, std::move(v));
}

TEST(WarpByFlow, ZeroFlowIsBitExactIdentity) {
  Rng rng(6);
  Tensor f = random_normal({2, 3, 5, 7}, 1.0, rng);
  EXPECT_TRUE(bit_equal(warp_by_flow(f, Tensor::zeros({2, 2, 5, 7})), f));
}

TEST(WarpByFlow, UnitFlowShiftsRampByOnePixel) {
  Tensor ramp = horizontal_ramp(3, 6);
  std::vector<double> fl(2 * 18, 0.0);
  for (int i = 0; i < 18; ++i) fl[static_cast<std::size_t>(i)] = 1.0;
  Tensor y = warp_by_flow(ramp, Tensor::from({2, 3, 6}, fl));
  for (std::int64_t r = 0; r < 3; ++r) {
    for (std::int64_t x = 0; x < 6; ++x) EXPECT_EQ(y.value(r * 6 + x), std::min<double>(x + 1, 5)) << r << "," << x;
  }
}

TEST(WarpByFlow, FractionalFlowInterpolates) {
  Tensor ramp = horizontal_ramp(2, 5);
  Tensor flow = mul(Tensor::from({2, 1, 1}, std::vector<double>{0.25, -0.5}), Tensor::full({1, 2, 5}, 1.0, DType::f64));
  Tensor y = warp_by_flow(ramp, flow);
  EXPECT_DOUBLE_EQ(y.value(1 * 5 + 2), 2.25);
}

TEST(WarpByFlow, ConstantImageUnderAnyFlow) {
  Rng rng(7);
  Tensor c = Tensor::full({1, 2, 6, 6}, 0.7);
  Tensor y = warp_by_flow(c, random_uniform({1, 2, 6, 6}, -5, 5, rng));
  for (double v : y.to_vector()) EXPECT_EQ(v, static_cast<double>(0.7f));
}

TEST(WarpByFlow, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  Tensor flow = random_uniform({1, 2, 6, 6}, -1.7, 1.7, rng, DType::f64);
  Tensor x = random_normal({1, 2, 6, 6}, 1.0, rng, DType::f64);
  EXPECT_LE(finite_difference_check([&](const Tensor& t) { return weighted_sum(warp_by_flow(t, flow)); }, x), 1e-6);
}

TEST(WarpByFlow, RejectsMismatchedFlow) {
  EXPECT_THROW(warp_by_flow(Tensor::zeros({1, 1, 4, 4}), Tensor::zeros({1, 2, 4, 5})), ShapeError);
  EXPECT_THROW(warp_by_flow(Tensor::zeros({1, 1, 4, 4}), Tensor::zeros({1, 3, 4, 4})), ShapeError);
  EXPECT_THROW(warp_by_flow(Tensor::zeros({2, 1, 4, 4}), Tensor::zeros({3, 2, 4, 4})), ShapeError);
}

TEST(EstimateFlow, IdentityAndConstantGiveZero) {
  Rng rng(9);
  Tensor ref = random_uniform({1, 1, 16, 16}, 0, 1, rng);
  for (double v : estimate_flow(ref, ref).to_vector()) EXPECT_EQ(v, 0.0);
  Tensor c = Tensor::full({1, 1, 16, 16}, 0.3);
  for (double v : estimate_flow(c, c).to_vector()) EXPECT_EQ(v, 0.0);
}

TEST(EstimateFlow, ContentMovedRightGivesPositiveDx) {
  Rng rng(10);
  const std::int64_t n = 24;
  Tensor ref = random_uniform({1, 1, n, n}, 0, 1, rng);
  std::vector<float> moved(static_cast<std::size_t>(n * n));
  for (std::int64_t y = 0; y < n; ++y)
    for (std::int64_t x = 0; x < n; ++x)
      moved[static_cast<std::size_t>(y * n + x)] = static_cast<float>(ref.value(y * n + std::max<std::int64_t>(x - 2, 0)));
  Tensor frame = Tensor::from({1, 1, n, n}, std::move(moved));
  Tensor flow = estimate_flow(ref, frame);
  // Interior block (rows and columns 8..15) away from the border apron.
  EXPECT_EQ(flow.value(12 * n + 12), 2.0);
  EXPECT_EQ(flow.value(n * n + 12 * n + 12), 0.0);
  EXPECT_LE(max_abs_diff(narrow(narrow(warp_by_flow(frame, flow), 2, 8, 8), 3, 8, 8),
                         narrow(narrow(ref, 2, 8, 8), 3, 8, 8)),
            0.0);
}

TEST(Forward, OutputShapeInBothFusionModes) {
  for (FusionMode mode : {FusionMode::joint, FusionMode::recurrent}) {
    CRNetConfig cfg = tiny_config();
    cfg.fusion_mode = mode;
    Tensor y = forward(random_stack(8, 12, 11), init_params(cfg, 1), cfg);
    EXPECT_EQ(y.shape(), (Shape{kRawChannels, 8, 12})) << to_string(mode);
    for (double v : y.to_vector()) EXPECT_GE(v, 0.0);
  }
}

TEST(Forward, BatchedMatchesPerSample) {
  const auto cfg = tiny_config();
  const auto params = init_params(cfg, 2);
  ExposureStack a = random_stack(8, 8, 12), b = random_stack(8, 8, 13);
  Tensor batched = forward_batch(StackBatch::from({&a, &b}), params, cfg);
  EXPECT_LE(max_abs_diff(narrow(batched, 0, 1, 1), reshape(forward(b, params, cfg), {1, kRawChannels, 8, 8})), 1e-6);
}

TEST(Forward, DeterministicAcrossRuns) {
  const auto cfg = tiny_config();
  const auto params = init_params(cfg, 3);
  const auto s = random_stack(8, 8, 14);
  EXPECT_TRUE(bit_equal(forward(s, params, cfg), forward(s, params, cfg)));
}

TEST(Forward, RejectsMismatchedParamsNamingFirstKey) {
  const auto cfg = tiny_config();
  CRNetConfig wider = cfg;
  wider.n_hfem = 1;
  try {
    forward(random_stack(8, 8, 15), init_params(wider, 1), cfg);
    FAIL() << "expected ParamError";
  } catch (const ParamError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("missing parameter 'hfem1.attn.q.weight'", 0), 0u) << e.what();
  }
  EXPECT_THROW(forward(random_stack(6, 8, 15), init_params(cfg, 1), cfg), ShapeError);
}

TEST(Forward, EveryParameterReceivesGradient) {
  for (FusionMode mode : {FusionMode::joint, FusionMode::recurrent}) {
    CRNetConfig cfg = tiny_config();
    cfg.fusion_mode = mode;
    auto params = init_params(cfg, 4);
    // Random biases so no GELU sits exactly at a symmetric zero point.
    params = ParamStore::initialize(model_layout(cfg), 4);
    params.set_requires_grad(true);
    const auto s = random_stack(8, 8, 16);
    Rng rng(17);
    Tensor gt = random_uniform({1, kRawChannels, 8, 8}, 0.01, 1.0, rng);
    backward(training_loss(forward_batch_unclamped(StackBatch::from({&s}), params, cfg), gt));
    for (const auto& [path, t] : params.entries()) {
      ASSERT_TRUE(t.has_grad()) << path;
      double mag = 0;
      for (double g : t.grad().to_vector()) mag += std::abs(g);
      EXPECT_GT(mag, 0.0) << path << " (" << to_string(mode) << ")";
    }
  }
}

TEST(Forward, TinyForwardGradientsMatchFiniteDifferences) {
  CRNetConfig cfg = tiny_config();
  cfg.n_hfem = 1;
  const auto params = ParamStore::initialize(model_layout(cfg), 6, DType::f64);
  const auto s = random_stack(8, 8, 18, DType::f64);
  const auto batch = StackBatch::from({&s});
  const FlowSet flows = zero_flows(8, 8, DType::f64);
  // Inside the full model the attention is near uniform and the q/k gradients
  // are ~1e-9, at finite-difference resolution; test_blocks covers them.
  for (const char* path : {"shallow.weight", "hfem0.attn.v.weight", "hfem0.mbb_low2.b0.weight",
                           "hfem0.fuse.ca.excite.weight", "hfem0.ceb0.dw0.weight", "fusion.conv0.weight", "head.bias"}) {
    const std::string name = path;
    auto f = [&](const Tensor& w) {
      NamedTensors e = params.entries();
      for (auto& kv : e)
        if (kv.first == name) kv.second = w;
      return weighted_sum(forward_batch_unclamped(batch, ParamStore::from_named(e), cfg, flows));
    };
    EXPECT_LE(finite_difference_check(f, params.at(name), 1e-5, 12), 1e-3) << name;
  }
}

TEST(ParamCount, SingleConvFormula) {
  ParamLayout layout;
  layout.add_conv("c", 7, 7, 1);
  EXPECT_EQ(layout.count(), 7 * 7 + 7);
}

TEST(ParamCount, MatchesClosedForm) {
  const auto cfg = tiny_config();
  EXPECT_EQ(count_params(cfg), expected_count(4, 1, 2, 2, 4));
  CRNetConfig desk;
  desk.base_channels = 8;
  desk.n_ceb = 2;
  desk.n_hfem = 1;
  EXPECT_EQ(count_params(desk), 16630);
  EXPECT_EQ(count_params(desk), expected_count(8, 2, 1, 4, 4));
}

TEST(ParamCount, DefaultConfigGolden) {
  EXPECT_EQ(count_params(CRNetConfig{}), 3649844);
  EXPECT_EQ(count_params(CRNetConfig{}), expected_count(64, 10, 3, 4, 4));
}

TEST(ParamCount, ParityAcrossSplitsAndFusionModes) {
  CRNetConfig cfg;
  const auto base = count_params(cfg);
  for (MbbSplit split : {MbbSplit{2, 2}, MbbSplit{4, 0}}) {
    cfg.mbb_split = split;
    EXPECT_EQ(count_params(cfg), base);
  }
  CRNetConfig joint = tiny_config(), rec = tiny_config();
  rec.fusion_mode = FusionMode::recurrent;
  std::set<std::string> a, b;
  const auto la = model_layout(joint), lb = model_layout(rec);
  for (const auto& s : la.specs()) a.insert(s.path);
  for (const auto& s : lb.specs()) b.insert(s.path);
  EXPECT_EQ(a, b);
}

TEST(Ablation, EveryVariantBuildsAndRuns) {
  const auto base = tiny_config();
  const auto s = random_stack(8, 8, 19);
  Tensor full_out;
  for (const auto& name : ablation_variants()) {
    const auto model = build_ablation_variant(name, base, 7);
    EXPECT_EQ(model.params.count(), count_params(model.cfg)) << name;
    Tensor y = forward(s, model.params, model.cfg);
    EXPECT_EQ(y.shape(), (Shape{kRawChannels, 8, 8})) << name;
    if (name == "full") full_out = y;
    if (name == "no_freq_sep") EXPECT_FALSE(bit_equal(y, full_out));
  }
  EXPECT_THROW(build_ablation_variant("model7", base, 1), ConfigError);
  EXPECT_EQ(ablation_config("mbb_4_0", base).mbb_split, (MbbSplit{4, 0}));
  EXPECT_EQ(ablation_config("recurrent", base).fusion_mode, FusionMode::recurrent);
}

TEST(Config, ValidateRejectsBadFields) {
  CRNetConfig cfg;
  cfg.attn_heads = 5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = CRNetConfig{};
  cfg.mbb_split = {1, 1};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = CRNetConfig{};
  cfg.mu = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(parse_fusion_mode("parallel"), ConfigError);
}

}  // namespace
}  // namespace crnet
