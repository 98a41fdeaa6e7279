#pragma once

#include <string>
#include <vector>

#include "crnet/tensor.hpp"

namespace crnet {

// T(x) = ln(1 + mu x) / ln(1 + mu). Inputs must be non-negative; with
// `checked` a negative element raises NumericError.
Tensor mu_law(const Tensor& x, double mu = 5000.0, bool checked = true);

// mean |T(pred) - T(target)|, a 0-d tensor.
Tensor l1_tonemapped_loss(const Tensor& pred, const Tensor& target, double mu = 5000.0);

// sign(x) T(|x|). Agrees with mu_law on x >= 0.
Tensor signed_mu_law(const Tensor& x, double mu = 5000.0);

// mean |sign(y) T(|y|) - T(target)| on the unclamped head output y. Equal to
// l1_tonemapped_loss(max(y, 0), target) wherever y >= 0 and never smaller, but
// a negative y still receives a gradient pulling it back towards zero.
Tensor training_loss(const Tensor& raw_pred, const Tensor& target, double mu = 5000.0);

// 10 log10(max^2 / MSE); +infinity when the inputs are identical.
double psnr(const Tensor& a, const Tensor& b, double max_val = 1.0);
double psnr_mu(const Tensor& a, const Tensor& b, double mu = 5000.0);

// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
// dynamic range 1, averaged over valid window positions of each [H, W]
// plane and then over planes. Accepts [H,W], [C,H,W] or [B,C,H,W].
double ssim(const Tensor& a, const Tensor& b);
double ssim_mu(const Tensor& a, const Tensor& b, double mu = 5000.0);

struct MetricReport {
  double psnr_l = 0;
  double psnr_mu = 0;
  double ssim_l = 0;
  double ssim_mu = 0;

  static const char* csv_header() { return "sample_id,psnr_l,psnr_mu,ssim_l,ssim_mu"; }
  std::string csv_row(const std::string& sample_id) const;
  // psnr_l=..\npsnr_mu=..\nssim_l=..\nssim_mu=..\n
  std::string key_values() const;
};

MetricReport measure(const Tensor& pred, const Tensor& target, double mu = 5000.0);
MetricReport mean_report(const std::vector<MetricReport>& reports);

std::string format_metric(double value);

}  // namespace crnet
