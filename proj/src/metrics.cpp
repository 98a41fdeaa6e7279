#include "crnet/metrics.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <limits>

#include "crnet/detail/elementwise.hpp"
#include "crnet/error.hpp"
#include "crnet/ops.hpp"

namespace crnet {

Tensor mu_law(const Tensor& x, double mu, bool checked) {
  if (!(mu > 0)) throw ConfigError("mu_law: mu must be positive");
  if (checked) {
    const Buffer& b = x.buffer();
    for (std::size_t i = 0; i < b.size(); ++i) {
      if (b.get(i) < 0) throw NumericError("mu_law: negative input at flat index " + std::to_string(i));
    }
  }
  const double denom = std::log1p(mu);
  return detail::unary_op(
      x, "mu_law", [mu, denom](auto v) { return std::log1p(mu * v) / denom; },
      [mu, denom](auto v, auto) { return mu / ((1.0 + mu * v) * denom); });
}

Tensor l1_tonemapped_loss(const Tensor& pred, const Tensor& target, double mu) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("l1_tonemapped_loss: shapes " + to_string(pred.shape()) + " and " + to_string(target.shape()) +
                     " differ");
  }
  return mean(abs(sub(mu_law(pred, mu), mu_law(target, mu))));
}

Tensor signed_mu_law(const Tensor& x, double mu) {
  if (!(mu > 0)) throw ConfigError("signed_mu_law: mu must be positive");
  const double denom = std::log1p(mu);
  return detail::unary_op(
      x, "signed_mu_law",
      [mu, denom](auto v) {
        const double t = std::log1p(mu * std::abs(static_cast<double>(v))) / denom;
        return v < 0 ? -t : t;
      },
      [mu, denom](auto v, auto) { return mu / ((1.0 + mu * std::abs(static_cast<double>(v))) * denom); });
}

Tensor training_loss(const Tensor& raw_pred, const Tensor& target, double mu) {
  if (raw_pred.shape() != target.shape()) {
    throw ShapeError("training_loss: shapes " + to_string(raw_pred.shape()) + " and " + to_string(target.shape()) +
                     " differ");
  }
  return mean(abs(sub(signed_mu_law(raw_pred, mu), mu_law(target, mu))));
}

double psnr(const Tensor& a, const Tensor& b, double max_val) {
  if (a.shape() != b.shape()) throw ShapeError("psnr: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
  const Buffer& x = a.buffer();
  const Buffer& y = b.buffer();
  double sq = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x.get(i) - y.get(i);
    sq += d * d;
  }
  if (sq == 0) return std::numeric_limits<double>::infinity();
  const double mse = sq / static_cast<double>(x.size());
  return 10.0 * std::log10(max_val * max_val / mse);
}

double psnr_mu(const Tensor& a, const Tensor& b, double mu) {
  return psnr(mu_law(a, mu), mu_law(b, mu), 1.0);
}

namespace {

constexpr int kWin = 11;

std::array<double, kWin * kWin> gaussian_window() {
  std::array<double, kWin * kWin> w{};
  const double sigma = 1.5;
  double total = 0;
  for (int y = 0; y < kWin; ++y) {
    for (int x = 0; x < kWin; ++x) {
      const double dy = y - kWin / 2, dx = x - kWin / 2;
      w[y * kWin + x] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      total += w[y * kWin + x];
    }
  }
  for (auto& v : w) v /= total;
  return w;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("ssim: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
  if (a.ndim() < 2) throw ShapeError("ssim: expected at least 2 axes");
  const std::int64_t h = a.dim(a.ndim() - 2), w = a.dim(a.ndim() - 1);
  if (h < kWin || w < kWin) {
    throw ShapeError("ssim: image " + std::to_string(h) + "x" + std::to_string(w) + " is smaller than the 11x11 window");
  }
  static const auto win = gaussian_window();
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const std::int64_t planes = a.numel() / (h * w);
  const Buffer& xa = a.buffer();
  const Buffer& xb = b.buffer();
  std::vector<double> pa(static_cast<std::size_t>(h * w)), pb(pa.size());
  double total = 0;
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < pa.size(); ++i) {
      pa[i] = xa.get(static_cast<std::size_t>(p * h * w) + i);
      pb[i] = xb.get(static_cast<std::size_t>(p * h * w) + i);
    }
    double plane_sum = 0;
    for (std::int64_t y = 0; y + kWin <= h; ++y) {
      for (std::int64_t x = 0; x + kWin <= w; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int ky = 0; ky < kWin; ++ky) {
          for (int kx = 0; kx < kWin; ++kx) {
            const double g = win[ky * kWin + kx];
            const auto i = static_cast<std::size_t>((y + ky) * w + x + kx);
            ma += g * pa[i];
            mb += g * pb[i];
            saa += g * pa[i] * pa[i];
            sbb += g * pb[i] * pb[i];
            sab += g * pa[i] * pb[i];
          }
        }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        plane_sum += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      }
    }
    total += plane_sum / static_cast<double>((h - kWin + 1) * (w - kWin + 1));
  }
  return total / static_cast<double>(planes);
}

double ssim_mu(const Tensor& a, const Tensor& b, double mu) { return ssim(mu_law(a, mu), mu_law(b, mu)); }

std::string format_metric(double value) {
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", value);
  return buf;
}

std::string MetricReport::csv_row(const std::string& sample_id) const {
  return sample_id + "," + format_metric(psnr_l) + "," + format_metric(psnr_mu) + "," + format_metric(ssim_l) + "," +
         format_metric(ssim_mu);
}

std::string MetricReport::key_values() const {
  return "psnr_l=" + format_metric(psnr_l) + "\npsnr_mu=" + format_metric(psnr_mu) + "\nssim_l=" +
         format_metric(ssim_l) + "\nssim_mu=" + format_metric(ssim_mu) + "\n";
}

MetricReport measure(const Tensor& pred, const Tensor& target, double mu) {
  return {psnr(pred, target), psnr_mu(pred, target, mu), ssim(pred, target), ssim_mu(pred, target, mu)};
}

MetricReport mean_report(const std::vector<MetricReport>& reports) {
  MetricReport m;
  if (reports.empty()) return m;
  for (const auto& r : reports) {
    m.psnr_l += r.psnr_l;
    m.psnr_mu += r.psnr_mu;
    m.ssim_l += r.ssim_l;
    m.ssim_mu += r.ssim_mu;
  }
  const double n = static_cast<double>(reports.size());
  m.psnr_l /= n;
  m.psnr_mu /= n;
  m.ssim_l /= n;
  m.ssim_mu /= n;
  return m;
}

}  // namespace crnet
