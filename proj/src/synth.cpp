#include "crnet/synth.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "crnet/error.hpp"
#include "crnet/io.hpp"
#include "crnet/ops.hpp"

namespace crnet {

void SceneSpec::validate() const {
  if (height < 2 || width < 2 || height % 2 != 0 || width % 2 != 0) {
    throw ConfigError("scene size " + std::to_string(height) + "x" + std::to_string(width) + " must be even and >= 2");
  }
  if (n_gradients < 0 || n_disks < 0 || n_edges < 0) throw ConfigError("scene content counts must be >= 0");
  if (!(dynamic_range > 1)) throw ConfigError("scene dynamic_range must be > 1");
  if (!std::isfinite(drift_x) || !std::isfinite(drift_y)) throw ConfigError("scene drift must be finite");
}

void DegradeSpec::validate() const {
  for (int i = 0; i < kFrames; ++i) {
    if (!(exposure_times[i] > 0)) throw ConfigError("exposure times must be positive");
    if (i > 0 && !(exposure_times[i] > exposure_times[i - 1])) {
      throw ConfigError("exposure times must be strictly increasing");
    }
  }
  if (read_noise_sigma < 0 || shot_noise_scale < 0) throw ConfigError("noise levels must be >= 0");
  if (blur_taps < 1) throw ConfigError("blur_taps must be >= 1");
}

Tensor generate_scene(const SceneSpec& spec) {
  spec.validate();
  const std::int64_t h = spec.height, w = spec.width;
  const std::size_t plane = static_cast<std::size_t>(h * w);
  Rng rng(mix_seed(spec.seed, hash_string("scene")));
  const double mid = 0.18 * spec.dynamic_range;
  std::vector<double> log_r(plane, std::log(mid));
  const double cx = 0.5 * static_cast<double>(w), cy = 0.5 * static_cast<double>(h);
  const double half = 0.5 * static_cast<double>(std::max(h, w));
  const double small = static_cast<double>(std::min(h, w));

  // Shapes are anti-aliased over one pixel; d is the signed distance inside.
  auto coverage = [](double d) { return std::clamp(d + 0.5, 0.0, 1.0); };
  auto each = [&](auto fn) {
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) fn(static_cast<std::size_t>(y * w + x), x + 0.5, y + 0.5);
  };
  for (int g = 0; g < spec.n_gradients; ++g) {
    const double theta = rng.uniform(0, 2 * std::numbers::pi);
    const double amp = rng.uniform(-1.5, 1.5);
    each([&](std::size_t i, double x, double y) {
      log_r[i] += amp * ((x - cx) * std::cos(theta) + (y - cy) * std::sin(theta)) / half;
    });
  }
  for (int e = 0; e < spec.n_edges; ++e) {
    const double px = rng.uniform(0, static_cast<double>(w)), py = rng.uniform(0, static_cast<double>(h));
    const double theta = rng.uniform(0, 2 * std::numbers::pi);
    const double amp = (rng.coin() ? 1.0 : -1.0) * rng.uniform(0.5, 1.5);
    each([&](std::size_t i, double x, double y) {
      log_r[i] += amp * coverage((x - px) * std::cos(theta) + (y - py) * std::sin(theta));
    });
  }
  for (int d = 0; d < spec.n_disks; ++d) {
    const double px = rng.uniform(0, static_cast<double>(w)), py = rng.uniform(0, static_cast<double>(h));
    const double radius = rng.uniform(0.08, 0.3) * small;
    const double amp = rng.uniform(-3.0, 3.0);
    each([&](std::size_t i, double x, double y) {
      log_r[i] += amp * coverage(radius - std::hypot(x - px, y - py));
    });
  }

  const bool content = spec.n_gradients + spec.n_edges + spec.n_disks > 0;
  std::array<double, kRawChannels> tint{1, 1, 1, 1};
  if (content) {
    tint[0] = std::exp(rng.uniform(-0.2, 0.2));
    tint[1] = tint[2] = std::exp(rng.uniform(-0.1, 0.1));
    tint[3] = std::exp(rng.uniform(-0.2, 0.2));
  }
  std::vector<double> r(plane * kRawChannels);
  for (int c = 0; c < kRawChannels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      r[c * plane + i] = std::clamp(std::exp(log_r[i]) * tint[c], 0.0, spec.dynamic_range);
    }
  }

  if (content) {
    // Guarantee both a highlight region and a shadow region of useful size.
    const double dark = spec.dynamic_range / 256.0;
    const std::size_t min_pixels = std::min<std::size_t>(16, plane / 8);
    auto count = [&](bool bright) {
      std::size_t n = 0;
      for (std::size_t i = 0; i < plane; ++i) {
        bool ok = true;
        for (int c = 0; c < kRawChannels; ++c) {
          const double v = r[c * plane + i];
          ok = ok && (bright ? v > 1.0 : v < dark);
        }
        n += ok;
      }
      return n;
    };
    auto stamp = [&](double value) {
      const double radius = std::max(2.0, small / 8.0);
      const double px = rng.uniform(radius, static_cast<double>(w) - radius);
      const double py = rng.uniform(radius, static_cast<double>(h) - radius);
      each([&](std::size_t i, double x, double y) {
        const double a = coverage(radius - std::hypot(x - px, y - py));
        if (a > 0) {
          for (int c = 0; c < kRawChannels; ++c) r[c * plane + i] = (1 - a) * r[c * plane + i] + a * value;
        }
      });
    };
    if (count(true) < min_pixels) stamp(0.8 * spec.dynamic_range);
    if (count(false) < min_pixels) stamp(spec.dynamic_range / 1024.0);
  }

  std::vector<float> values(r.begin(), r.end());
  return Tensor::from({kRawChannels, h, w}, std::move(values));
}

Tensor translate(const Tensor& image, double dx, double dy) {
  NoGradGuard no_grad;
  const bool planar = image.ndim() == 3;
  Tensor x = planar ? reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)}) : image;
  const std::int64_t h = x.dim(2), w = x.dim(3);
  Buffer flow(DType::f64, static_cast<std::size_t>(2 * h * w));
  for (std::int64_t i = 0; i < h * w; ++i) {
    flow.set(static_cast<std::size_t>(i), -dx);
    flow.set(static_cast<std::size_t>(h * w + i), -dy);
  }
  Tensor out = warp_by_flow(x, Tensor::from({2, h, w}, std::move(flow)));
  return planar ? reshape(out, image.shape()) : out;
}

ExposureStack render_bracket(const Tensor& radiance, const DegradeSpec& degrade, const SceneSpec& scene, Rng& rng) {
  degrade.validate();
  if (radiance.ndim() != 3 || radiance.dim(0) != kRawChannels) {
    throw ShapeError("render_bracket: radiance must be [4,H,W], got " + to_string(radiance.shape()));
  }
  const Buffer& rb = radiance.buffer();
  for (std::size_t i = 0; i < rb.size(); ++i) {
    if (!(rb.get(i) >= 0)) throw ShapeError("render_bracket: radiance must be non-negative");
  }
  ExposureStack stack;
  stack.exposure_times = degrade.exposure_times;
  for (int f = 0; f < kFrames; ++f) {
    const double ratio = degrade.exposure_times[f] / degrade.exposure_times[0];
    Tensor moved;
    const bool blurred = f >= kFrames - 2 && degrade.blur_taps > 1;
    if (!blurred) {
      moved = translate(radiance, f * scene.drift_x, f * scene.drift_y);
    } else {
      // Integrate over one drift step centered on this frame's position.
      std::vector<double> acc(static_cast<std::size_t>(radiance.numel()), 0.0);
      for (int k = 0; k < degrade.blur_taps; ++k) {
        const double s = f - 0.5 + (k + 0.5) / degrade.blur_taps;
        Tensor tap = translate(radiance, s * scene.drift_x, s * scene.drift_y);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += tap.value(static_cast<std::int64_t>(i));
      }
      std::vector<float> avg(acc.size());
      for (std::size_t i = 0; i < acc.size(); ++i) avg[i] = static_cast<float>(acc[i] / degrade.blur_taps);
      moved = Tensor::from(radiance.shape(), std::move(avg));
    }
    const double noise_scale = 1.0 / std::sqrt(ratio);
    std::vector<float> frame(static_cast<std::size_t>(moved.numel()));
    for (std::size_t i = 0; i < frame.size(); ++i) {
      const double exposed = std::clamp(moved.value(static_cast<std::int64_t>(i)) * ratio / scene.dynamic_range, 0.0, 1.0);
      const double sigma = std::sqrt(degrade.read_noise_sigma * degrade.read_noise_sigma +
                                     degrade.shot_noise_scale * degrade.shot_noise_scale * exposed) *
                           noise_scale;
      double v = exposed;
      if (sigma > 0) v += sigma * rng.normal();
      if (degrade.quantize) v = std::nearbyint(v * 4095.0) / 4095.0;
      frame[i] = static_cast<float>(v);
    }
    stack.frames[f] = Tensor::from(radiance.shape(), std::move(frame));
  }
  return stack;
}

SampleRecord generate_sample(const SceneSpec& scene, const DegradeSpec& degrade, std::string id) {
  Tensor radiance = generate_scene(scene);
  Rng rng(mix_seed(scene.seed, hash_string("noise")));
  SampleRecord s;
  s.id = std::move(id);
  s.stack = render_bracket(radiance, degrade, scene, rng);
  s.gt = mul_scalar(radiance, 1.0 / scene.dynamic_range);
  return s;
}

std::vector<SampleRecord> generate_dataset(std::int64_t count, std::uint64_t seed, const SceneSpec& scene,
                                           const DegradeSpec& degrade) {
  if (count < 1) throw ConfigError("dataset count must be >= 1");
  std::vector<SampleRecord> out;
  for (std::int64_t k = 0; k < count; ++k) {
    SceneSpec s = scene;
    s.seed = mix_seed(seed, static_cast<std::uint64_t>(k));
    char id[32];
    std::snprintf(id, sizeof id, "s%04lld", static_cast<long long>(k));
    out.push_back(generate_sample(s, degrade, id));
  }
  return out;
}

NamedTensors sample_entries(const SampleRecord& sample) {
  NamedTensors e;
  for (int i = 0; i < kFrames; ++i) e.emplace_back("frame" + std::to_string(i), sample.stack.frames[i]);
  std::vector<double> t(sample.stack.exposure_times.begin(), sample.stack.exposure_times.end());
  e.emplace_back("exposure_times", Tensor::from({kFrames}, std::move(t)));
  e.emplace_back("gt", sample.gt);
  return e;
}

namespace {

const Tensor& find_entry(const NamedTensors& entries, const std::string& name, const std::string& source) {
  for (const auto& [n, t] : entries) {
    if (n == name) return t;
  }
  throw FormatError(source + ": missing entry '" + name + "'");
}

}  // namespace

ExposureStack stack_from_entries(const NamedTensors& entries, const std::string& source) {
  ExposureStack stack;
  for (int i = 0; i < kFrames; ++i) stack.frames[i] = find_entry(entries, "frame" + std::to_string(i), source);
  const Tensor& t = find_entry(entries, "exposure_times", source);
  if (t.shape() != Shape{kFrames}) throw FormatError(source + ": exposure_times must have shape [5]");
  for (int i = 0; i < kFrames; ++i) stack.exposure_times[i] = t.value(i);
  try {
    stack.validate();
  } catch (const Error& e) {
    throw FormatError(source + ": " + e.what());
  }
  return stack;
}

SampleRecord sample_from_entries(const NamedTensors& entries, std::string id, const std::string& source) {
  SampleRecord s;
  s.id = std::move(id);
  s.stack = stack_from_entries(entries, source);
  s.gt = find_entry(entries, "gt", source);
  if (s.gt.shape() != s.stack.frames[0].shape()) throw FormatError(source + ": gt shape differs from frames");
  return s;
}

void write_sample(const std::filesystem::path& path, const SampleRecord& sample) {
  save_archive(path, sample_entries(sample));
}

SampleRecord read_sample(const std::filesystem::path& path) {
  return sample_from_entries(load_archive(path), path.stem().string(), path.string());
}

ExposureStack read_stack(const std::filesystem::path& path) {
  return stack_from_entries(load_archive(path), path.string());
}

void write_dataset(const std::vector<SampleRecord>& samples, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string index;
  for (const auto& s : samples) {
    if (s.id.empty() || s.id.find_first_of("/\\\n\t ") != std::string::npos) {
      throw FormatError("invalid sample id '" + s.id + "'");
    }
    write_sample(dir / (s.id + ".crt1a"), s);
    index += s.id + "\n";
  }
  write_file_atomic(dir / "index.txt", index);
}

std::vector<SampleRecord> read_dataset(const std::filesystem::path& dir) {
  const auto index_path = dir / "index.txt";
  if (!std::filesystem::exists(index_path)) throw FormatError(index_path.string() + ": missing dataset index");
  std::ifstream in(index_path);
  std::vector<SampleRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    out.push_back(read_sample(dir / (line + ".crt1a")));
  }
  if (out.empty()) throw FormatError(index_path.string() + ": dataset index lists no samples");
  return out;
}

}  // namespace crnet
