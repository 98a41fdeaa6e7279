#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "crnet/model.hpp"
#include "crnet/rng.hpp"

namespace crnet {

struct SceneSpec {
  std::uint64_t seed = 0;
  std::int64_t height = 64;
  std::int64_t width = 64;
  int n_gradients = 2;
  int n_disks = 3;
  int n_edges = 2;
  double dynamic_range = 16.0;
  // Global translation per frame index, in pixels.
  double drift_x = 1.0;
  double drift_y = 0.5;

  void validate() const;
};

struct DegradeSpec {
  std::array<double, kFrames> exposure_times{1, 4, 16, 64, 256};
  // Standard deviations on the reference frame's [0, 1] scale; frame i's
  // noise is divided by sqrt(dt_i / dt_0).
  double read_noise_sigma = 0.02;
  double shot_noise_scale = 0.01;
  // Sub-positions averaged for the two longest exposures; 1 disables blur.
  int blur_taps = 8;
  bool quantize = true;

  void validate() const;
};

// One training pair. `gt` is the clean radiance divided by the dynamic range,
// i.e. expressed in the reference frame's units, shape [4, H, W].
struct SampleRecord {
  std::string id;
  ExposureStack stack;
  Tensor gt;
};

// Radiance [4, H, W] in [0, dynamic_range]. Contains pixels above 1 and below
// dynamic_range / 256 unless all content counts are zero, in which case the
// field is uniform mid-gray (0.18 * dynamic_range).
Tensor generate_scene(const SceneSpec& spec);

// Content translated by (dx, dy) pixels with bilinear sampling and clamped
// borders: out(y, x) = in(y - dy, x - dx).
Tensor translate(const Tensor& image, double dx, double dy);

// Frame i: shift by i * drift (motion-blurred over one drift step for the two
// longest exposures), expose clip(H * (dt_i / dt_0) / dynamic_range, 0, 1),
// add Gaussian read + shot noise and quantize to 12 bits. Noise is not clipped,
// so dark pixels may read slightly negative, as raw data does after black
// level subtraction.
ExposureStack render_bracket(const Tensor& radiance, const DegradeSpec& degrade, const SceneSpec& scene, Rng& rng);

SampleRecord generate_sample(const SceneSpec& scene, const DegradeSpec& degrade, std::string id);

// Sample k uses scene seed mix_seed(seed, k) and id "s" + zero-padded k.
std::vector<SampleRecord> generate_dataset(std::int64_t count, std::uint64_t seed, const SceneSpec& scene,
                                           const DegradeSpec& degrade);

NamedTensors sample_entries(const SampleRecord& sample);
SampleRecord sample_from_entries(const NamedTensors& entries, std::string id, const std::string& source);

// Frames and exposure times only; any other entries (such as gt) are ignored.
ExposureStack stack_from_entries(const NamedTensors& entries, const std::string& source);

void write_sample(const std::filesystem::path& path, const SampleRecord& sample);
SampleRecord read_sample(const std::filesystem::path& path);
// Reads the stack part of a sample archive; ground truth is optional.
ExposureStack read_stack(const std::filesystem::path& path);

// `dir/index.txt` lists ids one per line; each sample lives in `dir/<id>.crt1a`.
void write_dataset(const std::vector<SampleRecord>& samples, const std::filesystem::path& dir);
std::vector<SampleRecord> read_dataset(const std::filesystem::path& dir);

}  // namespace crnet
