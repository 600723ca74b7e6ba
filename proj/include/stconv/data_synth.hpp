#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stconv/tensor.hpp"

namespace stconv {

inline constexpr int kBands = 11;

/// Anisotropic Gaussian: amp * exp(-(dh^2 / 2 sy^2 + dw^2 / 2 sx^2)), centre moving
/// by (vh, vw) pixels per frame.
struct Blob {
  double ch = 0, cw = 0;
  double vh = 0, vw = 0;
  double sy = 4, sx = 4;
  double amp = 1;
};

struct BandMix {
  double gain = 1;
  double offset = 0;
  double blur = 0;  // Gaussian sigma in pixels, 0 = none
};

std::array<BandMix, kBands> default_bands();

struct SceneSpec {
  std::int64_t h = 48, w = 48;
  std::int64_t t_in = 4, t_out = 32;
  std::int64_t crop_factor = 6;
  std::vector<Blob> blobs;
  std::array<BandMix, kBands> bands = default_bands();
  double rain_threshold = 0.5;

  /// Throws ConfigError when a blob centre leaves the grid before the last target frame.
  void validate() const;
};

/// Latent intensity field at frame t, shape (1, 1, 1, h, w).
Tensor<float> render_latent(const SceneSpec& s, std::int64_t t);

struct Sample {
  std::string id;
  std::string split = "train";
  Tensor<float> x;  // (1, 11, t_in, h, w)
  Tensor<float> y;  // (1, 1, t_out, h / crop, w / crop), values in {0, 1}
};

/// Bands of frames 0..t_in-1 and thresholded, centre-cropped frames t_in..t_in+t_out-1.
Sample render(const SceneSpec& s, const std::string& id = "0");

/// Nearest-frame persistence: the cropped rain mask of the last input frame repeated
/// over every target frame.
Tensor<float> persistence_forecast(const SceneSpec& s);

struct SamplerConfig {
  std::int64_t h = 48, w = 48;
  std::int64_t t_in = 4, t_out = 32;
  std::int64_t crop_factor = 6;
  std::int64_t min_blobs = 1, max_blobs = 3;
  double min_sigma = 2.5, max_sigma = 8.0;
  double max_speed = 1.0;
  double min_amp = 0.6, max_amp = 1.6;
  double rain_threshold = 0.5;
  /// Share of scenes that are a single front sweeping across the target window.
  double front_fraction = 0.5;
  /// Fronts drift at a speed drawn from [front_min_speed, max_speed].
  double front_min_speed = 0.5;
  /// Free blobs cross the grid centre +- pass_spread * extent at mid-horizon.
  double pass_spread = 0.2;

  void validate() const;
};

/// Scene for sample `id`: drawn from an Rng seeded with (seed XOR id).
SceneSpec sample_scene(const SamplerConfig& cfg, std::uint64_t seed, std::uint64_t id);

/// Single elongated blob drifting along +W at one pixel per frame, placed so that its
/// mask edges keep crossing the target window for the whole horizon.
SceneSpec motion_scene(const SamplerConfig& cfg, std::uint64_t seed, std::uint64_t id);

struct Dataset {
  std::vector<Sample> samples;
  std::vector<SceneSpec> scenes;  // empty when read from disk
};

/// `count` samples with ids first_id .. first_id+count-1, all tagged `split`.
Dataset generate(const SamplerConfig& cfg, std::uint64_t seed, std::int64_t count, std::uint64_t first_id = 0,
                 const std::string& split = "train");

/// `index.txt` with one `<id> <split> <x-file> <y-file>` line per sample, plus STSR blobs.
void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples);
/// Throws FormatError naming the sample on missing or corrupt blobs and shape mismatches.
std::vector<Sample> read_dataset(const std::filesystem::path& dir);

std::vector<Sample> select_split(const std::vector<Sample>& all, const std::string& split);

}  // namespace stconv
