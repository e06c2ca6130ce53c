#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "affseg/config.hpp"
#include "affseg/tensor.hpp"

namespace affseg {

/// image [C, H, W] with values in [0, 1]; mask [H, W] of class ids.
struct SegmentationSample {
  Tensor<float> image;
  Tensor<int> mask;
  std::string id;
};

struct ShapeSpec {
  int count = 1;
  std::array<double, 2> radius_range{8, 16};
};

struct SyntheticSpec {
  int height = 64;
  int width = 64;
  ShapeSpec organ{1, {14, 22}};
  ShapeSpec tumor{2, {3, 6}};
  bool tumor_inside_organ = true;
  double noise_std = 0.02;
  std::uint64_t seed = 0;
};

// Base intensities before noise, indexed by class id.
inline constexpr std::array<float, 3> kSyntheticIntensity{0.1f, 0.5f, 0.85f};
inline constexpr int kPlacementAttempts = 200;

nlohmann::json to_json(const SyntheticSpec& s);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);
/// Throws ConfigError listing every violated constraint.
void validate(const SyntheticSpec& s);

/// Organs are filled ellipses (class 1) and tumors small disks (class 2).
/// Sample i depends only on (seed, i).
std::vector<SegmentationSample> generate_synthetic(const SyntheticSpec& spec, int n);

/// 8-bit grayscale (or RGB for channels = 3) PNG to [C, H, W] in [0, 1].
Tensor<float> read_png_image(const std::filesystem::path& path, int channels = 1);
Tensor<int> read_png_mask(const std::filesystem::path& path);
void write_png_image(const std::filesystem::path& path, const Tensor<float>& image);
void write_png_mask(const std::filesystem::path& path, const Tensor<int>& mask);
/// RGB image [3, H, W] as an 8-bit PNG.
void write_png_rgb(const std::filesystem::path& path, const Tensor<float>& rgb);

/// Writes <id>_img.png and <id>_mask.png.
void save_sample(const std::filesystem::path& dir, const SegmentationSample& s);
/// Reads every <id>_img.png / <id>_mask.png pair, sorted by id.
std::vector<SegmentationSample> load_directory(const std::filesystem::path& dir, int num_classes,
                                               int channels = 1);

SegmentationSample hflip(const SegmentationSample& s);
/// Counter-clockwise rotation about the image center; bilinear for the
/// image, nearest for the mask, zero outside the source.
SegmentationSample rotate(const SegmentationSample& s, double degrees);
SegmentationSample augment(const SegmentationSample& s, const AugmentConfig& cfg, std::mt19937_64& rng);
/// Bilinear (half-pixel centers) for the image, nearest for the mask.
SegmentationSample resize(const SegmentationSample& s, int height, int width);

struct DataSplit {
  std::vector<SegmentationSample> train;
  std::vector<SegmentationSample> val;
  std::vector<SegmentationSample> test;
  std::vector<std::string> warnings;
};

/// Seeded shuffle then partition. Every split gets at least one sample;
/// needs n >= 3.
DataSplit split(const std::vector<SegmentationSample>& samples, std::uint64_t seed,
                std::array<double, 3> fractions = {0.80, 0.15, 0.05});

/// Deterministic stream seeds. The id variant lets per-sample work run in
/// any order without changing the result.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, const std::string& id);

template <typename T>
struct Batch {
  Tensor<T> images;   // [B, C, H, W]
  Tensor<int> labels; // [B, H, W]
};

template <typename T>
Batch<T> make_batch(const std::vector<SegmentationSample>& samples, const std::vector<std::size_t>& indices);

/// Checks every sample against the model's channel count, image size and
/// class count. Throws DataError.
void check_compatible(const std::vector<SegmentationSample>& samples, const ModelConfig& cfg);

}  // namespace affseg
