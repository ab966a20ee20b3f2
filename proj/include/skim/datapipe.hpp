// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "skim/objective.hpp"
#include "skim/random.hpp"
#include "skim/tensor.hpp"

namespace skim {

/// Malformed file contents. The message names the file and the byte offset.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& file, std::size_t offset, const std::string& what);
  const std::string& file() const noexcept { return file_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::string file_;
  std::size_t offset_;
};

class DataConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// RGB image, channel-first [3, height, width], values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), data(3 * h * w, fill) {}
  double& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  bool operator==(const Image&) const = default;
};

/// Binary mask, row-major, values 0 or 1.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(std::size_t h, std::size_t w) : height(h), width(w), data(h * w, 0) {}
  std::uint8_t& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
  std::size_t area() const;
  bool operator==(const Mask&) const = default;
};

struct Sample {
  Image image;
  Mask mask;
  std::string domain;
  std::vector<std::string> kinds;

  void validate() const;
};

Tensor image_tensor(const Image& image);
Tensor mask_tensor(const Mask& mask);

// ---------------------------------------------------------------------------
// letterbox

struct LetterboxGeometry {
  double scale = 1.0;
  std::size_t pad_top = 0;
  std::size_t pad_left = 0;
  std::size_t pad_bottom = 0;
  std::size_t pad_right = 0;
  std::size_t original_h = 0;
  std::size_t original_w = 0;
  std::size_t target = 0;

  std::size_t content_h() const { return target - pad_top - pad_bottom; }
  std::size_t content_w() const { return target - pad_left - pad_right; }
};

inline constexpr double kLetterboxImagePad = 0.5;

/// Fits the sample into target x target without magnifying: scale =
/// min(1, target/h, target/w), bilinear for the image and nearest for the
/// mask, content centered, padding 0.5 (image) and 0 (mask).
std::pair<Sample, LetterboxGeometry> letterbox(const Sample& sample, std::size_t target);
LetterboxGeometry letterbox_geometry(std::size_t height, std::size_t width, std::size_t target);

/// Crops the padding from a target x target map and resizes it back to the
/// original size (nearest neighbour).
std::vector<double> invert_letterbox(std::span<const double> map, const LetterboxGeometry& geometry);

Image resize_bilinear(const Image& image, std::size_t height, std::size_t width);
Mask resize_nearest(const Mask& mask, std::size_t height, std::size_t width);

// ---------------------------------------------------------------------------
// augmentation

struct AugmentConfig {
  double p_hflip = 0.5;
  double p_vflip = 0.5;
  double p_rot90 = 0.5;
  double p_brightness = 0.5;
  double p_contrast = 0.5;
  double brightness_range = 0.2;  // additive shift U(-range, range)
  double contrast_range = 0.2;    // gain U(1 - range, 1 + range) about the image mean
};

/// Which ops fired, for replaying the geometry on other data.
struct AugmentTrace {
  bool hflip = false;
  bool vflip = false;
  bool rot90 = false;
  std::optional<double> brightness;
  std::optional<double> contrast;
};

Sample augment(const Sample& sample, Rng& rng, const AugmentConfig& cfg = {}, AugmentTrace* trace = nullptr);

Image hflip(const Image& image);
Image vflip(const Image& image);
/// Quarter turn clockwise: out(y, x) = in(h - 1 - x, y).
Image rot90(const Image& image);
Mask hflip(const Mask& mask);
Mask vflip(const Mask& mask);
Mask rot90(const Mask& mask);

// ---------------------------------------------------------------------------
// synthetic fabric domains

inline constexpr std::array<const char*, 4> kDefectKinds{"stain", "broken-yarn", "hole", "fluff"};
inline constexpr double kMinDefectArea = 0.001;
inline constexpr double kMaxDefectArea = 0.20;

struct DomainSpec {
  std::string domain_id = "D1";
  std::size_t height = 128;
  std::size_t width = 128;
  struct Texture {
    double weave_period = 8.0;  // pixels, [3, 64]
    double yarn_contrast = 0.3;  // [0, 1]
    double orientation = 0.0;   // radians, [-pi, pi]
    std::array<double, 3> color{0.55, 0.55, 0.55};
  } texture;
  /// Probabilities over kDefectKinds; must sum to 1.
  std::array<double, 4> defect_mix{1.0, 0.0, 0.0, 0.0};
  std::size_t max_defects = 2;
  struct Imaging {
    double brightness = 0.0;  // [-0.5, 0.5]
    double contrast_gain = 1.0;  // [0.25, 4]
    double noise_std = 0.02;  // multiplicative, [0, 0.5]
  } imaging;
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static DomainSpec from_json(const nlohmann::json& j);

  /// D1 stain-only, D2 line defects, D3 mixed defects with shifted imaging.
  static DomainSpec builtin(const std::string& id, std::uint64_t seed = 1);
  /// Default cardinality of the built-in domains (40 / 20 / 150).
  static std::size_t builtin_size(const std::string& id);
};

/// Deterministic in (spec, index): the per-sample seed is spec.seed + index.
Sample generate_sample(const DomainSpec& spec, std::size_t index);

/// Gray-level histogram over the images, normalized to sum 1.
std::vector<double> intensity_histogram(const std::vector<Image>& images, std::size_t bins = 32);
/// Total-variation distance between two normalized histograms, in [0, 1].
double histogram_distance(const std::vector<double>& a, const std::vector<double>& b);
/// Histograms of the built-in domains differ pairwise by more than this.
inline constexpr double kDomainShiftThreshold = 0.15;

// ---------------------------------------------------------------------------
// manifests, splits, files

enum class Split { train, val, test, none };
std::string to_string(Split split);
Split split_from_string(const std::string& text);

struct ManifestEntry {
  std::string image;  // relative to the manifest directory
  std::string mask;
  std::string domain;
  std::vector<std::string> kinds;
  Split split = Split::none;
};

struct DatasetManifest {
  std::filesystem::path root;  // directory holding the manifest
  nlohmann::json spec = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> samples;

  std::size_t size() const { return samples.size(); }
  std::size_t count(Split split) const;
  /// Manifest restricted to one split (all entries for Split::none).
  DatasetManifest subset(Split split) const;
  Sample load(std::size_t index) const;
  std::vector<Sample> load_all() const;

  nlohmann::json to_json() const;
  void save(const std::filesystem::path& path) const;
  static DatasetManifest read(const std::filesystem::path& path);
};

/// Generates n samples into `dir` (images/*.ppm, masks/*.pgm) and writes
/// `dir`/manifest.json. Splits are left unassigned.
DatasetManifest synth_generate(const DomainSpec& spec, std::size_t n, const std::filesystem::path& dir);

struct SplitFractions {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

/// Seeded shuffle, then val = floor(n * val), test = floor(n * test), and
/// the remainder goes to train.
DatasetManifest split_dataset(const DatasetManifest& manifest, const SplitFractions& fractions, std::uint64_t seed);

/// Keeps k train entries chosen uniformly without replacement; val and test
/// entries are untouched.
DatasetManifest few_shot_sample(const DatasetManifest& manifest, std::size_t k, std::uint64_t seed);

void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Mask& mask);
Mask read_pgm(const std::filesystem::path& path);
/// Rounds every value to the nearest k/255 (what a P6 file can hold).
void quantize_8bit(Image& image);

}  // namespace skim
