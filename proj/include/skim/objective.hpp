// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "skim/tensor.hpp"

namespace skim {

/// Invalid caller-supplied data (non-binary mask, empty list, ...).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct LossConfig {
  double alpha = 0.5;  // weight of the BCE term
  double eps = 1e-6;   // Dice smoothing

  void validate() const;
};

/// Probabilities are clamped to [kBceClamp, 1 - kBceClamp] inside the log.
inline constexpr double kBceClamp = 1e-7;

/// Mean pixel-wise binary cross-entropy of probabilities `p` against a
/// {0,1} mask `y` of the same shape. Differentiable in `p`.
Tensor bce_loss(const Tensor& p, const Tensor& y);
/// 1 - (2 sum(y p) + eps) / (sum(y^2) + sum(p^2) + eps).
Tensor dice_loss(const Tensor& p, const Tensor& y, double eps = 1e-6);
/// alpha * bce + (1 - alpha) * dice for a single image.
Tensor composite_loss(const Tensor& p, const Tensor& y, const LossConfig& cfg);
/// Batch loss: mean of the per-image composite losses.
Tensor composite_loss(std::span<const Tensor> p, std::span<const Tensor> y, const LossConfig& cfg);

struct Confusion {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  bool operator==(const Confusion&) const = default;
};

/// Prediction is `p >= threshold`; `y` must be binary.
Confusion confusion(std::span<const double> p, std::span<const double> y, double threshold = 0.5);
Confusion confusion(const Tensor& p, const Tensor& y, double threshold = 0.5);

struct Metrics {
  double accuracy = 0;
  double recall = 0;
  double precision = 0;
  double dice = 0;
  double iou = 0;
};

/// Ratios with an empty denominator evaluate to 1 when the image has no
/// false positives and no false negatives, and to 0 otherwise.
Metrics metrics_from_confusion(const Confusion& c);

inline constexpr const char* kZeroDivisionPolicy = "1 if fp == fn == 0 else 0";
inline constexpr const char* kAveraging = "per-image mean";

struct MetricsReport {
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::string dataset;
  std::vector<std::string> image_names;  // optional, parallel to per_image
  std::vector<Metrics> per_image;
  Metrics aggregate;
  std::size_t params_total = 0;
  std::size_t params_trainable = 0;

  std::size_t n_images() const { return per_image.size(); }
  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
  void write(const std::filesystem::path& path) const;
  static MetricsReport read(const std::filesystem::path& path);
};

/// Unweighted mean over images. Throws InputError when `per_image` is empty.
MetricsReport aggregate_report(std::vector<Metrics> per_image, std::size_t params_total, std::size_t params_trainable);

nlohmann::json metrics_to_json(const Metrics& m);
Metrics metrics_from_json(const nlohmann::json& j);

}  // namespace skim
