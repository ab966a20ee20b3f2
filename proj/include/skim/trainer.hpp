// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "skim/datapipe.hpp"
#include "skim/objective.hpp"
#include "skim/segmenter.hpp"

namespace skim {

struct TrainConfig {
  double lr0 = 1e-3;
  double beta1 = 0.937;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t batch = 8;
  std::size_t micro_batch = 8;  // must divide batch
  std::size_t epochs = 200;
  std::size_t t0 = 10;          // first cosine period, epochs
  std::size_t t_mult = 100;     // period multiplier
  double eta_min_ratio = 0.01;  // eta_min = lr0 * eta_min_ratio
  std::size_t patience = 50;
  /// Stop as soon as validation Dice reaches this value (disabled when unset).
  std::optional<double> target_dice;
  bool augment = true;
  AugmentConfig augmentation;
  LossConfig loss;
  double threshold = 0.5;
  std::uint64_t seed = 0;

  double eta_min() const { return lr0 * eta_min_ratio; }
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Cosine annealing with warm restarts, stepped per epoch. Periods have
/// lengths t0, t0 * t_mult, t0 * t_mult^2, ...
double lr_at(std::size_t epoch, const TrainConfig& cfg);

struct AdamWStepReport {
  std::size_t updated = 0;
  /// Frozen parameters that carried a gradient. They are left untouched.
  std::vector<std::string> flagged_frozen;
};

/// Decoupled-weight-decay Adam with bias correction. Moment buffers exist
/// for trainable parameters only.
class AdamW {
 public:
  AdamW(const ParamRegistry& registry, const TrainConfig& cfg);

  /// Applies one update from the accumulated gradients. Throws
  /// ContractError when a trainable parameter has no gradient buffer.
  AdamWStepReport step(ParamRegistry& registry, double lr);
  std::uint64_t steps() const noexcept { return step_; }
  std::size_t buffers() const noexcept { return moments_.size(); }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  double beta1_, beta2_, eps_, weight_decay_;
  std::uint64_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

/// A letterboxed training pair ready for the model.
struct TrainExample {
  Tensor image;  // [3, S, S]
  Tensor mask;   // [S, S]
};

TrainExample make_example(const Sample& sample, std::size_t image_size);

/// Backward passes over `batch` in micro-batches of `micro_batch`; each
/// sample's loss is scaled by 1/|batch|, so the accumulated gradient is that
/// of the batch-mean loss. Returns the batch-mean composite loss.
double accumulate_gradients(SegmenterModel& model, std::span<const TrainExample> batch, std::size_t micro_batch,
                            const LossConfig& loss);

/// One optimizer step over `batch`, split into micro-batches of
/// `micro_batch`. Each sample's loss is scaled by 1/|batch| before its
/// gradient is accumulated. Returns the mean composite loss of the batch.
double train_step(SegmenterModel& model, std::span<const TrainExample> batch, std::size_t micro_batch,
                  const LossConfig& loss, AdamW& optimizer, double lr);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double loss = 0;
  double val_dice = 0;

  nlohmann::json to_json() const;
};

struct FitResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_dice = -1;
  bool stopped_early = false;
  bool reached_target = false;
};

struct FitOptions {
  /// Written whenever validation Dice improves.
  std::optional<std::filesystem::path> checkpoint;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Trains with the full protocol and leaves the model holding the
/// best-validation parameters.
FitResult fit(SegmenterModel& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
              const TrainConfig& cfg, const FitOptions& options = {});

/// Sigmoid probabilities at the sample's original resolution.
std::vector<double> predict_probabilities(const SegmenterModel& model, const Sample& sample);
/// Letterbox, forward, invert the letterbox, threshold, per-image metrics.
std::vector<Metrics> evaluate(const SegmenterModel& model, const std::vector<Sample>& samples, double threshold = 0.5);
double mean_dice(const std::vector<Metrics>& metrics);

void write_history(const std::filesystem::path& path, const std::vector<EpochRecord>& history);

// ---------------------------------------------------------------------------
// checkpoints

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class CheckpointChecksumError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointFingerprintError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_checkpoint(const SegmenterModel& model);
void save_checkpoint(const SegmenterModel& model, const std::filesystem::path& path);
/// Validates the whole file before touching the model; on any error the
/// model is unchanged.
void load_checkpoint(const std::filesystem::path& path, SegmenterModel& model);

// ---------------------------------------------------------------------------
// freeze verification

using ParamSnapshot = std::map<std::string, std::vector<double>>;
ParamSnapshot take_snapshot(const ParamRegistry& registry);

struct FreezeReport {
  std::vector<std::string> frozen_changed;
  std::vector<std::string> trainable_changed;

  bool frozen_intact() const { return frozen_changed.empty(); }
};

/// Byte comparison of every parameter against the snapshot.
FreezeReport verify_freeze(const ParamRegistry& registry, const ParamSnapshot& before);

}  // namespace skim
