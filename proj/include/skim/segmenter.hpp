// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "skim/attention.hpp"
#include "skim/tensor.hpp"

namespace skim {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class RegistryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::size_t image_size = 128;
  std::size_t patch = 8;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t window = 4;  // in patches
  /// Blocks using global attention; unset means "last block only".
  std::optional<std::vector<std::size_t>> global_blocks;
  std::size_t mlp_ratio = 4;
  std::size_t lora_rank = 4;
  std::size_t decoder_dim = 64;
  std::size_t decoder_blocks = 2;
  std::size_t decoder_mlp_dim = 128;
  std::size_t mask_scale = 4;
  bool encoder_bypass = true;
  bool decoder_bypass = true;
  std::uint64_t init_seed = 0;

  /// toy-B / toy-L / toy-H: depth 2/4/6, embed 48/64/96.
  static ModelConfig preset(std::string_view name);

  void validate() const;
  std::size_t grid() const { return image_size / patch; }
  std::size_t mask_size() const { return image_size / mask_scale; }
  /// Number of 2x learned upsampling stages from the patch grid to the mask.
  std::size_t upsample_stages() const;
  std::vector<std::size_t> resolved_global_blocks() const;
  bool is_global_block(std::size_t index) const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  /// Canonical architecture description; equal strings mean checkpoints are
  /// interchangeable.
  std::string fingerprint() const;
};

enum class ParamGroup { encoder_base, encoder_bypass, prompt, decoder };
std::string_view to_string(ParamGroup group);

struct ParamEntry {
  std::string name;
  Tensor tensor;
  bool trainable;
  ParamGroup group;
};

/// Named parameters in registration order. Entries share storage with the
/// model, so in-place edits through the registry are visible to forward().
class ParamRegistry {
 public:
  void add(std::string name, Tensor& tensor, ParamGroup group);

  const std::vector<ParamEntry>& entries() const noexcept { return entries_; }
  std::vector<ParamEntry>& entries() noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  const ParamEntry& at(std::string_view name) const;
  ParamEntry& at(std::string_view name);
  bool contains(std::string_view name) const;

  void zero_grads();

 private:
  std::vector<ParamEntry> entries_;
};

/// Group implied by a parameter name under the freeze policy: encoder weights
/// are frozen base parameters except the low-rank factors ".W1"/".W2";
/// "prompt." and "decoder." parameters are trainable.
ParamGroup classify_param_name(std::string_view name);

struct ParamCounts {
  std::size_t total = 0;
  std::size_t trainable = 0;
  std::array<std::size_t, 4> by_group{};  // indexed by ParamGroup

  std::size_t group(ParamGroup g) const { return by_group[static_cast<std::size_t>(g)]; }
  double trainable_fraction() const { return total ? static_cast<double>(trainable) / static_cast<double>(total) : 0; }
};

struct ParamPartition {
  std::vector<std::string> trainable;
  std::vector<std::string> frozen;
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;

  static LayerNormParams create(std::size_t dim);
  Tensor operator()(const Tensor& x) const;
};

struct EncoderBlock {
  LayerNormParams norm1;
  AttentionParams attn;
  LayerNormParams norm2;
  Linear fc1;
  Linear fc2;
};

struct TwoWayBlock {
  AttentionParams self_attn;
  LayerNormParams norm1;
  AttentionParams cross;      // tokens attend to the image
  LayerNormParams norm2;
  Linear fc1;
  Linear fc2;
  LayerNormParams norm3;
  AttentionParams cross_rev;  // image attends to the tokens
  LayerNormParams norm4;
};

/// ViT encoder with low-rank bypasses, a learned dense "no mask" prompt, and
/// a two-way mask decoder with a dynamic per-pixel classifier.
class SegmenterModel {
 public:
  explicit SegmenterModel(ModelConfig config);

  SegmenterModel(const SegmenterModel&) = delete;
  SegmenterModel& operator=(const SegmenterModel&) = delete;
  SegmenterModel(SegmenterModel&&) = default;
  SegmenterModel& operator=(SegmenterModel&&) = default;

  const ModelConfig& config() const noexcept { return config_; }
  ParamRegistry& registry() noexcept { return registry_; }
  const ParamRegistry& registry() const noexcept { return registry_; }

  /// [3, H, W] -> [g, g, embed_dim]
  Tensor patch_embed(const Tensor& image) const;
  /// [3, H, W] -> [g, g, decoder_dim]
  Tensor encoder_forward(const Tensor& image) const;
  /// The learned "no mask" vector broadcast to [g, g, decoder_dim].
  Tensor prompt_default() const;
  /// Image embeddings + dense prompt -> quarter-resolution logits [m, m].
  Tensor decoder_forward(const Tensor& embeddings, const Tensor& prompt) const;
  /// Full-resolution logits [H, W].
  Tensor forward(const Tensor& image) const;

  ParamCounts count_params() const;
  ParamPartition param_partition() const;

  /// Copies every parameter whose name also exists in `other` (same shape).
  void copy_shared_params(const SegmenterModel& other);

 private:
  void register_params();
  void register_attention(const std::string& prefix, AttentionParams& attn, ParamGroup base_group);
  void register_linear(const std::string& prefix, Linear& lin, ParamGroup group);
  void register_norm(const std::string& prefix, LayerNormParams& norm, ParamGroup group);
  Tensor mlp_block(const Tensor& x, const Linear& fc1, const Linear& fc2) const;

  ModelConfig config_;
  Linear patch_proj_;
  Tensor pos_embed_;
  std::vector<EncoderBlock> blocks_;
  Linear neck_;
  LayerNormParams neck_norm_;
  Tensor no_mask_embed_;
  Tensor mask_token_;
  std::vector<TwoWayBlock> decoder_blocks_;
  std::vector<Linear> upsample_;
  std::array<Linear, 3> hyper_;
  ParamRegistry registry_;
};

/// Closed-form parameter totals for a configuration (independent of any
/// constructed model).
ParamCounts expected_param_counts(const ModelConfig& config);

}  // namespace skim
