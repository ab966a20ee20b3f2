// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>

#include "skim/random.hpp"
#include "skim/tensor.hpp"

namespace skim {

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static Linear create(std::size_t in, std::size_t out, Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

/// Projection with an optional low-rank bypass: y = x W + b + (x W1) W2.
///
/// `down` (W1, [in, r]) and `up` (W2, [r, out]) exist only when the bypass is
/// enabled. W2 starts at zero, so an untrained bypass leaves the base
/// projection unchanged bit for bit.
struct BypassLinear {
  Tensor weight;
  Tensor bias;
  Tensor down;
  Tensor up;
  bool enabled = false;

  /// Base weight ~ N(0, 1/in), zero bias; W1 ~ N(0, 0.02), W2 = 0.
  static BypassLinear create(std::size_t in, std::size_t out, std::size_t rank, bool with_bypass, Rng& rng);
  void attach_bypass(std::size_t rank, Rng& rng);

  std::size_t in_features() const { return weight.extent(0); }
  std::size_t out_features() const { return weight.extent(1); }
  std::size_t rank() const { return enabled ? down.extent(1) : 0; }
  void validate() const;
};

Tensor bypass_linear_forward(const Tensor& x, const BypassLinear& p);

/// Multi-head attention parameters. Only the query and value projections
/// carry bypasses; the key projection is always plain.
struct AttentionParams {
  std::size_t heads = 1;
  BypassLinear q;
  BypassLinear k;
  BypassLinear v;
  Linear out;
  std::optional<std::size_t> window;  // square tile side in tokens; empty = global

  static AttentionParams create(std::size_t dim, std::size_t heads, std::size_t rank, bool with_bypass,
                                std::optional<std::size_t> window, Rng& rng);

  std::size_t dim() const { return q.out_features(); }
  std::size_t head_dim() const { return dim() / heads; }
  void validate() const;
};

/// [h, w, d] -> [(h/window) * (w/window), window * window, d]; tiles are
/// ordered row-major over the grid and tokens row-major inside each tile.
Tensor window_partition(const Tensor& x, std::size_t window);
/// Inverse of window_partition.
Tensor window_merge(const Tensor& tiles, std::size_t height, std::size_t width, std::size_t window);

/// softmax(Q K^T / sqrt(d_k)) V per head over batched token sets
/// queries [B, Tq, d] and context [B, Tk, d], heads concatenated, then the
/// output projection.
Tensor multi_head_attention(const Tensor& queries, const Tensor& context, const AttentionParams& p);

/// Self-attention over [tokens, d] or a [h, w, d] grid. With a window, the
/// grid is split into tiles that attend independently.
Tensor attention_forward(const Tensor& x, const AttentionParams& p);

}  // namespace skim
