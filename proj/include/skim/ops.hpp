// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <variant>
#include <vector>

#include "skim/tensor.hpp"

namespace skim {

/// Batched matrix product over the last two axes. Leading batch extents must
/// agree, or be absent on one side (that operand is shared by every batch).
Tensor matmul(const Tensor& a, const Tensor& b);

/// x[..., in] * w[in, out] (+ bias[out]). `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// Broadcasting is right-aligned: shapes are compared from the last axis
// backwards, a missing leading axis counts as extent 1, and an extent of 1 is
// stretched to match the other operand. Gradients are summed over stretched
// axes.
enum class BinaryKind { add, sub, mul };

Shape broadcast_shape(const Shape& a, const Shape& b);
Tensor elementwise(const Tensor& a, const Tensor& b, BinaryKind kind);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

enum class Activation { gelu, sigmoid, relu };

/// gelu is the exact form x * Phi(x). sigmoid outputs are clamped to
/// [2^-24, 1 - 2^-24] so they stay strictly inside (0, 1) in both precisions;
/// the derivative is y * (1 - y) of the clamped output.
Tensor activation(const Tensor& x, Activation kind);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);

/// Max-subtracted softmax along `axis` (negative counts from the back).
Tensor softmax(const Tensor& x, int axis = -1);

/// Normalizes over the last axis; gamma and beta have shape [last extent].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

// Pure data movement. space_to_depth and depth_to_space act on channel-first
// [C, H, W] tensors: output channel (c * f + dy) * f + dx of cell (i, j) holds
// input pixel (c, i * f + dy, j * f + dx).
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, const std::vector<std::size_t>& perm);
Tensor space_to_depth(const Tensor& x, std::size_t factor);
Tensor depth_to_space(const Tensor& x, std::size_t factor);

struct Reshape {
  Shape shape;
};
struct Transpose {
  std::vector<std::size_t> perm;
};
struct SpaceToDepth {
  std::size_t factor;
};
struct DepthToSpace {
  std::size_t factor;
};
using RearrangeSpec = std::variant<Reshape, Transpose, SpaceToDepth, DepthToSpace>;

Tensor rearrange(const Tensor& x, const RearrangeSpec& spec);

enum class ResizeMode { nearest, bilinear };

/// Integer-factor upsampling of [C, H, W]. Bilinear follows the
/// align-corners-false grid: output index d samples source coordinate
/// (d + 0.5) / factor - 0.5, clamped to [0, extent - 1].
Tensor resize(const Tensor& x, std::size_t factor, ResizeMode mode);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Central-difference gradient check of scalar f at x (64-bit mode only).
/// Returns max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5);

/// Same check against a leaf that f reads implicitly (e.g. a model
/// parameter). The leaf is perturbed in place and restored; its gradient
/// buffer is zeroed afterwards. `max_coords` limits the probed coordinates to
/// an evenly strided subset (0 = all).
double finite_diff_check(const std::function<Tensor()>& f, Tensor& leaf, double eps = 1e-5,
                         std::size_t max_coords = 0);

}  // namespace skim
