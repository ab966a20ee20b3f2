// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace skim {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a caller violates an operation's preconditions (non-scalar
/// loss, non-deterministic function under finite differences, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// ---------------------------------------------------------------------------
// Precision
//
// Values are held in double buffers. In f32 mode (the default) every op result
// and every freshly created tensor is rounded to the nearest binary32 value, so
// all data are exact 32-bit floats and checkpoints store them losslessly. f64
// mode skips the rounding and is used for gradient checking.
// ---------------------------------------------------------------------------
enum class Precision { f32, f64 };

Precision precision() noexcept;
void set_precision(Precision p) noexcept;
double quantize(double v) noexcept;
void quantize(std::span<double> values) noexcept;

class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p) noexcept;
  ~PrecisionScope();
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision saved_;
};

/// While alive, ops record no graph (inference only).
class NoGradScope {
 public:
  NoGradScope() noexcept;
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool saved_;
};
bool grad_enabled() noexcept;

namespace detail {
struct Node;
}

/// Gradient buffer of one op input. Empty when the input does not need a
/// gradient; backward functions must skip inactive slots.
struct GradSlot {
  std::span<double> grad;
  bool active() const noexcept { return !grad.empty(); }
};

using BackwardFn = std::function<void(std::span<const double> grad_out, std::span<GradSlot> inputs)>;

/// Shape-tagged dense row-major array that participates in reverse-mode
/// differentiation. Copies share the underlying node; ops always produce new
/// tensors.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor constant(Shape shape, double value);
  /// Normal(mean, stddev) fill drawn from Rng(seed) via Box-Muller pairs.
  static Tensor gaussian(Shape shape, double mean, double stddev, std::uint64_t seed);
  static Tensor from_values(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);

  /// Builds an op result. `grad_fn` is retained only if some input requires
  /// gradients; otherwise the result is a constant leaf.
  static Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                        BackwardFn grad_fn);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  /// Extent of `axis`; negative values count from the back.
  std::size_t extent(int axis) const;

  std::span<const double> values() const;
  /// In-place access for leaves (parameters). Graphs built earlier read the
  /// mutated data if backward runs afterwards.
  std::span<double> mutable_values();
  double value(std::size_t flat_index) const { return values()[flat_index]; }
  double item() const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Accumulates d(this)/d(leaf) into every requires_grad leaf reachable from
  /// this single-element tensor. Repeated calls add up until zero_grad().
  void backward() const;

  /// Fresh constant leaf holding a copy of the values.
  Tensor detach() const;

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  detail::Node& node() const;

  std::shared_ptr<detail::Node> node_;
  friend class GradTape;
};

/// Topologically ordered record of the differentiable ops reachable from a
/// loss. Producers always precede their consumers.
class GradTape {
 public:
  static GradTape record(const Tensor& loss);

  std::size_t size() const noexcept { return order_.size(); }
  /// Number of recorded entries that are ops (not leaves).
  std::size_t op_count() const noexcept;
  bool is_topological() const;
  void run_backward() const;

 private:
  std::vector<std::shared_ptr<detail::Node>> order_;
};

}  // namespace skim
