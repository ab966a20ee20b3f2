// SPDX-License-Identifier: Apache-2.0
#include "skim/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "skim/random.hpp"

namespace skim {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn grad_fn;

  bool is_leaf() const noexcept { return !grad_fn; }
};

}  // namespace detail

namespace {

thread_local Precision g_precision = Precision::f32;
thread_local bool g_grad_enabled = true;

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
}

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<double> data) {
  check_shape(shape);
  if (numel(shape) != data.size()) {
    throw ShapeError("value count " + std::to_string(data.size()) + " does not match shape " + to_string(shape));
  }
  quantize(data);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  return node;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

Precision precision() noexcept { return g_precision; }
void set_precision(Precision p) noexcept { g_precision = p; }

double quantize(double v) noexcept {
  return g_precision == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

void quantize(std::span<double> values) noexcept {
  if (g_precision != Precision::f32) return;
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

PrecisionScope::PrecisionScope(Precision p) noexcept : saved_(g_precision) { g_precision = p; }
PrecisionScope::~PrecisionScope() { g_precision = saved_; }

NoGradScope::NoGradScope() noexcept : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradScope::~NoGradScope() { g_grad_enabled = saved_; }
bool grad_enabled() noexcept { return g_grad_enabled; }

// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return constant(std::move(shape), 0.0); }

Tensor Tensor::constant(Shape shape, double value) {
  check_shape(shape);
  const std::size_t n = skim::numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::gaussian(Shape shape, double mean, double stddev, std::uint64_t seed) {
  check_shape(shape);
  if (!(stddev >= 0.0)) throw ContractError("gaussian stddev must be non-negative");
  Rng rng(seed);
  std::vector<double> data(skim::numel(shape));
  for (double& v : data) v = rng.normal(mean, stddev);
  return Tensor(make_leaf(std::move(shape), std::move(data)));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values) {
  return Tensor(make_leaf(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(double value) { return from_values({1}, {value}); }

Tensor Tensor::make_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs, BackwardFn grad_fn) {
  check_shape(shape);
  if (skim::numel(shape) != values.size()) {
    throw ShapeError("op produced " + std::to_string(values.size()) + " values for shape " + to_string(shape));
  }
  bool finite = true;
  if (g_precision == Precision::f32) {
    for (double& v : values) {
      v = static_cast<double>(static_cast<float>(v));
      finite &= std::isfinite(v);
    }
  } else {
    for (double v : values) finite &= std::isfinite(v);
  }
  if (!finite) throw NumericError("non-finite value produced by op with shape " + to_string(shape));
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  const bool any = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (any) {
    node->requires_grad = true;
    node->grad_fn = std::move(grad_fn);
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node_);
  }
  return Tensor(std::move(node));
}

detail::Node& Tensor::node() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return node().shape; }
std::size_t Tensor::numel() const { return node().data.size(); }

std::size_t Tensor::extent(int axis) const {
  const auto& s = shape();
  const int r = static_cast<int>(s.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
  return s[static_cast<std::size_t>(a)];
}

std::span<const double> Tensor::values() const { return node().data; }

std::span<double> Tensor::mutable_values() {
  if (!node().is_leaf()) throw ContractError("only leaf tensors may be mutated in place");
  return node().data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() requires a single-element tensor, got " + to_string(shape()));
  return node().data[0];
}

std::vector<double> Tensor::to_vector() const { return node().data; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node().is_leaf()) throw ContractError("requires_grad can only be set on leaf tensors");
  node_->requires_grad = on;
  if (!on) node_->grad.clear();
  return *this;
}

bool Tensor::is_leaf() const { return node().is_leaf(); }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node().grad; }

std::span<double> Tensor::mutable_grad() {
  auto& n = node();
  if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
  return n.grad;
}

void Tensor::zero_grad() {
  auto& n = node();
  std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from_values(shape(), node().data); }

void Tensor::backward() const {
  if (numel() != 1) throw ContractError("backward() needs a single-element loss, got shape " + to_string(shape()));
  if (!requires_grad()) throw ContractError("backward() on a tensor that does not depend on any trainable input");
  GradTape::record(*this).run_backward();
}

// ---------------------------------------------------------------------------

GradTape GradTape::record(const Tensor& loss) {
  GradTape tape;
  auto root = loss.node_;
  if (!root || !root->requires_grad) return tape;

  std::unordered_set<const detail::Node*> visited;
  // Iterative post-order DFS: (node, next input index).
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  std::unordered_map<const detail::Node*, std::shared_ptr<detail::Node>> owners;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  owners.emplace(root.get(), root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const auto& child = node->inputs[next++];
      if (child->requires_grad && visited.insert(child.get()).second) {
        owners.emplace(child.get(), child);
        stack.emplace_back(child.get(), 0);
      }
      continue;
    }
    tape.order_.push_back(owners.at(node));
    stack.pop_back();
  }
  return tape;
}

std::size_t GradTape::op_count() const noexcept {
  return static_cast<std::size_t>(
      std::count_if(order_.begin(), order_.end(), [](const auto& n) { return !n->is_leaf(); }));
}

bool GradTape::is_topological() const {
  std::unordered_map<const detail::Node*, std::size_t> position;
  for (std::size_t i = 0; i < order_.size(); ++i) position[order_[i].get()] = i;
  for (std::size_t i = 0; i < order_.size(); ++i) {
    for (const auto& in : order_[i]->inputs) {
      if (!in->requires_grad) continue;
      auto it = position.find(in.get());
      if (it == position.end() || it->second >= i) return false;
    }
  }
  return true;
}

void GradTape::run_backward() const {
  if (order_.empty()) return;
  // Non-leaf buffers are allocated (zeroed) on first use below.
  for (const auto& n : order_) {
    if (!n->is_leaf()) n->grad.clear();
  }
  auto& root = *order_.back();
  if (root.grad.empty()) root.grad.assign(root.data.size(), 0.0);
  root.grad[0] += 1.0;

  std::vector<GradSlot> slots;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    detail::Node& n = **it;
    if (n.is_leaf()) continue;
    slots.assign(n.inputs.size(), GradSlot{});
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      auto& in = *n.inputs[i];
      if (!in.requires_grad) continue;
      if (in.grad.empty()) in.grad.assign(in.data.size(), 0.0);
      slots[i].grad = in.grad;
    }
    n.grad_fn(n.grad, slots);
    if (&n != &root) {
      n.grad.clear();
      n.grad.shrink_to_fit();
    }
  }
  if (!root.is_leaf()) {
    root.grad.clear();
    root.grad.shrink_to_fit();
  }
}

}  // namespace skim
