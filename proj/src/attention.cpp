// SPDX-License-Identifier: Apache-2.0
#include "skim/attention.hpp"

#include <cmath>

#include "skim/ops.hpp"

namespace skim {

namespace {

constexpr double kBypassInitStd = 0.02;

Tensor init_weight(std::size_t in, std::size_t out, Rng& rng) {
  return Tensor::gaussian({in, out}, 0.0, 1.0 / std::sqrt(static_cast<double>(in)), rng.next_u64());
}

}  // namespace

Linear Linear::create(std::size_t in, std::size_t out, Rng& rng) {
  return Linear{init_weight(in, out, rng), Tensor::zeros({out})};
}

Tensor Linear::operator()(const Tensor& x) const { return linear(x, weight, bias); }

BypassLinear BypassLinear::create(std::size_t in, std::size_t out, std::size_t rank, bool with_bypass, Rng& rng) {
  BypassLinear p;
  p.weight = init_weight(in, out, rng);
  p.bias = Tensor::zeros({out});
  if (with_bypass) p.attach_bypass(rank, rng);
  return p;
}

void BypassLinear::attach_bypass(std::size_t rank, Rng& rng) {
  if (rank == 0) throw ShapeError("bypass rank must be positive");
  down = Tensor::gaussian({in_features(), rank}, 0.0, kBypassInitStd, rng.next_u64());
  up = Tensor::zeros({rank, out_features()});
  enabled = true;
}

void BypassLinear::validate() const {
  if (weight.rank() != 2) throw ShapeError("projection weight must be a matrix, got " + to_string(weight.shape()));
  if (bias.defined() && bias.shape() != Shape{out_features()}) {
    throw ShapeError("projection bias shape " + to_string(bias.shape()) + " does not match weight");
  }
  if (!enabled) return;
  if (!down.defined() || !up.defined()) throw ShapeError("enabled bypass is missing its low-rank factors");
  if (down.rank() != 2 || up.rank() != 2) throw ShapeError("bypass factors must be matrices");
  if (down.extent(0) != in_features() || up.extent(1) != out_features() || down.extent(1) != up.extent(0)) {
    throw ShapeError("bypass factors " + to_string(down.shape()) + " x " + to_string(up.shape()) +
                     " do not fit weight " + to_string(weight.shape()));
  }
}

Tensor bypass_linear_forward(const Tensor& x, const BypassLinear& p) {
  if (x.extent(-1) != p.in_features()) {
    throw ShapeError("input " + to_string(x.shape()) + " does not match projection input " +
                     std::to_string(p.in_features()));
  }
  Tensor base = linear(x, p.weight, p.bias);
  if (!p.enabled) return base;
  return add(base, matmul(matmul(x, p.down), p.up));
}

AttentionParams AttentionParams::create(std::size_t dim, std::size_t heads, std::size_t rank, bool with_bypass,
                                        std::optional<std::size_t> window, Rng& rng) {
  AttentionParams p;
  p.heads = heads;
  // Base weights are drawn before any bypass factor so that models with and
  // without bypasses share identical base weights for the same seed.
  p.q = BypassLinear::create(dim, dim, rank, false, rng);
  p.k = BypassLinear::create(dim, dim, rank, false, rng);
  p.v = BypassLinear::create(dim, dim, rank, false, rng);
  p.out = Linear::create(dim, dim, rng);
  if (with_bypass) {
    p.q.attach_bypass(rank, rng);
    p.v.attach_bypass(rank, rng);
  }
  p.window = window;
  p.validate();
  return p;
}

void AttentionParams::validate() const {
  q.validate();
  k.validate();
  v.validate();
  if (k.enabled) throw ShapeError("the key projection must not carry a bypass");
  if (heads == 0 || dim() % heads != 0) {
    throw ShapeError("embedding width " + std::to_string(dim()) + " is not divisible by " + std::to_string(heads) +
                     " heads");
  }
  if (k.out_features() != dim() || v.out_features() != dim()) throw ShapeError("q/k/v widths differ");
  if (window && *window == 0) throw ShapeError("attention window must be positive");
}

Tensor window_partition(const Tensor& x, std::size_t window) {
  if (x.rank() != 3) throw ShapeError("window_partition expects [h,w,d], got " + to_string(x.shape()));
  const std::size_t h = x.extent(0), w = x.extent(1), d = x.extent(2);
  if (window == 0 || h % window != 0 || w % window != 0) {
    throw ShapeError("window " + std::to_string(window) + " does not divide grid " + to_string(x.shape()));
  }
  Tensor t = reshape(x, {h / window, window, w / window, window, d});
  t = transpose(t, {0, 2, 1, 3, 4});
  return reshape(t, {(h / window) * (w / window), window * window, d});
}

Tensor window_merge(const Tensor& tiles, std::size_t height, std::size_t width, std::size_t window) {
  if (window == 0 || height % window != 0 || width % window != 0) {
    throw ShapeError("window " + std::to_string(window) + " does not divide grid " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  const std::size_t d = tiles.extent(-1);
  Tensor t = reshape(tiles, {height / window, width / window, window, window, d});
  t = transpose(t, {0, 2, 1, 3, 4});
  return reshape(t, {height, width, d});
}

Tensor multi_head_attention(const Tensor& queries, const Tensor& context, const AttentionParams& p) {
  if (queries.rank() != 3 || context.rank() != 3) {
    throw ShapeError("multi_head_attention expects [B,T,d] operands");
  }
  const std::size_t batch = queries.extent(0);
  const std::size_t tq = queries.extent(1);
  const std::size_t tk = context.extent(1);
  const std::size_t heads = p.heads;
  const std::size_t dk = p.head_dim();
  if (context.extent(0) != batch) throw ShapeError("query and context batch extents differ");

  Tensor q = reshape(bypass_linear_forward(queries, p.q), {batch, tq, heads, dk});
  Tensor k = reshape(bypass_linear_forward(context, p.k), {batch, tk, heads, dk});
  Tensor v = reshape(bypass_linear_forward(context, p.v), {batch, tk, heads, dk});
  q = transpose(q, {0, 2, 1, 3});     // [B, H, Tq, dk]
  k = transpose(k, {0, 2, 3, 1});     // [B, H, dk, Tk]
  v = transpose(v, {0, 2, 1, 3});     // [B, H, Tk, dk]
  Tensor scores = scale(matmul(q, k), 1.0 / std::sqrt(static_cast<double>(dk)));
  Tensor weights = softmax(scores, -1);
  Tensor mixed = transpose(matmul(weights, v), {0, 2, 1, 3});  // [B, Tq, H, dk]
  return p.out(reshape(mixed, {batch, tq, heads * dk}));
}

Tensor attention_forward(const Tensor& x, const AttentionParams& p) {
  const std::size_t d = x.extent(-1);
  if (d != p.dim()) {
    throw ShapeError("input width " + std::to_string(d) + " does not match attention width " + std::to_string(p.dim()));
  }
  if (x.rank() == 2) {
    Tensor tokens = reshape(x, {1, x.extent(0), d});
    return reshape(multi_head_attention(tokens, tokens, p), x.shape());
  }
  if (x.rank() != 3) throw ShapeError("attention_forward expects [T,d] or [h,w,d], got " + to_string(x.shape()));
  const std::size_t h = x.extent(0), w = x.extent(1);
  if (!p.window) {
    Tensor tokens = reshape(x, {1, h * w, d});
    return reshape(multi_head_attention(tokens, tokens, p), x.shape());
  }
  Tensor tiles = window_partition(x, *p.window);
  return window_merge(multi_head_attention(tiles, tiles, p), h, w, *p.window);
}

}  // namespace skim
