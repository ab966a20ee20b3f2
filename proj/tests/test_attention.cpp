// SPDX-License-Identifier: Apache-2.0
#include <Eigen/SVD>
#include <bit>
#include <cmath>
#include <cstring>

#include "doctest.h"
#include "skim/attention.hpp"
#include "skim/ops.hpp"

using namespace skim;

namespace {

bool bits_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a.value(i) - b.value(i)));
  return worst;
}

Tensor eye(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor::from_values({n, n}, v);
}

/// Explicit-loop reference for multi-head self-attention over [T, d].
std::vector<double> attention_oracle(const Tensor& x, const AttentionParams& p) {
  const std::size_t t = x.extent(0), d = x.extent(1), heads = p.heads, dk = d / heads;
  auto project = [&](const BypassLinear& lin) {
    std::vector<double> y(t * d, 0.0);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t o = 0; o < d; ++o) {
        double acc = lin.bias.value(o);
        for (std::size_t c = 0; c < d; ++c) {
          double w = lin.weight.value(c * d + o);
          if (lin.enabled) {
            for (std::size_t r = 0; r < lin.rank(); ++r) w += lin.down.value(c * lin.rank() + r) * lin.up.value(r * d + o);
          }
          acc += x.value(i * d + c) * w;
        }
        y[i * d + o] = acc;
      }
    return y;
  };
  const auto q = project(p.q), k = project(p.k), v = project(p.v);
  std::vector<double> mixed(t * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < t; ++i) {
      std::vector<double> s(t);
      double mx = -1e300;
      for (std::size_t j = 0; j < t; ++j) {
        double acc = 0;
        for (std::size_t c = 0; c < dk; ++c) acc += q[i * d + h * dk + c] * k[j * d + h * dk + c];
        s[j] = acc / std::sqrt(static_cast<double>(dk));
        mx = std::max(mx, s[j]);
      }
      double total = 0;
      for (double& e : s) total += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < t; ++j)
        for (std::size_t c = 0; c < dk; ++c) mixed[i * d + h * dk + c] += s[j] / total * v[j * d + h * dk + c];
    }
  std::vector<double> out(t * d, 0.0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t o = 0; o < d; ++o) {
      double acc = p.out.bias.value(o);
      for (std::size_t c = 0; c < d; ++c) acc += mixed[i * d + c] * p.out.weight.value(c * d + o);
      out[i * d + o] = acc;
    }
  return out;
}

void randomize_bypass(BypassLinear& lin, std::uint64_t seed) {
  lin.up = Tensor::gaussian(lin.up.shape(), 0.0, 0.5, seed);
  lin.down = Tensor::gaussian(lin.down.shape(), 0.0, 0.5, seed + 1);
}

}  // namespace

TEST_CASE("bypass linear examples") {
  Rng rng(1);
  BypassLinear p = BypassLinear::create(2, 2, 1, true, rng);
  p.weight = eye(2);
  p.bias = Tensor::zeros({2});
  auto x = Tensor::gaussian({3, 2}, 0, 1, 5);
  CHECK(bits_equal(bypass_linear_forward(x, p), x));

  p.down = Tensor::from_values({2, 1}, {1, 0});
  p.up = Tensor::from_values({1, 2}, {0, 1});
  CHECK(bypass_linear_forward(Tensor::from_values({1, 2}, {1, 0}), p).to_vector() == std::vector<double>{1, 1});

  CHECK_THROWS_AS(bypass_linear_forward(Tensor::zeros({1, 3}), p), ShapeError);
}

TEST_CASE("bypass equals compose-then-multiply") {
  PrecisionScope scope(Precision::f64);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    BypassLinear p = BypassLinear::create(6, 5, 2, true, rng);
    randomize_bypass(p, seed + 10);
    p.bias = Tensor::gaussian({5}, 0, 1, seed + 20);
    auto x = Tensor::gaussian({4, 6}, 0, 1, seed + 30);
    auto composed = add(matmul(x, add(p.weight, matmul(p.down, p.up))), p.bias);
    CHECK(max_abs_diff(bypass_linear_forward(x, p), composed) < 1e-6);
  }
}

TEST_CASE("zero bypass is bit-equal to the base projection") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    BypassLinear p = BypassLinear::create(8, 8, 4, true, rng);
    p.bias = Tensor::gaussian({8}, 0, 1, seed + 7);
    p.down = Tensor::gaussian(p.down.shape(), 0, 3.0, seed + 9);
    BypassLinear base = p;
    base.enabled = false;
    auto x = Tensor::gaussian({5, 8}, 0, 1, seed + 11);
    CHECK(bits_equal(bypass_linear_forward(x, p), bypass_linear_forward(x, base)));
  }
}

TEST_CASE("bypass rank bound") {
  Rng rng(3);
  const std::size_t in = 12, out = 10, r = 3;
  BypassLinear p = BypassLinear::create(in, out, r, true, rng);
  randomize_bypass(p, 4);
  CHECK(r < std::min(in, out));
  auto delta = matmul(p.down, p.up);
  Eigen::MatrixXd m(in, out);
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < out; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = delta.value(i * out + j);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  svd.setThreshold(1e-6);
  CHECK(svd.rank() <= static_cast<Eigen::Index>(r));
}

TEST_CASE("frozen base weight gets no gradient, bypass factors do") {
  Rng rng(2);
  BypassLinear p = BypassLinear::create(4, 4, 2, true, rng);
  p.down.set_requires_grad(true);
  p.up.set_requires_grad(true);
  auto x = Tensor::gaussian({3, 4}, 0, 1, 1);
  sum(bypass_linear_forward(x, p)).backward();
  CHECK_FALSE(p.weight.has_grad());
  CHECK(p.up.has_grad());
  CHECK(p.down.has_grad());
}

TEST_CASE("attention parameter invariants") {
  Rng rng(1);
  auto p = AttentionParams::create(8, 2, 4, true, std::nullopt, rng);
  CHECK_FALSE(p.k.enabled);
  CHECK_FALSE(p.k.down.defined());
  CHECK(p.q.enabled);
  CHECK(p.v.enabled);
  CHECK(p.heads * p.head_dim() == p.dim());
  CHECK_THROWS_AS(AttentionParams::create(8, 3, 4, true, std::nullopt, rng), ShapeError);
}

TEST_CASE("single token attention collapses to the output of the value path") {
  Rng rng(4);
  auto p = AttentionParams::create(6, 2, 2, true, std::nullopt, rng);
  randomize_bypass(p.v, 3);
  auto x = Tensor::gaussian({1, 6}, 0, 1, 9);
  PrecisionScope scope(Precision::f64);
  auto expected = p.out(bypass_linear_forward(x, p.v));
  CHECK(max_abs_diff(attention_forward(x, p), expected) < 1e-12);
}

TEST_CASE("identical tokens give identical outputs") {
  Rng rng(5);
  auto p = AttentionParams::create(4, 2, 2, true, std::nullopt, rng);
  auto row = Tensor::gaussian({4}, 0, 1, 3).to_vector();
  std::vector<double> both = row;
  both.insert(both.end(), row.begin(), row.end());
  auto y = attention_forward(Tensor::from_values({2, 4}, both), p);
  for (std::size_t c = 0; c < 4; ++c) CHECK(y.value(c) == y.value(4 + c));
}

TEST_CASE("attention matches explicit loop oracle") {
  PrecisionScope scope(Precision::f64);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    // 3 tokens, two heads of width 2.
    auto p = AttentionParams::create(4, 2, 2, true, std::nullopt, rng);
    randomize_bypass(p.q, seed + 1);
    randomize_bypass(p.v, seed + 2);
    p.q.bias = Tensor::gaussian({4}, 0, 1, seed + 3);
    p.out.bias = Tensor::gaussian({4}, 0, 1, seed + 4);
    auto x = Tensor::gaussian({3, 4}, 0, 1, seed + 5);
    auto y = attention_forward(x, p);
    auto oracle = attention_oracle(x, p);
    for (std::size_t i = 0; i < oracle.size(); ++i) CHECK(std::abs(y.value(i) - oracle[i]) < 1e-10);
  }
}

TEST_CASE("attention is invariant to a constant score shift") {
  PrecisionScope scope(Precision::f64);
  Rng rng(6);
  auto p = AttentionParams::create(4, 1, 2, true, std::nullopt, rng);
  auto x = Tensor::gaussian({5, 4}, 0, 1, 8);
  auto y = attention_forward(x, p);
  // A key bias u adds q_i . u to every score of query row i.
  auto shifted = p;
  shifted.k.bias = Tensor::gaussian({4}, 0, 2.0, 17);
  CHECK(max_abs_diff(attention_forward(x, shifted), y) < 1e-9);
}

TEST_CASE("window partition and merge") {
  auto x = Tensor::gaussian({4, 4, 3}, 0, 1, 1);
  auto single = window_partition(x, 4);
  CHECK(single.shape() == Shape{1, 16, 3});
  CHECK(std::memcmp(single.values().data(), x.values().data(), x.numel() * sizeof(double)) == 0);

  auto tiles = window_partition(x, 2);
  CHECK(tiles.shape() == Shape{4, 4, 3});
  // Tile 1 is the top-right 2x2 block; its second token is grid cell (0, 3).
  CHECK(tiles.value((1 * 4 + 1) * 3 + 2) == x.value((0 * 4 + 3) * 3 + 2));
  CHECK(bits_equal(window_merge(tiles, 4, 4, 2), x));
  CHECK_THROWS_AS(window_partition(Tensor::zeros({6, 4, 3}), 4), ShapeError);
}

TEST_CASE("windowed attention over the whole grid equals global attention") {
  Rng rng(7);
  auto global = AttentionParams::create(8, 2, 2, true, std::nullopt, rng);
  randomize_bypass(global.q, 1);
  auto windowed = global;
  windowed.window = 4;
  auto x = Tensor::gaussian({4, 4, 8}, 0, 1, 3);
  CHECK(bits_equal(attention_forward(x, global), attention_forward(x, windowed)));

  auto small = global;
  small.window = 2;
  auto y = attention_forward(x, small);
  CHECK(y.shape() == x.shape());
  CHECK(max_abs_diff(y, attention_forward(x, global)) > 1e-6);
  small.window = 3;
  CHECK_THROWS_AS(attention_forward(x, small), ShapeError);
}

TEST_CASE("attention gradients reach only query and value bypasses") {
  Rng rng(8);
  auto p = AttentionParams::create(4, 2, 2, true, 2, rng);
  for (BypassLinear* lin : {&p.q, &p.v}) {
    lin->down.set_requires_grad(true);
    lin->up.set_requires_grad(true);
  }
  p.k.weight.set_requires_grad(true);
  auto x = Tensor::gaussian({2, 2, 4}, 0, 1, 2);
  sum(mul(attention_forward(x, p), Tensor::gaussian({2, 2, 4}, 0, 1, 5))).backward();
  CHECK(p.q.up.has_grad());
  CHECK(p.v.up.has_grad());
  CHECK_FALSE(p.k.down.defined());
  CHECK(p.k.weight.has_grad());
  CHECK_FALSE(p.out.weight.has_grad());
}

TEST_CASE("attention gradient check") {
  PrecisionScope scope(Precision::f64);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    auto p = AttentionParams::create(4, 2, 2, true, 2, rng);
    randomize_bypass(p.q, seed + 1);
    randomize_bypass(p.v, seed + 2);
    auto wts = Tensor::gaussian({4, 4, 4}, 0, 1, seed + 3);
    auto f = [&] { return sum(mul(attention_forward(wts, p), wts)); };
    p.q.down.set_requires_grad(true);
    CHECK(finite_diff_check(f, p.q.down) < 1e-6);
    p.v.up.set_requires_grad(true);
    CHECK(finite_diff_check(f, p.v.up) < 1e-6);
    CHECK(finite_diff_check([&](const Tensor& t) { return sum(mul(attention_forward(t, p), wts)); }, wts) < 1e-6);
  }
}
