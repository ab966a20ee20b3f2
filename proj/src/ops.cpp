// SPDX-License-Identifier: Apache-2.0
#include "skim/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <numeric>

namespace skim {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap cmap(const double* p, std::size_t rows, std::size_t cols) {
  return ConstMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MutMap mmap(double* p, std::size_t rows, std::size_t cols) {
  return MutMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

/// out[i] = x[index[i]]; the gradient scatters back.
Tensor gather(const Tensor& x, Shape out_shape, std::vector<std::size_t> index) {
  const auto src = x.values();
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = src[index[i]];
  return Tensor::make_op(std::move(out_shape), std::move(out), {x},
                         [index = std::move(index)](std::span<const double> g, std::span<GradSlot> in) {
                           if (!in[0].active()) return;
                           auto gx = in[0].grad;
                           for (std::size_t i = 0; i < index.size(); ++i) gx[index[i]] += g[i];
                         });
}

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> strides(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) strides[i - 1] = strides[i] * s[i];
  return strides;
}

/// Flat source offset of every output element for `a` broadcast to `out`.
std::vector<std::size_t> broadcast_index(const Shape& a, const Shape& out) {
  const std::size_t r = out.size();
  const std::size_t pad = r - a.size();
  const auto a_strides = row_major_strides(a);
  std::vector<std::size_t> strides(r, 0);
  for (std::size_t i = 0; i < a.size(); ++i) strides[pad + i] = a[i] == 1 ? 0 : a_strides[i];
  const std::size_t n = numel(out);
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    index[i] = offset;
    for (std::size_t d = r; d-- > 0;) {
      if (++counter[d] < out[d]) {
        offset += strides[d];
        break;
      }
      offset -= strides[d] * (counter[d] - 1);
      counter[d] = 0;
    }
  }
  return index;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

}  // namespace

// ---------------------------------------------------------------------------
// matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + to_string(sa) + " and " + to_string(sb));
  }
  const std::size_t m = sa[sa.size() - 2], k = sa.back();
  const std::size_t k2 = sb[sb.size() - 2], n = sb.back();
  if (k != k2) throw ShapeError("matmul inner extents differ: " + to_string(sa) + " x " + to_string(sb));
  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);
  if (!batch_a.empty() && !batch_b.empty() && batch_a != batch_b) {
    throw ShapeError("matmul batch extents differ: " + to_string(sa) + " x " + to_string(sb));
  }
  const Shape& batch = batch_a.empty() ? batch_b : batch_a;
  const std::size_t nb = batch.empty() ? 1 : numel(batch);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);

  const bool a_batched = !batch_a.empty();
  const bool b_batched = !batch_b.empty();
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(nb * m * n);

  if (!b_batched) {
    // Rows of every batch of `a` share one right operand: a single product.
    const std::size_t rows = (a_batched ? nb : 1) * m;
    mmap(out.data(), rows, n).noalias() = cmap(av.data(), rows, k) * cmap(bv.data(), k, n);
  } else {
    for (std::size_t i = 0; i < nb; ++i) {
      const double* ap = av.data() + (a_batched ? i * m * k : 0);
      mmap(out.data() + i * m * n, m, n).noalias() = cmap(ap, m, k) * cmap(bv.data() + i * k * n, k, n);
    }
  }

  return Tensor::make_op(
      std::move(out_shape), std::move(out), {a, b},
      [a, b, m, k, n, nb, a_batched, b_batched](std::span<const double> g, std::span<GradSlot> in) {
        const auto av = a.values();
        const auto bv = b.values();
        if (!b_batched) {
          const std::size_t rows = (a_batched ? nb : 1) * m;
          const auto gm = cmap(g.data(), rows, n);
          if (in[0].active()) mmap(in[0].grad.data(), rows, k).noalias() += gm * cmap(bv.data(), k, n).transpose();
          if (in[1].active()) mmap(in[1].grad.data(), k, n).noalias() += cmap(av.data(), rows, k).transpose() * gm;
          return;
        }
        for (std::size_t i = 0; i < nb; ++i) {
          const std::size_t a_off = a_batched ? i * m * k : 0;
          const auto gm = cmap(g.data() + i * m * n, m, n);
          if (in[0].active()) {
            mmap(in[0].grad.data() + a_off, m, k).noalias() += gm * cmap(bv.data() + i * k * n, k, n).transpose();
          }
          if (in[1].active()) {
            mmap(in[1].grad.data() + i * k * n, k, n).noalias() += cmap(av.data() + a_off, m, k).transpose() * gm;
          }
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  Tensor y = matmul(x, w);
  return bias.defined() ? add(y, bias) : y;
}

// ---------------------------------------------------------------------------
// elementwise

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("shapes " + to_string(a) + " and " + to_string(b) + " are not broadcastable");
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

Tensor elementwise(const Tensor& a, const Tensor& b, BinaryKind kind) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  Shape out_shape = broadcast_shape(sa, sb);
  const std::size_t n = numel(out_shape);
  const auto av = a.values();
  const auto bv = b.values();
  const std::size_t na = av.size(), nbv = bv.size();

  // Index maps: modular when one operand is a trailing suffix of the output
  // (covers bias rows and scalars), explicit tables otherwise.
  const bool a_mod = is_suffix(sa, out_shape) || na == 1;
  const bool b_mod = is_suffix(sb, out_shape) || nbv == 1;
  auto a_index = a_mod ? std::vector<std::size_t>{} : broadcast_index(sa, out_shape);
  auto b_index = b_mod ? std::vector<std::size_t>{} : broadcast_index(sb, out_shape);
  auto ia = [a_mod, na, &a_index](std::size_t i) { return a_mod ? i % na : a_index[i]; };
  auto ib = [b_mod, nbv, &b_index](std::size_t i) { return b_mod ? i % nbv : b_index[i]; };

  std::vector<double> out(n);
  switch (kind) {
    case BinaryKind::add:
      if (na == n && nbv == n) {
        for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
      } else {
        for (std::size_t i = 0; i < n; ++i) out[i] = av[ia(i)] + bv[ib(i)];
      }
      break;
    case BinaryKind::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[ia(i)] - bv[ib(i)];
      break;
    case BinaryKind::mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[ia(i)] * bv[ib(i)];
      break;
  }

  return Tensor::make_op(
      std::move(out_shape), std::move(out), {a, b},
      [a, b, kind, n, na, nbv, a_mod, b_mod, a_index = std::move(a_index), b_index = std::move(b_index)](
          std::span<const double> g, std::span<GradSlot> in) {
        auto ia = [&](std::size_t i) { return a_mod ? i % na : a_index[i]; };
        auto ib = [&](std::size_t i) { return b_mod ? i % nbv : b_index[i]; };
        if (in[0].active()) {
          auto ga = in[0].grad;
          if (kind == BinaryKind::mul) {
            const auto bv = b.values();
            for (std::size_t i = 0; i < n; ++i) ga[ia(i)] += g[i] * bv[ib(i)];
          } else if (na == n) {
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
          } else {
            for (std::size_t i = 0; i < n; ++i) ga[ia(i)] += g[i];
          }
        }
        if (in[1].active()) {
          auto gb = in[1].grad;
          if (kind == BinaryKind::mul) {
            const auto av = a.values();
            for (std::size_t i = 0; i < n; ++i) gb[ib(i)] += g[i] * av[ia(i)];
          } else {
            const double sign = kind == BinaryKind::sub ? -1.0 : 1.0;
            for (std::size_t i = 0; i < n; ++i) gb[ib(i)] += sign * g[i];
          }
        }
      });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, BinaryKind::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, BinaryKind::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, BinaryKind::mul); }

Tensor scale(const Tensor& a, double factor) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * factor;
  return Tensor::make_op(a.shape(), std::move(out), {a}, [factor](std::span<const double> g, std::span<GradSlot> in) {
    if (!in[0].active()) return;
    for (std::size_t i = 0; i < g.size(); ++i) in[0].grad[i] += g[i] * factor;
  });
}

Tensor add_scalar(const Tensor& a, double offset) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + offset;
  return Tensor::make_op(a.shape(), std::move(out), {a}, [](std::span<const double> g, std::span<GradSlot> in) {
    if (!in[0].active()) return;
    for (std::size_t i = 0; i < g.size(); ++i) in[0].grad[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// activations

Tensor activation(const Tensor& x, Activation kind) {
  const auto xv = x.values();
  const std::size_t n = xv.size();
  std::vector<double> out(n);
  switch (kind) {
    case Activation::gelu:
      for (std::size_t i = 0; i < n; ++i) out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * std::numbers::sqrt2 / 2.0));
      return Tensor::make_op(x.shape(), std::move(out), {x}, [x](std::span<const double> g, std::span<GradSlot> in) {
        if (!in[0].active()) return;
        const auto xv = x.values();
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double v = xv[i];
          const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
          const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
          in[0].grad[i] += g[i] * (cdf + v * pdf);
        }
      });
    case Activation::sigmoid: {
      constexpr double lo = 0x1.0p-24;
      constexpr double hi = 1.0 - 0x1.0p-24;
      for (std::size_t i = 0; i < n; ++i) {
        const double v = xv[i];
        const double s = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        out[i] = std::clamp(s, lo, hi);
      }
      quantize(out);
      auto y = std::make_shared<std::vector<double>>(out);
      return Tensor::make_op(x.shape(), std::move(out), {x}, [y](std::span<const double> g, std::span<GradSlot> in) {
        if (!in[0].active()) return;
        const auto& yv = *y;
        for (std::size_t i = 0; i < g.size(); ++i) in[0].grad[i] += g[i] * yv[i] * (1.0 - yv[i]);
      });
    }
    case Activation::relu:
      for (std::size_t i = 0; i < n; ++i) out[i] = xv[i] > 0 ? xv[i] : 0.0;
      return Tensor::make_op(x.shape(), std::move(out), {x}, [x](std::span<const double> g, std::span<GradSlot> in) {
        if (!in[0].active()) return;
        const auto xv = x.values();
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (xv[i] > 0) in[0].grad[i] += g[i];
        }
      });
  }
  throw ContractError("unknown activation");
}

Tensor gelu(const Tensor& x) { return activation(x, Activation::gelu); }
Tensor sigmoid(const Tensor& x) { return activation(x, Activation::sigmoid); }
Tensor relu(const Tensor& x) { return activation(x, Activation::relu); }

// ---------------------------------------------------------------------------
// softmax / layer norm

Tensor softmax(const Tensor& x, int axis) {
  const Shape& s = x.shape();
  const std::size_t ax = normalize_axis(axis, s.size());
  const std::size_t len = s[ax];
  std::size_t inner = 1;
  for (std::size_t d = ax + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t outer = x.numel() / (len * inner);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = xv[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      const double inv = 1.0 / total;
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] *= inv;
    }
  }
  quantize(out);
  auto y = std::make_shared<std::vector<double>>(out);
  return Tensor::make_op(s, std::move(out), {x},
                         [y, outer, len, inner](std::span<const double> g, std::span<GradSlot> in_slots) {
                           if (!in_slots[0].active()) return;
                           const auto& yv = *y;
                           auto gx = in_slots[0].grad;
                           for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t in = 0; in < inner; ++in) {
                               const std::size_t base = o * len * inner + in;
                               double dot = 0.0;
                               for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * yv[base + j * inner];
                               for (std::size_t j = 0; j < len; ++j) {
                                 const std::size_t idx = base + j * inner;
                                 gx[idx] += yv[idx] * (g[idx] - dot);
                               }
                             }
                           }
                         });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.extent(-1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm affine parameters must have shape [" + std::to_string(d) + "]");
  }
  const std::size_t rows = x.numel() / d;
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return Tensor::make_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [xhat, inv_std, gamma, rows, d](std::span<const double> g, std::span<GradSlot> in) {
        const auto& h = *xhat;
        const auto gv = gamma.values();
        if (in[1].active() || in[2].active()) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
              const double gij = g[r * d + j];
              if (in[1].active()) in[1].grad[j] += gij * h[r * d + j];
              if (in[2].active()) in[2].grad[j] += gij;
            }
          }
        }
        if (!in[0].active()) return;
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = g[r * d + j] * gv[j];
            mean_dh += dh;
            mean_dh_h += dh * h[r * d + j];
          }
          mean_dh *= inv_d;
          mean_dh_h *= inv_d;
          const double is = (*inv_std)[r];
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = g[r * d + j] * gv[j];
            in[0].grad[r * d + j] += is * (dh - mean_dh - h[r * d + j] * mean_dh_h);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// rearrange

Tensor reshape(const Tensor& x, Shape shape) {
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("reshape target " + to_string(shape) + " has a zero extent");
  }
  if (numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  return Tensor::make_op(std::move(shape), x.to_vector(), {x}, [](std::span<const double> g, std::span<GradSlot> in) {
    if (!in[0].active()) return;
    for (std::size_t i = 0; i < g.size(); ++i) in[0].grad[i] += g[i];
  });
}

Tensor transpose(const Tensor& x, const std::vector<std::size_t>& perm) {
  const Shape& s = x.shape();
  const std::size_t r = s.size();
  if (perm.size() != r) throw ShapeError("transpose permutation rank mismatch for " + to_string(s));
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw ShapeError("invalid transpose permutation for " + to_string(s));
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[perm[i]];
  const auto in_strides = row_major_strides(s);
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) strides[i] = in_strides[perm[i]];
  const std::size_t n = x.numel();
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    index[i] = offset;
    for (std::size_t d = r; d-- > 0;) {
      if (++counter[d] < out_shape[d]) {
        offset += strides[d];
        break;
      }
      offset -= strides[d] * (counter[d] - 1);
      counter[d] = 0;
    }
  }
  return gather(x, std::move(out_shape), std::move(index));
}

Tensor space_to_depth(const Tensor& x, std::size_t f) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError("space_to_depth expects [C,H,W], got " + to_string(s));
  if (f == 0 || s[1] % f != 0 || s[2] % f != 0) {
    throw ShapeError("space_to_depth factor " + std::to_string(f) + " does not divide " + to_string(s));
  }
  const std::size_t c = s[0], h = s[1], w = s[2];
  const std::size_t oh = h / f, ow = w / f, oc = c * f * f;
  std::vector<std::size_t> index(x.numel());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t dy = 0; dy < f; ++dy)
      for (std::size_t dx = 0; dx < f; ++dx) {
        const std::size_t out_c = (ch * f + dy) * f + dx;
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j)
            index[(out_c * oh + i) * ow + j] = (ch * h + i * f + dy) * w + j * f + dx;
      }
  return gather(x, {oc, oh, ow}, std::move(index));
}

Tensor depth_to_space(const Tensor& x, std::size_t f) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError("depth_to_space expects [C,H,W], got " + to_string(s));
  if (f == 0 || s[0] % (f * f) != 0) {
    throw ShapeError("depth_to_space factor " + std::to_string(f) + " does not divide channels of " + to_string(s));
  }
  const std::size_t ic = s[0], h = s[1], w = s[2];
  const std::size_t c = ic / (f * f), oh = h * f, ow = w * f;
  std::vector<std::size_t> index(x.numel());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const std::size_t in_c = (ch * f + y % f) * f + xx % f;
        index[(ch * oh + y) * ow + xx] = (in_c * h + y / f) * w + xx / f;
      }
  return gather(x, {c, oh, ow}, std::move(index));
}

Tensor rearrange(const Tensor& x, const RearrangeSpec& spec) {
  return std::visit(
      [&x](const auto& op) -> Tensor {
        using T = std::decay_t<decltype(op)>;
        if constexpr (std::is_same_v<T, Reshape>) {
          return reshape(x, op.shape);
        } else if constexpr (std::is_same_v<T, Transpose>) {
          return transpose(x, op.perm);
        } else if constexpr (std::is_same_v<T, SpaceToDepth>) {
          return space_to_depth(x, op.factor);
        } else {
          return depth_to_space(x, op.factor);
        }
      },
      spec);
}

// ---------------------------------------------------------------------------
// resize

namespace {

struct Tap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t factor) {
  std::vector<Tap> taps(in * factor);
  for (std::size_t d = 0; d < taps.size(); ++d) {
    double src = (static_cast<double>(d) + 0.5) / static_cast<double>(factor) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[d] = Tap{i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

Tensor resize(const Tensor& x, std::size_t factor, ResizeMode mode) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError("resize expects [C,H,W], got " + to_string(s));
  if (factor == 0) throw ShapeError("resize factor must be >= 1");
  const std::size_t c = s[0], h = s[1], w = s[2];
  const std::size_t oh = h * factor, ow = w * factor;
  if (mode == ResizeMode::nearest) {
    std::vector<std::size_t> index(c * oh * ow);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) index[(ch * oh + y) * ow + xx] = (ch * h + y / factor) * w + xx / factor;
    return gather(x, {c, oh, ow}, std::move(index));
  }
  auto ty = bilinear_taps(h, factor);
  auto tx = bilinear_taps(w, factor);
  const auto xv = x.values();
  std::vector<double> out(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = xv.data() + ch * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      const Tap& a = ty[y];
      const double* r0 = plane + a.i0 * w;
      const double* r1 = plane + a.i1 * w;
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const Tap& b = tx[xx];
        const double top = r0[b.i0] * (1.0 - b.w1) + r0[b.i1] * b.w1;
        const double bot = r1[b.i0] * (1.0 - b.w1) + r1[b.i1] * b.w1;
        out[(ch * oh + y) * ow + xx] = top * (1.0 - a.w1) + bot * a.w1;
      }
    }
  }
  return Tensor::make_op({c, oh, ow}, std::move(out), {x},
                         [ty = std::move(ty), tx = std::move(tx), c, h, w, oh, ow](std::span<const double> g,
                                                                                     std::span<GradSlot> in) {
                           if (!in[0].active()) return;
                           for (std::size_t ch = 0; ch < c; ++ch) {
                             double* plane = in[0].grad.data() + ch * h * w;
                             for (std::size_t y = 0; y < oh; ++y) {
                               const Tap& a = ty[y];
                               double* r0 = plane + a.i0 * w;
                               double* r1 = plane + a.i1 * w;
                               for (std::size_t xx = 0; xx < ow; ++xx) {
                                 const Tap& b = tx[xx];
                                 const double gv = g[(ch * oh + y) * ow + xx];
                                 const double gt = gv * (1.0 - a.w1);
                                 const double gb = gv * a.w1;
                                 r0[b.i0] += gt * (1.0 - b.w1);
                                 r0[b.i1] += gt * b.w1;
                                 r1[b.i0] += gb * (1.0 - b.w1);
                                 r1[b.i1] += gb * b.w1;
                               }
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& x) {
  const auto xv = x.values();
  const double total = std::accumulate(xv.begin(), xv.end(), 0.0);
  return Tensor::make_op({1}, {total}, {x}, [](std::span<const double> g, std::span<GradSlot> in) {
    if (!in[0].active()) return;
    for (double& v : in[0].grad) v += g[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------------------
// finite differences

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor leaf = Tensor::from_values(x.shape(), x.to_vector());
  leaf.set_requires_grad(true);
  return finite_diff_check([&] { return f(leaf); }, leaf, eps);
}

double finite_diff_check(const std::function<Tensor()>& f, Tensor& leaf, double eps, std::size_t max_coords) {
  if (precision() != Precision::f64) throw ContractError("finite_diff_check must run in 64-bit mode");
  if (!leaf.is_leaf() || !leaf.requires_grad()) throw ContractError("finite_diff_check needs a requires_grad leaf");
  leaf.zero_grad();
  const Tensor y0 = f();
  if (y0.numel() != 1) throw ContractError("finite_diff_check needs a scalar-valued function");
  const Tensor y1 = f();
  if (std::bit_cast<std::uint64_t>(y0.item()) != std::bit_cast<std::uint64_t>(y1.item())) {
    throw ContractError("finite_diff_check: function is not deterministic");
  }
  y0.backward();
  const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
  leaf.zero_grad();

  const std::size_t n = leaf.numel();
  const std::size_t stride = (max_coords == 0 || max_coords >= n) ? 1 : n / max_coords;
  auto data = leaf.mutable_values();
  double worst = 0.0;
  for (std::size_t i = 0; i < n; i += stride) {
    const double saved = data[i];
    data[i] = saved + eps;
    const double fp = f().item();
    data[i] = saved - eps;
    const double fm = f().item();
    data[i] = saved;
    const double numeric = (fp - fm) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace skim
