// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

// Elementary kernels. Every kernel is a pure function of its arguments and
// rejects non-finite results with NumericError.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "stochbp/errors.hpp"
#include "stochbp/tensor.hpp"

namespace stochbp::kernels {

/// Logit written into causally masked attention entries. Finite so the
/// no-NaN/Inf contract holds; exp() of it underflows to exactly zero.
inline constexpr double kMaskedLogit = -1e30;

namespace detail {

inline Tensor checked(Tensor t, const char* kernel) {
  if (!t.all_finite()) throw NumericError(std::string(kernel) + ": non-finite output");
  return t;
}

inline void require_matrix(const Tensor& t, const char* kernel) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(kernel) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* kernel) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(kernel) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------- matrix products

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor out(Shape{m, p});
  auto o = out.data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = ad[i * k + kk];
      const double* brow = bd.data() + kk * p;
      double* orow = o.data() + i * p;
      for (std::size_t j = 0; j < p; ++j) orow[j] += av * brow[j];
    }
  }
  return detail::checked(std::move(out), "matmul");
}

/// a^T b for a [k x m], b [k x p].
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul_tn");
  detail::require_matrix(b, "matmul_tn");
  const std::size_t k = a.dim(0), m = a.dim(1), p = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul_tn: " + shape_str(a.shape()) + "^T x " + shape_str(b.shape()));
  }
  Tensor out(Shape{m, p});
  auto o = out.data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t kk = 0; kk < k; ++kk) {
    const double* brow = bd.data() + kk * p;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ad[kk * m + i];
      double* orow = o.data() + i * p;
      for (std::size_t j = 0; j < p; ++j) orow[j] += av * brow[j];
    }
  }
  return detail::checked(std::move(out), "matmul_tn");
}

/// a b^T for a [m x k], b [p x k].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  Tensor out(Shape{m, p});
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = ad.data() + i * k;
    for (std::size_t j = 0; j < p; ++j) {
      const double* brow = bd.data() + j * k;
      double s = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
      out(i, j) = s;
    }
  }
  return detail::checked(std::move(out), "matmul_nt");
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  Tensor out(Shape{a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) out(j, i) = a(i, j);
  return out;
}

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
  return detail::checked(std::move(out), "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
  return detail::checked(std::move(out), "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
  return detail::checked(std::move(out), "mul");
}

inline Tensor scale(const Tensor& a, double alpha) {
  Tensor out = a;
  for (double& v : out.data()) v *= alpha;
  return detail::checked(std::move(out), "scale");
}

/// x [rows x c] + bias [c] broadcast over rows.
inline Tensor add_row_vector(const Tensor& x, const Tensor& bias) {
  if (bias.numel() != x.cols()) {
    throw DimensionError("add_row_vector: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  Tensor out = x;
  const std::size_t c = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] += bias[j];
  return detail::checked(std::move(out), "add_row_vector");
}

/// Column sums of a [rows x c] view.
inline Tensor sum_rows(const Tensor& x) {
  Tensor out(Shape{x.cols()});
  const std::size_t c = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t j = 0; j < c; ++j) out[j] += x[r * c + j];
  return out;
}

inline double sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return s;
}

inline Tensor relu(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

inline Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  detail::require_same_shape(x, dy, "relu_backward");
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.numel(); ++i)
    if (x[i] <= 0.0) dx[i] = 0.0;
  return dx;
}

/// Exact GELU: x * Phi(x) with Phi the standard normal CDF (erf form).
inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

inline Tensor gelu(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data()) v = gelu_scalar(v);
  return detail::checked(std::move(out), "gelu");
}

inline Tensor gelu_backward(const Tensor& x, const Tensor& dy) {
  detail::require_same_shape(x, dy, "gelu_backward");
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] *= gelu_derivative(x[i]);
  return detail::checked(std::move(dx), "gelu_backward");
}

// ---------------------------------------------------------------- row-wise

/// Numerically stable softmax over the last axis.
inline Tensor softmax_rows(const Tensor& x) {
  Tensor out = x;
  const std::size_t c = x.rank() == 0 ? 1 : x.shape().back();
  if (c == 0) return out;
  auto data = out.data();
  for (std::size_t off = 0; off < data.size(); off += c) {
    auto row = data.subspan(off, c);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : row) v /= z;
  }
  return detail::checked(std::move(out), "softmax_rows");
}

/// Given probabilities p and upstream dp: dx = p * (dp - <dp, p>) along the last axis.
inline Tensor softmax_rows_backward(const Tensor& p, const Tensor& dp) {
  detail::require_same_shape(p, dp, "softmax_rows_backward");
  Tensor dx(p.shape());
  const std::size_t c = p.rank() == 0 ? 1 : p.shape().back();
  if (c == 0) return dx;
  const auto pd = p.data();
  const auto gd = dp.data();
  auto od = dx.data();
  for (std::size_t off = 0; off < pd.size(); off += c) {
    double dot = 0.0;
    for (std::size_t j = 0; j < c; ++j) dot += pd[off + j] * gd[off + j];
    for (std::size_t j = 0; j < c; ++j) od[off + j] = pd[off + j] * (gd[off + j] - dot);
  }
  return detail::checked(std::move(dx), "softmax_rows_backward");
}

struct LayerNormGrads {
  Tensor dx;
  Tensor dgamma;
  Tensor dbeta;
};

inline void check_layer_norm_args(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const std::size_t c = x.rank() ? x.shape().back() : 1;
  if (gamma.numel() != c || beta.numel() != c) {
    throw DimensionError("layer_norm: last dimension of " + shape_str(x.shape()) +
                         " does not match gamma " + shape_str(gamma.shape()) + " / beta " +
                         shape_str(beta.shape()));
  }
}

/// Normalizes every vector along the last axis, then applies gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  check_layer_norm_args(x, gamma, beta);
  const std::size_t c = gamma.numel();
  const std::size_t n = c ? x.numel() / c : 0;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = x.data().data() + r * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += xr[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(c);
    const double rstd = 1.0 / std::sqrt(var + eps);
    double* o = out.data().data() + r * c;
    for (std::size_t j = 0; j < c; ++j) o[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
  }
  return detail::checked(std::move(out), "layer_norm");
}

/// Recomputes the row moments from x; nothing but x is needed.
inline LayerNormGrads layer_norm_backward(const Tensor& x, const Tensor& gamma, double eps,
                                          const Tensor& dy) {
  detail::require_same_shape(x, dy, "layer_norm_backward");
  const std::size_t c = gamma.numel();
  const std::size_t n = c ? x.numel() / c : 0;
  LayerNormGrads g{Tensor(x.shape()), Tensor(gamma.shape()), Tensor(gamma.shape())};
  std::vector<double> xhat(c);
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = x.data().data() + r * c;
    const double* dr = dy.data().data() + r * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += xr[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(c);
    const double rstd = 1.0 / std::sqrt(var + eps);
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      xhat[j] = (xr[j] - mean) * rstd;
      const double dxhat = dr[j] * gamma[j];
      mean_dxhat += dxhat;
      mean_dxhat_xhat += dxhat * xhat[j];
      g.dgamma[j] += dr[j] * xhat[j];
      g.dbeta[j] += dr[j];
    }
    mean_dxhat /= static_cast<double>(c);
    mean_dxhat_xhat /= static_cast<double>(c);
    double* o = g.dx.data().data() + r * c;
    for (std::size_t j = 0; j < c; ++j) {
      o[j] = rstd * (dr[j] * gamma[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
    }
  }
  g.dx = detail::checked(std::move(g.dx), "layer_norm_backward");
  return g;
}

// ---------------------------------------------------------------- row selection

inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  Shape shape = x.shape();
  if (shape.empty()) throw DimensionError("gather_rows: scalar input");
  const std::size_t c = x.cols();
  shape[0] = rows.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows()) {
      throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                       shape_str(x.shape()));
    }
    std::copy_n(x.data().data() + rows[i] * c, c, out.data().data() + i * c);
  }
  return out;
}

/// Zero tensor with `total_rows` rows, with src row i written to rows[i].
inline Tensor scatter_rows(const Tensor& src, std::span<const std::size_t> rows, std::size_t total_rows) {
  if (src.rows() != rows.size()) {
    throw DimensionError("scatter_rows: " + std::to_string(src.rows()) + " source rows for " +
                         std::to_string(rows.size()) + " indices");
  }
  Shape shape = src.shape();
  shape[0] = total_rows;
  Tensor out(shape);
  const std::size_t c = src.cols();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= total_rows) throw IndexError("scatter_rows: row out of range");
    double* o = out.data().data() + rows[i] * c;
    const double* s = src.data().data() + i * c;
    for (std::size_t j = 0; j < c; ++j) o[j] += s[j];
  }
  return out;
}

// ---------------------------------------------------------------- attention

/// Multi-head scores S[a, i, j] = scale * <Q[i, head a], K[j, head a]>.
///
/// q [nq x h*d], k [nk x h*d] -> [h x nq x nk]. With `causal`, entries whose
/// key index exceeds the query's position are set to kMaskedLogit;
/// `positions` gives each query row's index on the key axis.
inline Tensor attention_scores(const Tensor& q, const Tensor& k, std::size_t heads, double scale,
                               bool causal, std::span<const std::size_t> positions) {
  detail::require_matrix(q, "attention_scores");
  detail::require_matrix(k, "attention_scores");
  if (heads == 0 || q.dim(1) != k.dim(1) || q.dim(1) % heads != 0) {
    throw DimensionError("attention_scores: query " + shape_str(q.shape()) + " / key " +
                         shape_str(k.shape()) + " with " + std::to_string(heads) + " heads");
  }
  if (causal && positions.size() != q.dim(0)) {
    throw DimensionError("attention_scores: causal mask needs one position per query row");
  }
  const std::size_t nq = q.dim(0), nk = k.dim(0), width = q.dim(1), d = width / heads;
  Tensor s(Shape{heads, nq, nk});
  for (std::size_t a = 0; a < heads; ++a) {
    for (std::size_t i = 0; i < nq; ++i) {
      const double* qi = q.data().data() + i * width + a * d;
      double* srow = s.data().data() + (a * nq + i) * nk;
      for (std::size_t j = 0; j < nk; ++j) {
        if (causal && j > positions[i]) {
          srow[j] = kMaskedLogit;
          continue;
        }
        const double* kj = k.data().data() + j * width + a * d;
        double acc = 0.0;
        for (std::size_t e = 0; e < d; ++e) acc += qi[e] * kj[e];
        srow[j] = scale * acc;
      }
    }
  }
  return detail::checked(std::move(s), "attention_scores");
}

struct PairGrads {
  Tensor first;
  Tensor second;
};

inline PairGrads attention_scores_backward(const Tensor& q, const Tensor& k, std::size_t heads,
                                           double scale, bool causal,
                                           std::span<const std::size_t> positions, const Tensor& ds) {
  const std::size_t nq = q.dim(0), nk = k.dim(0), width = q.dim(1), d = width / heads;
  PairGrads g{Tensor(q.shape()), Tensor(k.shape())};
  for (std::size_t a = 0; a < heads; ++a) {
    for (std::size_t i = 0; i < nq; ++i) {
      const double* qi = q.data().data() + i * width + a * d;
      double* dqi = g.first.data().data() + i * width + a * d;
      const double* dsrow = ds.data().data() + (a * nq + i) * nk;
      for (std::size_t j = 0; j < nk; ++j) {
        if (causal && j > positions[i]) continue;
        const double w = scale * dsrow[j];
        if (w == 0.0) continue;
        const double* kj = k.data().data() + j * width + a * d;
        double* dkj = g.second.data().data() + j * width + a * d;
        for (std::size_t e = 0; e < d; ++e) {
          dqi[e] += w * kj[e];
          dkj[e] += w * qi[e];
        }
      }
    }
  }
  return g;
}

/// O[i, head a] = sum_j P[a, i, j] V[j, head a]; p [h x nq x nk], v [nk x h*d].
inline Tensor attention_context(const Tensor& p, const Tensor& v) {
  if (p.rank() != 3 || v.rank() != 2 || p.dim(2) != v.dim(0) || v.dim(1) % p.dim(0) != 0) {
    throw DimensionError("attention_context: weights " + shape_str(p.shape()) + " / values " +
                         shape_str(v.shape()));
  }
  const std::size_t heads = p.dim(0), nq = p.dim(1), nk = p.dim(2), width = v.dim(1), d = width / heads;
  Tensor o(Shape{nq, width});
  for (std::size_t a = 0; a < heads; ++a) {
    for (std::size_t i = 0; i < nq; ++i) {
      const double* prow = p.data().data() + (a * nq + i) * nk;
      double* oi = o.data().data() + i * width + a * d;
      for (std::size_t j = 0; j < nk; ++j) {
        const double w = prow[j];
        if (w == 0.0) continue;
        const double* vj = v.data().data() + j * width + a * d;
        for (std::size_t e = 0; e < d; ++e) oi[e] += w * vj[e];
      }
    }
  }
  return detail::checked(std::move(o), "attention_context");
}

inline PairGrads attention_context_backward(const Tensor& p, const Tensor& v, const Tensor& dout) {
  const std::size_t heads = p.dim(0), nq = p.dim(1), nk = p.dim(2), width = v.dim(1), d = width / heads;
  PairGrads g{Tensor(p.shape()), Tensor(v.shape())};
  for (std::size_t a = 0; a < heads; ++a) {
    for (std::size_t i = 0; i < nq; ++i) {
      const double* prow = p.data().data() + (a * nq + i) * nk;
      double* dprow = g.first.data().data() + (a * nq + i) * nk;
      const double* doi = dout.data().data() + i * width + a * d;
      for (std::size_t j = 0; j < nk; ++j) {
        const double* vj = v.data().data() + j * width + a * d;
        double* dvj = g.second.data().data() + j * width + a * d;
        double acc = 0.0;
        for (std::size_t e = 0; e < d; ++e) {
          acc += doi[e] * vj[e];
          dvj[e] += prow[j] * doi[e];
        }
        dprow[j] = acc;
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------- loss

/// Mean over rows of -log softmax(logits)[label].
inline double cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (labels.size() != logits.rows()) throw DimensionError("cross_entropy: one label per row required");
  const Tensor p = softmax_rows(logits);
  double loss = 0.0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (labels[r] >= logits.cols()) throw IndexError("cross_entropy: label out of range");
    loss -= std::log(std::max(p(r, labels[r]), 1e-300));
  }
  return loss / static_cast<double>(logits.rows());
}

inline Tensor cross_entropy_backward(const Tensor& logits, std::span<const std::size_t> labels, double dy) {
  Tensor g = softmax_rows(logits);
  const double w = dy / static_cast<double>(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    g(r, labels[r]) -= 1.0;
    for (double& v : g.row(r)) v *= w;
  }
  return g;
}

}  // namespace stochbp::kernels
