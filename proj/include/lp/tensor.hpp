#pragma once

// Dense kernels shared by the whole engine. Every reduction (matmul, softmax,
// norms, cross-entropy) accumulates strictly left-to-right so results are
// bit-reproducible and can be pinned against naive-loop references.

#include "lp/rng.hpp"
#include "lp/types.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace lp {

// Each output element accumulates strictly in ascending-k order; the four-row
// blocking only interleaves independent elements.
template <class S>
Matrix<S> matmul(const MatRef<S>& a, const MatRef<S>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str<S>(a) + " x " +
                     shape_str<S>(b));
  }
  const Index m = a.rows(), k = a.cols(), n = b.cols();
  const Index a_stride = a.outerStride(), b_stride = b.outerStride();
  Matrix<S> c = Matrix<S>::Zero(m, n);
  Index i = 0;
  for (; i + 4 <= m; i += 4) {
    S* c0 = c.data() + (i + 0) * n;
    S* c1 = c.data() + (i + 1) * n;
    S* c2 = c.data() + (i + 2) * n;
    S* c3 = c.data() + (i + 3) * n;
    const S* a0 = a.data() + (i + 0) * a_stride;
    const S* a1 = a.data() + (i + 1) * a_stride;
    const S* a2 = a.data() + (i + 2) * a_stride;
    const S* a3 = a.data() + (i + 3) * a_stride;
    for (Index p = 0; p < k; ++p) {
      const S w0 = a0[p], w1 = a1[p], w2 = a2[p], w3 = a3[p];
      const S* br = b.data() + p * b_stride;
      for (Index j = 0; j < n; ++j) {
        const S bv = br[j];
        c0[j] += w0 * bv;
        c1[j] += w1 * bv;
        c2[j] += w2 * bv;
        c3[j] += w3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    S* cr = c.data() + i * n;
    const S* ar = a.data() + i * a_stride;
    for (Index p = 0; p < k; ++p) {
      const S w = ar[p];
      const S* br = b.data() + p * b_stride;
      for (Index j = 0; j < n; ++j) cr[j] += w * br[j];
    }
  }
  return c;
}

template <class S>
Matrix<S> softmax_rows(const MatRef<S>& a) {
  const Index m = a.rows(), n = a.cols();
  Matrix<S> out(m, n);
  for (Index i = 0; i < m; ++i) {
    const S* row = a.data() + i * a.outerStride();
    S mx = row[0];
    for (Index j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    S sum = S(0);
    S* orow = out.data() + i * n;
    for (Index j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    const S inv = S(1) / sum;
    for (Index j = 0; j < n; ++j) orow[j] *= inv;
  }
  return out;
}

template <class S>
Matrix<S> rmsnorm(const MatRef<S>& x, const VecRef<S>& scale, S eps) {
  if (x.cols() != scale.size()) {
    throw ShapeError("rmsnorm: feature dim " + shape_str<S>(x) + " vs scale length " +
                     std::to_string(scale.size()));
  }
  const Index m = x.rows(), n = x.cols();
  Matrix<S> out(m, n);
  for (Index i = 0; i < m; ++i) {
    const S* row = x.data() + i * x.outerStride();
    S ss = S(0);
    for (Index j = 0; j < n; ++j) ss += row[j] * row[j];
    const S inv = S(1) / std::sqrt(ss / S(n) + eps);
    S* orow = out.data() + i * n;
    for (Index j = 0; j < n; ++j) orow[j] = row[j] * inv * scale[j];
  }
  return out;
}

// Scale-only LayerNorm (no bias), selectable for ablation.
template <class S>
Matrix<S> layernorm(const MatRef<S>& x, const VecRef<S>& scale, S eps) {
  if (x.cols() != scale.size()) {
    throw ShapeError("layernorm: feature dim " + shape_str<S>(x) + " vs scale length " +
                     std::to_string(scale.size()));
  }
  const Index m = x.rows(), n = x.cols();
  Matrix<S> out(m, n);
  for (Index i = 0; i < m; ++i) {
    const S* row = x.data() + i * x.outerStride();
    S mean = S(0);
    for (Index j = 0; j < n; ++j) mean += row[j];
    mean /= S(n);
    S var = S(0);
    for (Index j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= S(n);
    const S inv = S(1) / std::sqrt(var + eps);
    S* orow = out.data() + i * n;
    for (Index j = 0; j < n; ++j) orow[j] = (row[j] - mean) * inv * scale[j];
  }
  return out;
}

template <class S>
Matrix<S> add(const MatRef<S>& a, const MatRef<S>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("add: shape mismatch: " + shape_str<S>(a) + " vs " + shape_str<S>(b));
  }
  return a + b;
}

template <class S>
Matrix<S> mul(const MatRef<S>& a, const MatRef<S>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("mul: shape mismatch: " + shape_str<S>(a) + " vs " + shape_str<S>(b));
  }
  return a.cwiseProduct(b);
}

template <class S>
Matrix<S> transpose(const MatRef<S>& a) {
  return a.transpose();
}

// Row-major reinterpretation of the same elements.
template <class S>
Matrix<S> reshape(const MatRef<S>& a, Index rows, Index cols) {
  if (a.rows() * a.cols() != rows * cols) {
    throw ShapeError("reshape: element count mismatch: " + shape_str<S>(a) + " -> " +
                     shape_str(rows, cols));
  }
  Matrix<S> tmp = a;  // compact row-major copy
  return Eigen::Map<const Matrix<S>>(tmp.data(), rows, cols);
}

// Splits into k equal parts along axis (0 = rows, 1 = cols).
template <class S>
std::vector<Matrix<S>> split(const MatRef<S>& a, int axis, Index k) {
  const Index dim = axis == 0 ? a.rows() : a.cols();
  if (axis != 0 && axis != 1) throw ShapeError("split: axis must be 0 or 1");
  if (k <= 0 || dim % k != 0) {
    throw ShapeError("split: " + std::to_string(k) + " does not divide axis size " +
                     std::to_string(dim));
  }
  const Index step = dim / k;
  std::vector<Matrix<S>> parts;
  parts.reserve(size_t(k));
  for (Index i = 0; i < k; ++i) {
    if (axis == 0) {
      parts.emplace_back(a.middleRows(i * step, step));
    } else {
      parts.emplace_back(a.middleCols(i * step, step));
    }
  }
  return parts;
}

template <class S>
Matrix<S> concat(const std::vector<Matrix<S>>& parts, int axis) {
  if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
  if (parts.empty()) throw ShapeError("concat: no parts");
  Index rows = parts[0].rows(), cols = parts[0].cols();
  for (size_t i = 1; i < parts.size(); ++i) {
    if (axis == 0) {
      if (parts[i].cols() != cols) throw ShapeError("concat: column mismatch");
      rows += parts[i].rows();
    } else {
      if (parts[i].rows() != rows) throw ShapeError("concat: row mismatch");
      cols += parts[i].cols();
    }
  }
  Matrix<S> out(rows, cols);
  Index off = 0;
  for (const auto& p : parts) {
    if (axis == 0) {
      out.middleRows(off, p.rows()) = p;
      off += p.rows();
    } else {
      out.middleCols(off, p.cols()) = p;
      off += p.cols();
    }
  }
  return out;
}

template <class S>
S silu(S z) {
  return z / (S(1) + std::exp(-z));
}

template <class S>
S gelu(S z) {
  return S(0.5) * z * (S(1) + std::erf(z / std::sqrt(S(2))));
}

template <class S>
Matrix<S> silu(const MatRef<S>& a) {
  return a.unaryExpr([](S z) { return silu(z); });
}

template <class S>
Matrix<S> gelu(const MatRef<S>& a) {
  return a.unaryExpr([](S z) { return gelu(z); });
}

// First index of the row maximum (ties break to the lowest index).
template <class S>
std::vector<Index> argmax_rows(const MatRef<S>& a) {
  std::vector<Index> out(static_cast<size_t>(a.rows()), 0);
  for (Index i = 0; i < a.rows(); ++i) {
    const S* row = a.data() + i * a.outerStride();
    Index best = 0;
    for (Index j = 1; j < a.cols(); ++j) {
      if (row[j] > row[best]) best = j;
    }
    out[size_t(i)] = best;
  }
  return out;
}

// Natural-log cross-entropy of each row's logits against its target id.
template <class S>
Vector<S> nll_rows(const MatRef<S>& logits, const std::vector<int>& targets) {
  if (Index(targets.size()) != logits.rows()) {
    throw ShapeError("nll_rows: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(logits.rows()) + " rows");
  }
  Vector<S> out(logits.rows());
  for (Index i = 0; i < logits.rows(); ++i) {
    const S* row = logits.data() + i * logits.outerStride();
    const int t = targets[size_t(i)];
    if (t < 0 || Index(t) >= logits.cols()) {
      throw ShapeError("nll_rows: target " + std::to_string(t) + " out of range");
    }
    S mx = row[0];
    for (Index j = 1; j < logits.cols(); ++j) mx = std::max(mx, row[j]);
    S sum = S(0);
    for (Index j = 0; j < logits.cols(); ++j) sum += std::exp(row[j] - mx);
    out[i] = std::log(sum) + mx - row[t];
  }
  return out;
}

template <class S>
S cross_entropy(const MatRef<S>& logits, const std::vector<int>& targets) {
  const Vector<S> nll = nll_rows<S>(logits, targets);
  S sum = S(0);
  for (Index i = 0; i < nll.size(); ++i) sum += nll[i];
  return sum / S(nll.size());
}

template <class S>
S frobenius_norm(const MatRef<S>& a) {
  S ss = S(0);
  for (Index i = 0; i < a.rows(); ++i) {
    const S* row = a.data() + i * a.outerStride();
    for (Index j = 0; j < a.cols(); ++j) ss += row[j] * row[j];
  }
  return std::sqrt(ss);
}

template <class S>
Matrix<S> gaussian_matrix(Rng& rng, Index rows, Index cols, S stddev) {
  Matrix<S> m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = S(rng.next_gaussian()) * stddev;
  }
  return m;
}

}  // namespace lp
