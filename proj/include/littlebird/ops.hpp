#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "littlebird/tensor.hpp"

namespace littlebird {

// ---------------------------------------------------------------------------
// Key-validity mask for row softmax. Either all-valid, one shared row
// (per-key validity broadcast over queries), or a dense rows*cols table.
// Not a tensor: masks carry no gradients.
// ---------------------------------------------------------------------------
class KeyMask {
 public:
  static KeyMask all_valid(Index rows, Index cols) { return KeyMask(rows, cols, Kind::All, {}); }

  static KeyMask per_key(Index rows, std::vector<uint8_t> key_valid) {
    const Index cols = static_cast<Index>(key_valid.size());
    return KeyMask(rows, cols, Kind::Broadcast, std::move(key_valid));
  }

  static KeyMask dense(Index rows, Index cols, std::vector<uint8_t> valid) {
    if (static_cast<Index>(valid.size()) != rows * cols)
      throw ShapeError("KeyMask::dense: size mismatch");
    return KeyMask(rows, cols, Kind::Dense, std::move(valid));
  }

  Index rows() const { return rows_; }
  Index cols() const { return cols_; }
  bool all() const { return kind_ == Kind::All; }

  bool valid(Index r, Index c) const {
    switch (kind_) {
      case Kind::All: return true;
      case Kind::Broadcast: return v_[static_cast<size_t>(c)] != 0;
      default: return v_[static_cast<size_t>(r * cols_ + c)] != 0;
    }
  }

 private:
  enum class Kind { All, Broadcast, Dense };
  KeyMask(Index r, Index c, Kind k, std::vector<uint8_t> v)
      : rows_(r), cols_(c), kind_(k), v_(std::move(v)) {}
  Index rows_ = 0, cols_ = 0;
  Kind kind_ = Kind::All;
  std::vector<uint8_t> v_;
};

namespace detail {

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shapes differ, " + shape_str(a) + " vs " + shape_str(b));
}

template <class S>
void check_2d(const TensorT<S>& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 tensor, have " + shape_str(t.shape()));
}

}  // namespace detail

// --- elementwise -----------------------------------------------------------

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "add");
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  out.array() = a.array() + b.array();
  if (any_tracked<S>({&a, &b})) {
    TensorT<S> pa = a, pb = b;
    make_tracked<S>(out, {a, b}, [pa, pb](const TensorT<S>& o) mutable {
      if (pa.tracked()) pa.grad() += o.grad();
      if (pb.tracked()) pb.grad() += o.grad();
    });
  }
  return out;
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "sub");
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  out.array() = a.array() - b.array();
  if (any_tracked<S>({&a, &b})) {
    TensorT<S> pa = a, pb = b;
    make_tracked<S>(out, {a, b}, [pa, pb](const TensorT<S>& o) mutable {
      if (pa.tracked()) pa.grad() += o.grad();
      if (pb.tracked()) pb.grad() -= o.grad();
    });
  }
  return out;
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "mul");
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  out.array() = a.array() * b.array();
  if (any_tracked<S>({&a, &b})) {
    TensorT<S> pa = a, pb = b;
    make_tracked<S>(out, {a, b}, [pa, pb](const TensorT<S>& o) mutable {
      if (pa.tracked()) pa.grad() += o.grad() * pb.array();
      if (pb.tracked()) pb.grad() += o.grad() * pa.array();
    });
  }
  return out;
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, S c) {
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  out.array() = a.array() * c;
  if (any_tracked<S>({&a})) {
    TensorT<S> pa = a;
    make_tracked<S>(out, {a}, [pa, c](const TensorT<S>& o) mutable {
      if (pa.tracked()) pa.grad() += o.grad() * c;
    });
  }
  return out;
}

/// x (l x d) + v (d), broadcast over rows.
template <class S>
TensorT<S> add_rowvec(const TensorT<S>& x, const TensorT<S>& v) {
  detail::check_2d(x, "add_rowvec");
  if (v.rank() != 1 || v.dim(0) != x.cols())
    throw ShapeError("add_rowvec: vector " + shape_str(v.shape()) + " does not match " + shape_str(x.shape()));
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  out.mat() = x.mat().rowwise() + v.vec().matrix().transpose();
  if (any_tracked<S>({&x, &v})) {
    TensorT<S> px = x, pv = v;
    make_tracked<S>(out, {x, v}, [px, pv](const TensorT<S>& o) mutable {
      ConstMatMap<S> go(o.grad().data(), o.rows(), o.cols());
      if (px.tracked()) px.grad() += o.grad();
      if (pv.tracked()) pv.grad_vec().matrix() += go.colwise().sum().transpose();
    });
  }
  return out;
}

// --- matrix products --------------------------------------------------------

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_2d(a, "matmul");
  detail::check_2d(b, "matmul");
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  TensorT<S> out = TensorT<S>::zeros({a.rows(), b.cols()});
  out.mat().noalias() = a.mat() * b.mat();
  if (any_tracked<S>({&a, &b})) {
    TensorT<S> pa = a, pb = b;
    make_tracked<S>(out, {a, b}, [pa, pb](const TensorT<S>& o) mutable {
      ConstMatMap<S> go(o.grad().data(), o.rows(), o.cols());
      if (pa.tracked()) pa.grad_mat().noalias() += go * pb.mat().transpose();
      if (pb.tracked()) pb.grad_mat().noalias() += pa.mat().transpose() * go;
    });
  }
  return out;
}

/// a (m x k) * b(n x k)^T -> (m x n); keeps key matrices in row layout.
template <class S>
TensorT<S> matmul_nt(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_2d(a, "matmul_nt");
  detail::check_2d(b, "matmul_nt");
  if (a.cols() != b.cols())
    throw ShapeError("matmul_nt: inner dims differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  TensorT<S> out = TensorT<S>::zeros({a.rows(), b.rows()});
  out.mat().noalias() = a.mat() * b.mat().transpose();
  if (any_tracked<S>({&a, &b})) {
    TensorT<S> pa = a, pb = b;
    make_tracked<S>(out, {a, b}, [pa, pb](const TensorT<S>& o) mutable {
      ConstMatMap<S> go(o.grad().data(), o.rows(), o.cols());
      if (pa.tracked()) pa.grad_mat().noalias() += go * pb.mat();
      if (pb.tracked()) pb.grad_mat().noalias() += go.transpose() * pa.mat();
    });
  }
  return out;
}

// --- gathers, slices, concatenation ----------------------------------------

/// Row gather: out.row(i) = table.row(ids[i]). Backward scatter-adds.
template <class S>
TensorT<S> gather_rows(const TensorT<S>& table, const std::vector<Index>& ids) {
  detail::check_2d(table, "gather_rows");
  const Index n = static_cast<Index>(ids.size());
  for (Index id : ids)
    if (id < 0 || id >= table.rows())
      throw InputError("gather_rows: index " + std::to_string(id) + " outside table of " +
                       std::to_string(table.rows()) + " rows");
  TensorT<S> out = TensorT<S>::zeros({n, table.cols()});
  for (Index i = 0; i < n; ++i) out.mat().row(i) = table.mat().row(ids[static_cast<size_t>(i)]);
  if (any_tracked<S>({&table})) {
    TensorT<S> pt = table;
    make_tracked<S>(out, {table}, [pt, ids](const TensorT<S>& o) mutable {
      ConstMatMap<S> go(o.grad().data(), o.rows(), o.cols());
      auto gt = pt.grad_mat();
      for (Index i = 0; i < o.rows(); ++i) gt.row(ids[static_cast<size_t>(i)]) += go.row(i);
    });
  }
  return out;
}

template <class S>
TensorT<S> slice_rows(const TensorT<S>& x, Index r0, Index n) {
  detail::check_2d(x, "slice_rows");
  if (r0 < 0 || n < 0 || r0 + n > x.rows()) throw ShapeError("slice_rows: range outside " + shape_str(x.shape()));
  TensorT<S> out = TensorT<S>::zeros({n, x.cols()});
  out.mat() = x.mat().middleRows(r0, n);
  if (any_tracked<S>({&x})) {
    TensorT<S> px = x;
    make_tracked<S>(out, {x}, [px, r0, n](const TensorT<S>& o) mutable {
      ConstMatMap<S> go(o.grad().data(), o.rows(), o.cols());
      px.grad_mat().middleRows(r0, n) += go;
    });
  }
  return out;
}

template <class S>
TensorT<S> slice_cols(const TensorT<S>& x, Index c0, Index n) {
  detail::check_2d(x, "slice_cols");
  if (c0 < 0 || n < 0 || c0 + n > x.cols()) throw ShapeError("slice_cols: range outside " + shape_str(x.shape()));
  TensorT<S> out = TensorT<S>::zeros({x.rows(), n});
  out.mat() = x.mat().middleCols(c0, n);
  if (any_tracked<S>({&x})) {
    TensorT<S> px = x;
    make_tracked<S>(out, {x}, [px, c0, n](const TensorT<S>& o) mutable {
      ConstMatMap<S> go(o.grad().data(), o.rows(), o.cols());
      px.grad_mat().middleCols(c0, n) += go;
    });
  }
  return out;
}

/// Copies plane i of a rank-3 tensor (n x r x c) into a rank-2 tensor.
template <class S>
TensorT<S> slice_plane(const TensorT<S>& x, Index i) {
  if (x.rank() != 3) throw ShapeError("slice_plane: expected rank-3 tensor, have " + shape_str(x.shape()));
  if (i < 0 || i >= x.dim(0)) throw ShapeError("slice_plane: plane index outside " + shape_str(x.shape()));
  TensorT<S> out = TensorT<S>::zeros({x.dim(1), x.dim(2)});
  out.mat() = x.plane(i);
  if (any_tracked<S>({&x})) {
    TensorT<S> px = x;
    make_tracked<S>(out, {x}, [px, i](const TensorT<S>& o) mutable {
      ConstMatMap<S> go(o.grad().data(), o.rows(), o.cols());
      px.grad_plane(i) += go;
    });
  }
  return out;
}

template <class S>
TensorT<S> concat_rows(const std::vector<TensorT<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const Index cols = parts[0].cols();
  Index rows = 0;
  for (const auto& p : parts) {
    detail::check_2d(p, "concat_rows");
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
  }
  TensorT<S> out = TensorT<S>::zeros({rows, cols});
  Index r = 0;
  for (const auto& p : parts) {
    out.mat().middleRows(r, p.rows()) = p.mat();
    r += p.rows();
  }
  bool tracked = false;
  if (grad_enabled())
    for (const auto& p : parts) tracked = tracked || p.tracked();
  if (tracked) {
    std::vector<TensorT<S>> copies = parts;
    make_tracked<S>(out, parts, [copies](const TensorT<S>& o) mutable {
      ConstMatMap<S> go(o.grad().data(), o.rows(), o.cols());
      Index r = 0;
      for (auto& p : copies) {
        if (p.tracked()) p.grad_mat() += go.middleRows(r, p.rows());
        r += p.rows();
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> concat_cols(const std::vector<TensorT<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const Index rows = parts[0].rows();
  Index cols = 0;
  for (const auto& p : parts) {
    detail::check_2d(p, "concat_cols");
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.cols();
  }
  TensorT<S> out = TensorT<S>::zeros({rows, cols});
  Index c = 0;
  for (const auto& p : parts) {
    out.mat().middleCols(c, p.cols()) = p.mat();
    c += p.cols();
  }
  bool tracked = false;
  if (grad_enabled())
    for (const auto& p : parts) tracked = tracked || p.tracked();
  if (tracked) {
    std::vector<TensorT<S>> copies = parts;
    make_tracked<S>(out, parts, [copies](const TensorT<S>& o) mutable {
      ConstMatMap<S> go(o.grad().data(), o.rows(), o.cols());
      Index c = 0;
      for (auto& p : copies) {
        if (p.tracked()) p.grad_mat() += go.middleCols(c, p.cols());
        c += p.cols();
      }
    });
  }
  return out;
}

/// Repeats a single row n times.
template <class S>
TensorT<S> repeat_row(const TensorT<S>& x, Index n) {
  detail::check_2d(x, "repeat_row");
  if (x.rows() != 1) throw ShapeError("repeat_row: expected a single row, have " + shape_str(x.shape()));
  TensorT<S> out = TensorT<S>::zeros({n, x.cols()});
  out.mat() = x.mat().replicate(n, 1);
  if (any_tracked<S>({&x})) {
    TensorT<S> px = x;
    make_tracked<S>(out, {x}, [px](const TensorT<S>& o) mutable {
      ConstMatMap<S> go(o.grad().data(), o.rows(), o.cols());
      px.grad_mat() += go.colwise().sum();
    });
  }
  return out;
}

/// Same data, new shape (element count must match).
template <class S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  TensorT<S> out = TensorT<S>::zeros(std::move(shape));
  out.array() = x.array();
  if (any_tracked<S>({&x})) {
    TensorT<S> px = x;
    make_tracked<S>(out, {x}, [px](const TensorT<S>& o) mutable { px.grad() += o.grad(); });
  }
  return out;
}

// --- softmax ----------------------------------------------------------------

namespace detail {

/// Shared masked-softmax forward. Masked entries come out exactly 0; rows with
/// no valid key come out all-zero. Masking is additive -1e30 pre-normalization
/// with explicit zeroing after, so no infinities enter the arithmetic.
template <class S>
void masked_softmax_values(ConstMatMap<S> x, const KeyMask& mask, MatMap<S> out) {
  const Index rows = x.rows(), cols = x.cols();
  for (Index r = 0; r < rows; ++r) {
    S mx = std::numeric_limits<S>::lowest();
    bool any = false;
    for (Index c = 0; c < cols; ++c) {
      if (!mask.valid(r, c)) continue;
      const S v = x(r, c);
      if (std::isnan(v)) throw NumericError("masked_softmax: NaN in scores");
      mx = std::max(mx, v);
      any = true;
    }
    if (!any) {
      out.row(r).setZero();
      continue;
    }
    S sum = S(0);
    for (Index c = 0; c < cols; ++c) {
      if (mask.valid(r, c)) {
        const S e = std::exp(x(r, c) - mx);
        out(r, c) = e;
        sum += e;
      } else {
        out(r, c) = S(0);
      }
    }
    const S inv = S(1) / sum;
    for (Index c = 0; c < cols; ++c)
      if (mask.valid(r, c)) out(r, c) *= inv;
  }
}

}  // namespace detail

/// Row softmax over valid keys. Valid entries of each row sum to 1; masked
/// entries are exactly 0; fully-masked rows return all-zero.
template <class S>
TensorT<S> masked_softmax(const TensorT<S>& x, const KeyMask& mask) {
  detail::check_2d(x, "masked_softmax");
  if (mask.rows() != x.rows() || mask.cols() != x.cols())
    throw ShapeError("masked_softmax: mask " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                     " does not match scores " + shape_str(x.shape()));
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  detail::masked_softmax_values<S>(x.mat(), mask, out.mat());
  if (any_tracked<S>({&x})) {
    // dL/dx = p * (dL/dp - sum_k dL/dp_k p_k); masked entries have p = 0.
    TensorT<S> px = x;
    make_tracked<S>(out, {x}, [px](const TensorT<S>& o) mutable {
      ConstMatMap<S> p(o.data(), o.rows(), o.cols());
      ConstMatMap<S> go(o.grad().data(), o.rows(), o.cols());
      auto gx = px.grad_mat();
      for (Index r = 0; r < p.rows(); ++r) {
        const S dot = (go.row(r).array() * p.row(r).array()).sum();
        gx.row(r).array() += p.row(r).array() * (go.row(r).array() - dot);
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> softmax(const TensorT<S>& x) {
  return masked_softmax(x, KeyMask::all_valid(x.rows(), x.cols()));
}

// --- layer norm ---------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

/// Per-row normalization to mean 0 / variance 1 (epsilon inside the sqrt),
/// then elementwise gain and shift.
template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& shift) {
  detail::check_2d(x, "layer_norm");
  const Index d = x.cols();
  if (gain.rank() != 1 || gain.dim(0) != d || shift.rank() != 1 || shift.dim(0) != d)
    throw ShapeError("layer_norm: gain/shift must be length-" + std::to_string(d) + " vectors");

  TensorT<S> out = TensorT<S>::zeros(x.shape());
  TensorT<S> xhat = TensorT<S>::zeros(x.shape());  // kept for backward
  ArrayX<S> inv_std(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const S m = x.mat().row(r).mean();
    const S var = (x.mat().row(r).array() - m).square().mean();
    const S inv = S(1) / std::sqrt(var + S(kLayerNormEps));
    inv_std[r] = inv;
    xhat.mat().row(r) = (x.mat().row(r).array() - m) * inv;
    out.mat().row(r) = xhat.mat().row(r).array() * gain.vec().transpose() + shift.vec().transpose();
  }
  if (any_tracked<S>({&x, &gain, &shift})) {
    TensorT<S> px = x, pg = gain, ps = shift;
    make_tracked<S>(out, {x, gain, shift}, [px, pg, ps, xhat, inv_std](const TensorT<S>& o) mutable {
      ConstMatMap<S> go(o.grad().data(), o.rows(), o.cols());
      for (Index r = 0; r < o.rows(); ++r) {
        Eigen::Array<S, 1, Eigen::Dynamic> dy = go.row(r).array() * pg.vec().transpose();
        const S m1 = dy.mean();
        const S m2 = (dy * xhat.mat().row(r).array()).mean();
        if (px.tracked())
          px.grad_mat().row(r).array() += inv_std[r] * (dy - m1 - xhat.mat().row(r).array() * m2);
        if (pg.tracked()) pg.grad_vec() += (go.row(r).array() * xhat.mat().row(r).array()).transpose();
        if (ps.tracked()) ps.grad_vec() += go.row(r).array().transpose();
      }
    });
  }
  return out;
}

// --- gelu & linear ------------------------------------------------------------

/// Exact gelu: 0.5 x (1 + erf(x / sqrt(2))).
template <class S>
TensorT<S> gelu(const TensorT<S>& x) {
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const S inv_sqrt2 = S(0.70710678118654752440);
  for (Index i = 0; i < x.size(); ++i) {
    const S v = x.array()[i];
    out.array()[i] = S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2));
  }
  if (any_tracked<S>({&x})) {
    TensorT<S> px = x;
    make_tracked<S>(out, {x}, [px, inv_sqrt2](const TensorT<S>& o) mutable {
      const S inv_sqrt2pi = S(0.39894228040143267794);
      auto& gx = px.grad();
      for (Index i = 0; i < px.size(); ++i) {
        const S v = px.array()[i];
        const S cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
        const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * v * v);
        gx[i] += o.grad()[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

/// x (l x d_in) * W (d_in x d_out) + b.
template <class S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& weight, const TensorT<S>& bias) {
  return add_rowvec(matmul(x, weight), bias);
}

/// Two linear maps with a gelu between: the 4d-wide feed-forward block.
template <class S>
TensorT<S> ffn(const TensorT<S>& x, const TensorT<S>& w1, const TensorT<S>& b1, const TensorT<S>& w2,
               const TensorT<S>& b2) {
  return linear(gelu(linear(x, w1, b1)), w2, b2);
}

// --- reductions & losses -------------------------------------------------------

template <class S>
TensorT<S> sum(const TensorT<S>& x) {
  TensorT<S> out = TensorT<S>::scalar(x.array().sum());
  if (any_tracked<S>({&x})) {
    TensorT<S> px = x;
    make_tracked<S>(out, {x}, [px](const TensorT<S>& o) mutable { px.grad() += o.grad()[0]; });
  }
  return out;
}

template <class S>
TensorT<S> mean(const TensorT<S>& x) {
  const S inv = S(1) / static_cast<S>(x.size());
  TensorT<S> out = TensorT<S>::scalar(x.array().sum() * inv);
  if (any_tracked<S>({&x})) {
    TensorT<S> px = x;
    make_tracked<S>(out, {x}, [px, inv](const TensorT<S>& o) mutable { px.grad() += o.grad()[0] * inv; });
  }
  return out;
}

/// Mean cross entropy of rows of `logits` against integer targets, with
/// invalid logit positions excluded from the normalizer. Rows listed in
/// `rows` are averaged; each target must be a valid column of its row.
template <class S>
TensorT<S> cross_entropy_rows(const TensorT<S>& logits, const KeyMask& mask,
                              const std::vector<Index>& rows, const std::vector<Index>& targets) {
  detail::check_2d(logits, "cross_entropy_rows");
  if (rows.size() != targets.size()) throw ShapeError("cross_entropy_rows: rows/targets size mismatch");
  if (rows.empty()) throw InputError("cross_entropy_rows: no rows selected");
  const Index n = static_cast<Index>(rows.size());

  TensorT<S> probs = TensorT<S>::zeros(logits.shape());
  detail::masked_softmax_values<S>(logits.mat(), mask, probs.mat());
  S loss = S(0);
  for (size_t i = 0; i < rows.size(); ++i) {
    const Index r = rows[i], t = targets[i];
    if (t < 0 || t >= logits.cols() || !mask.valid(r, t))
      throw InputError("cross_entropy_rows: target " + std::to_string(t) + " invalid for row " + std::to_string(r));
    loss -= std::log(std::max(probs.at(r, t), std::numeric_limits<S>::min()));
  }
  TensorT<S> out = TensorT<S>::scalar(loss / static_cast<S>(n));
  if (any_tracked<S>({&logits})) {
    TensorT<S> pl = logits;
    make_tracked<S>(out, {logits}, [pl, probs, rows, targets, n](const TensorT<S>& o) mutable {
      const S g = o.grad()[0] / static_cast<S>(n);
      auto gl = pl.grad_mat();
      for (size_t i = 0; i < rows.size(); ++i) {
        const Index r = rows[i];
        gl.row(r).array() += g * probs.mat().row(r).array();
        gl(r, targets[i]) -= g;
      }
    });
  }
  return out;
}

/// Mean soft-target cross entropy: -sum_k p_k log q_k averaged over the given
/// rows, with q from masked softmax of `logits`. Target rows are constants.
template <class S>
TensorT<S> soft_cross_entropy_rows(const TensorT<S>& logits, const KeyMask& mask,
                                   const std::vector<Index>& rows, const TensorT<S>& target_probs) {
  detail::check_2d(logits, "soft_cross_entropy_rows");
  detail::check_same_shape(logits.shape(), target_probs.shape(), "soft_cross_entropy_rows");
  if (rows.empty()) throw InputError("soft_cross_entropy_rows: no rows selected");
  const Index n = static_cast<Index>(rows.size());

  TensorT<S> probs = TensorT<S>::zeros(logits.shape());
  detail::masked_softmax_values<S>(logits.mat(), mask, probs.mat());
  S loss = S(0);
  for (Index r : rows) {
    for (Index c = 0; c < logits.cols(); ++c) {
      if (!mask.valid(r, c)) continue;
      const S p = target_probs.at(r, c);
      if (p > S(0)) loss -= p * std::log(std::max(probs.at(r, c), std::numeric_limits<S>::min()));
    }
  }
  TensorT<S> out = TensorT<S>::scalar(loss / static_cast<S>(n));
  if (any_tracked<S>({&logits})) {
    TensorT<S> pl = logits;
    KeyMask m = mask;
    make_tracked<S>(out, {logits}, [pl, probs, m, rows, target_probs, n](const TensorT<S>& o) mutable {
      const S g = o.grad()[0] / static_cast<S>(n);
      auto gl = pl.grad_mat();
      for (Index r : rows) {
        // target mass within the valid set; softmax grad is q * mass - p.
        S pmass = S(0);
        for (Index c = 0; c < pl.cols(); ++c)
          if (m.valid(r, c)) pmass += target_probs.at(r, c);
        for (Index c = 0; c < pl.cols(); ++c) {
          if (!m.valid(r, c)) continue;
          gl(r, c) += g * (probs.at(r, c) * pmass - target_probs.at(r, c));
        }
      }
    });
  }
  return out;
}

}  // namespace littlebird
