#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "outfitlab/error.hpp"
#include "outfitlab/tensor.hpp"

namespace outfitlab::diff {

// Reverse-mode automatic differentiation over Tensor<Real>.
//
// A Tape owns every intermediate value of one forward computation. Ops are
// free functions that append a result slot and, when any input requires
// gradients, a backward closure. backward(loss) replays the closures in
// reverse and accumulates gradients into per-slot buffers. Accumulation
// order is fixed by construction order, so a given graph built from the
// same inputs always produces bitwise-identical results.
//
// Tapes are single-shot: build a graph, call backward at most once, then
// discard. Ops whose inputs all have requires_grad == false record nothing,
// which makes pure inference over the same code path cheap.

template <class Real>
class Tape {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var input(Tensor<Real> value, bool requires_grad = false) {
    return make(std::move(value), requires_grad);
  }

  const Tensor<Real>& value(Var v) const { return slot(v).value; }

  // Gradient of the last backward() target with respect to v. Zero if v
  // did not influence the target.
  const Tensor<Real>& grad(Var v) {
    Slot& s = slot(v);
    if (!s.requires_grad)
      throw ConfigError("gradient requested for a variable that does not require it");
    if (s.grad.data.empty()) s.grad = Tensor<Real>(s.value.rows, s.value.cols);
    return s.grad;
  }

  bool requires_grad(Var v) const { return slot(v).requires_grad; }

  void backward(Var target) {
    Slot& s = slot(target);
    if (s.value.rows != 1 || s.value.cols != 1)
      throw DimensionError("backward target must be a scalar, got " + s.value.shape_str());
    if (!s.requires_grad)
      throw ConfigError("backward target does not depend on any trainable input");
    if (ran_backward_) throw ConfigError("backward may run only once per tape");
    ran_backward_ = true;
    grad_buf(target).data[0] = Real(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  std::size_t node_count() const { return nodes_.size(); }

  // --- used by op implementations ---

  Var make(Tensor<Real> value, bool requires_grad) {
    slots_.push_back(Slot{std::move(value), Tensor<Real>{}, requires_grad});
    return Var{static_cast<int>(slots_.size()) - 1};
  }

  void record(std::function<void()> node) { nodes_.push_back(std::move(node)); }

  // Empty until touched during backward; ops must skip outputs whose
  // gradient buffer was never written.
  const Tensor<Real>& grad_of(Var v) const { return slot(v).grad; }

  Tensor<Real>& grad_buf(Var v) {
    Slot& s = slot(v);
    if (s.grad.data.empty()) s.grad = Tensor<Real>(s.value.rows, s.value.cols);
    return s.grad;
  }

 private:
  struct Slot {
    Tensor<Real> value;
    Tensor<Real> grad;
    bool requires_grad = false;
  };

  Slot& slot(Var v) {
    if (v.id < 0 || v.id >= static_cast<int>(slots_.size()))
      throw ConfigError("variable does not belong to this tape");
    return slots_[static_cast<std::size_t>(v.id)];
  }
  const Slot& slot(Var v) const { return const_cast<Tape*>(this)->slot(v); }

  std::vector<Slot> slots_;
  std::vector<std::function<void()>> nodes_;
  bool ran_backward_ = false;
};

template <class Real>
using Var = typename Tape<Real>::Var;

namespace detail {

template <class Real>
using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class Real>
Eigen::Map<EMat<Real>> emap(Tensor<Real>& t) {
  return Eigen::Map<EMat<Real>>(t.data.data(), t.rows, t.cols);
}

template <class Real>
Eigen::Map<const EMat<Real>> emap(const Tensor<Real>& t) {
  return Eigen::Map<const EMat<Real>>(t.data.data(), t.rows, t.cols);
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

template <class Real>
Real stable_sigmoid(Real x) {
  if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
  Real e = std::exp(x);
  return e / (Real(1) + e);
}

// Eigen's vectorized reductions peel the loop around the buffer's SIMD
// alignment, so the summation order (and the rounded result) can change
// between two allocations of identical data. Every reduction that feeds
// a value or gradient therefore runs as a plain sequential loop; only
// elementwise kernels and GEMM, whose results do not depend on operand
// addresses, go through Eigen.

template <class Real>
Real seq_sum(const Real* p, std::size_t n) {
  Real acc = Real(0);
  for (std::size_t i = 0; i < n; ++i) acc += p[i];
  return acc;
}

template <class Real>
Real seq_dot(const Real* a, const Real* b, std::size_t n) {
  Real acc = Real(0);
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <class Real>
Real seq_norm(const Real* p, std::size_t n) {
  return std::sqrt(seq_dot(p, p, n));
}

template <class Real>
Real seq_max(const Real* p, std::size_t n) {
  Real m = p[0];
  for (std::size_t i = 1; i < n; ++i)
    if (p[i] > m) m = p[i];
  return m;
}

// dst[c] += sum over rows of src(r, c), row by row.
template <class Real>
void add_col_sums(Real* dst, const Tensor<Real>& src) {
  for (int r = 0; r < src.rows; ++r) {
    const Real* row = src.data.data() + static_cast<std::size_t>(r) * src.cols;
    for (int c = 0; c < src.cols; ++c) dst[c] += row[c];
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear ops
// ---------------------------------------------------------------------------

template <class Real>
Var<Real> add(Tape<Real>& t, Var<Real> a, Var<Real> b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  detail::require(va.same_shape(vb), "add: shape mismatch " + va.shape_str() + " vs " + vb.shape_str());
  Tensor<Real> out(va.rows, va.cols);
  detail::emap(out) = detail::emap(va) + detail::emap(vb);
  bool ng = t.requires_grad(a) || t.requires_grad(b);
  auto o = t.make(std::move(out), ng);
  if (ng)
    t.record([&t, a, b, o] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      if (t.requires_grad(a)) detail::emap(t.grad_buf(a)) += detail::emap(g);
      if (t.requires_grad(b)) detail::emap(t.grad_buf(b)) += detail::emap(g);
    });
  return o;
}

template <class Real>
Var<Real> sub(Tape<Real>& t, Var<Real> a, Var<Real> b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  detail::require(va.same_shape(vb), "sub: shape mismatch " + va.shape_str() + " vs " + vb.shape_str());
  Tensor<Real> out(va.rows, va.cols);
  detail::emap(out) = detail::emap(va) - detail::emap(vb);
  bool ng = t.requires_grad(a) || t.requires_grad(b);
  auto o = t.make(std::move(out), ng);
  if (ng)
    t.record([&t, a, b, o] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      if (t.requires_grad(a)) detail::emap(t.grad_buf(a)) += detail::emap(g);
      if (t.requires_grad(b)) detail::emap(t.grad_buf(b)) -= detail::emap(g);
    });
  return o;
}

template <class Real>
Var<Real> mul(Tape<Real>& t, Var<Real> a, Var<Real> b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  detail::require(va.same_shape(vb), "mul: shape mismatch " + va.shape_str() + " vs " + vb.shape_str());
  Tensor<Real> out(va.rows, va.cols);
  detail::emap(out) = detail::emap(va).cwiseProduct(detail::emap(vb));
  bool ng = t.requires_grad(a) || t.requires_grad(b);
  auto o = t.make(std::move(out), ng);
  if (ng)
    t.record([&t, a, b, o] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      if (t.requires_grad(a))
        detail::emap(t.grad_buf(a)) += detail::emap(g).cwiseProduct(detail::emap(t.value(b)));
      if (t.requires_grad(b))
        detail::emap(t.grad_buf(b)) += detail::emap(g).cwiseProduct(detail::emap(t.value(a)));
    });
  return o;
}

template <class Real>
Var<Real> scale(Tape<Real>& t, Var<Real> a, Real s) {
  const auto& va = t.value(a);
  Tensor<Real> out(va.rows, va.cols);
  detail::emap(out) = detail::emap(va) * s;
  bool ng = t.requires_grad(a);
  auto o = t.make(std::move(out), ng);
  if (ng)
    t.record([&t, a, o, s] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      detail::emap(t.grad_buf(a)) += detail::emap(g) * s;
    });
  return o;
}

template <class Real>
Var<Real> matmul(Tape<Real>& t, Var<Real> a, Var<Real> b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  detail::require(va.cols == vb.rows,
                  "matmul: inner dimensions differ, " + va.shape_str() + " * " + vb.shape_str());
  Tensor<Real> out(va.rows, vb.cols);
  detail::emap(out).noalias() = detail::emap(va) * detail::emap(vb);
  bool ng = t.requires_grad(a) || t.requires_grad(b);
  auto o = t.make(std::move(out), ng);
  if (ng)
    t.record([&t, a, b, o] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      if (t.requires_grad(a))
        detail::emap(t.grad_buf(a)).noalias() += detail::emap(g) * detail::emap(t.value(b)).transpose();
      if (t.requires_grad(b))
        detail::emap(t.grad_buf(b)).noalias() += detail::emap(t.value(a)).transpose() * detail::emap(g);
    });
  return o;
}

// a * b^T without materializing the transpose.
template <class Real>
Var<Real> matmul_nt(Tape<Real>& t, Var<Real> a, Var<Real> b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  detail::require(va.cols == vb.cols,
                  "matmul_nt: column counts differ, " + va.shape_str() + " vs " + vb.shape_str());
  Tensor<Real> out(va.rows, vb.rows);
  detail::emap(out).noalias() = detail::emap(va) * detail::emap(vb).transpose();
  bool ng = t.requires_grad(a) || t.requires_grad(b);
  auto o = t.make(std::move(out), ng);
  if (ng)
    t.record([&t, a, b, o] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      if (t.requires_grad(a))
        detail::emap(t.grad_buf(a)).noalias() += detail::emap(g) * detail::emap(t.value(b));
      if (t.requires_grad(b))
        detail::emap(t.grad_buf(b)).noalias() += detail::emap(g).transpose() * detail::emap(t.value(a));
    });
  return o;
}

// x: [m x d], bias: [1 x d], broadcast over rows.
template <class Real>
Var<Real> add_row_bias(Tape<Real>& t, Var<Real> x, Var<Real> bias) {
  const auto& vx = t.value(x);
  const auto& vb = t.value(bias);
  detail::require(vb.rows == 1 && vb.cols == vx.cols,
                  "add_row_bias: bias " + vb.shape_str() + " does not match " + vx.shape_str());
  Tensor<Real> out(vx.rows, vx.cols);
  detail::emap(out) = detail::emap(vx).rowwise() + detail::emap(vb).row(0);
  bool ng = t.requires_grad(x) || t.requires_grad(bias);
  auto o = t.make(std::move(out), ng);
  if (ng)
    t.record([&t, x, bias, o] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      if (t.requires_grad(x)) detail::emap(t.grad_buf(x)) += detail::emap(g);
      if (t.requires_grad(bias)) detail::add_col_sums(t.grad_buf(bias).data.data(), g);
    });
  return o;
}

template <class Real>
Var<Real> relu(Tape<Real>& t, Var<Real> x) {
  const auto& vx = t.value(x);
  Tensor<Real> out(vx.rows, vx.cols);
  for (std::size_t i = 0; i < vx.data.size(); ++i)
    out.data[i] = vx.data[i] > Real(0) ? vx.data[i] : Real(0);
  bool ng = t.requires_grad(x);
  auto o = t.make(std::move(out), ng);
  if (ng)
    t.record([&t, x, o] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      const auto& vx2 = t.value(x);
      auto& gx = t.grad_buf(x);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        if (vx2.data[i] > Real(0)) gx.data[i] += g.data[i];
    });
  return o;
}

template <class Real>
Var<Real> softplus(Tape<Real>& t, Var<Real> x) {
  const auto& vx = t.value(x);
  Tensor<Real> out(vx.rows, vx.cols);
  for (std::size_t i = 0; i < vx.data.size(); ++i) {
    Real v = vx.data[i];
    out.data[i] = std::max(v, Real(0)) + std::log1p(std::exp(-std::abs(v)));
  }
  bool ng = t.requires_grad(x);
  auto o = t.make(std::move(out), ng);
  if (ng)
    t.record([&t, x, o] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      const auto& vx2 = t.value(x);
      auto& gx = t.grad_buf(x);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        gx.data[i] += g.data[i] * detail::stable_sigmoid(vx2.data[i]);
    });
  return o;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class Real>
Var<Real> reshape(Tape<Real>& t, Var<Real> x, int rows, int cols) {
  const auto& vx = t.value(x);
  detail::require(static_cast<std::size_t>(rows) * cols == vx.size(),
                  "reshape: element count changes from " + vx.shape_str());
  Tensor<Real> out(rows, cols);
  out.data = vx.data;
  bool ng = t.requires_grad(x);
  auto o = t.make(std::move(out), ng);
  if (ng)
    t.record([&t, x, o] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      auto& gx = t.grad_buf(x);
      for (std::size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i];
    });
  return o;
}

template <class Real>
Var<Real> slice_rows(Tape<Real>& t, Var<Real> x, int first, int count) {
  const auto& vx = t.value(x);
  detail::require(first >= 0 && count >= 0 && first + count <= vx.rows,
                  "slice_rows: range out of bounds for " + vx.shape_str());
  Tensor<Real> out(count, vx.cols);
  detail::emap(out) = detail::emap(vx).middleRows(first, count);
  bool ng = t.requires_grad(x);
  auto o = t.make(std::move(out), ng);
  if (ng)
    t.record([&t, x, o, first, count] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      detail::emap(t.grad_buf(x)).middleRows(first, count) += detail::emap(g);
    });
  return o;
}

template <class Real>
Var<Real> gather_rows(Tape<Real>& t, Var<Real> x, std::vector<int> idx) {
  const auto& vx = t.value(x);
  for (int i : idx)
    detail::require(i >= 0 && i < vx.rows, "gather_rows: index out of range for " + vx.shape_str());
  Tensor<Real> out(static_cast<int>(idx.size()), vx.cols);
  for (std::size_t r = 0; r < idx.size(); ++r)
    detail::emap(out).row(static_cast<int>(r)) = detail::emap(vx).row(idx[r]);
  bool ng = t.requires_grad(x);
  auto o = t.make(std::move(out), ng);
  if (ng) {
    auto shared = std::make_shared<std::vector<int>>(std::move(idx));
    t.record([&t, x, o, shared] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      auto gx = detail::emap(t.grad_buf(x));
      for (std::size_t r = 0; r < shared->size(); ++r)
        gx.row((*shared)[r]) += detail::emap(g).row(static_cast<int>(r));
    });
  }
  return o;
}

template <class Real>
Var<Real> repeat_rows(Tape<Real>& t, Var<Real> x, int copies) {
  const auto& vx = t.value(x);
  detail::require(vx.rows == 1, "repeat_rows: expected a single row, got " + vx.shape_str());
  detail::require(copies >= 1, "repeat_rows: copies must be positive");
  Tensor<Real> out(copies, vx.cols);
  for (int r = 0; r < copies; ++r) detail::emap(out).row(r) = detail::emap(vx).row(0);
  bool ng = t.requires_grad(x);
  auto o = t.make(std::move(out), ng);
  if (ng)
    t.record([&t, x, o] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      detail::add_col_sums(t.grad_buf(x).data.data(), g);
    });
  return o;
}

// ---------------------------------------------------------------------------
// Reductions and row-wise normalizations
// ---------------------------------------------------------------------------

template <class Real>
Var<Real> mean_rows(Tape<Real>& t, Var<Real> x) {
  const auto& vx = t.value(x);
  detail::require(vx.rows >= 1, "mean_rows: empty input");
  Tensor<Real> out(1, vx.cols);
  detail::add_col_sums(out.data.data(), vx);
  for (auto& v : out.data) v /= Real(vx.rows);
  bool ng = t.requires_grad(x);
  auto o = t.make(std::move(out), ng);
  if (ng)
    t.record([&t, x, o] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      auto gx = detail::emap(t.grad_buf(x));
      Real inv = Real(1) / Real(gx.rows());
      gx.rowwise() += (detail::emap(g).row(0) * inv).eval();
    });
  return o;
}

template <class Real>
Var<Real> mean_all(Tape<Real>& t, Var<Real> x) {
  const auto& vx = t.value(x);
  detail::require(vx.size() > 0, "mean_all: empty input");
  Tensor<Real> out(1, 1);
  out.data[0] = detail::seq_sum(vx.data.data(), vx.data.size()) / Real(vx.size());
  bool ng = t.requires_grad(x);
  auto o = t.make(std::move(out), ng);
  if (ng)
    t.record([&t, x, o] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      auto& gx = t.grad_buf(x);
      Real gv = g.data[0] / Real(gx.size());
      for (auto& v : gx.data) v += gv;
    });
  return o;
}

// Row-wise softmax of x / tau.
template <class Real>
Var<Real> softmax_rows(Tape<Real>& t, Var<Real> x, Real tau = Real(1)) {
  const auto& vx = t.value(x);
  detail::require(vx.cols >= 1, "softmax_rows: empty rows");
  if (tau <= Real(0)) throw ConfigError("softmax_rows: temperature must be positive");
  Tensor<Real> out(vx.rows, vx.cols);
  for (int r = 0; r < vx.rows; ++r) {
    Real m = vx.at(r, 0);
    for (int c = 1; c < vx.cols; ++c) m = std::max(m, vx.at(r, c));
    Real z = Real(0);
    for (int c = 0; c < vx.cols; ++c) {
      Real e = std::exp((vx.at(r, c) - m) / tau);
      out.at(r, c) = e;
      z += e;
    }
    for (int c = 0; c < vx.cols; ++c) out.at(r, c) /= z;
  }
  bool ng = t.requires_grad(x);
  auto o = t.make(std::move(out), ng);
  if (ng)
    t.record([&t, x, o, tau] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      const auto& y = t.value(o);
      auto& gx = t.grad_buf(x);
      for (int r = 0; r < y.rows; ++r) {
        Real dot = Real(0);
        for (int c = 0; c < y.cols; ++c) dot += g.at(r, c) * y.at(r, c);
        for (int c = 0; c < y.cols; ++c)
          gx.at(r, c) += y.at(r, c) * (g.at(r, c) - dot) / tau;
      }
    });
  return o;
}

// Per-row standardization followed by learned gain and bias (both [1 x d]).
// Variance is the population variance, stabilized by eps inside the root.
template <class Real>
Var<Real> layer_norm(Tape<Real>& t, Var<Real> x, Var<Real> gain, Var<Real> bias,
                     Real eps = Real(1e-5)) {
  const auto& vx = t.value(x);
  const auto& vg = t.value(gain);
  const auto& vb = t.value(bias);
  detail::require(vg.rows == 1 && vg.cols == vx.cols && vb.rows == 1 && vb.cols == vx.cols,
                  "layer_norm: gain/bias must be [1 x d] matching " + vx.shape_str());
  detail::require(vx.cols >= 1, "layer_norm: empty rows");
  Tensor<Real> out(vx.rows, vx.cols);
  int d = vx.cols;
  for (int r = 0; r < vx.rows; ++r) {
    Real mu = Real(0);
    for (int c = 0; c < d; ++c) mu += vx.at(r, c);
    mu /= Real(d);
    Real var = Real(0);
    for (int c = 0; c < d; ++c) {
      Real dvc = vx.at(r, c) - mu;
      var += dvc * dvc;
    }
    var /= Real(d);
    Real inv = Real(1) / std::sqrt(var + eps);
    for (int c = 0; c < d; ++c)
      out.at(r, c) = vg.at(0, c) * ((vx.at(r, c) - mu) * inv) + vb.at(0, c);
  }
  bool ng = t.requires_grad(x) || t.requires_grad(gain) || t.requires_grad(bias);
  auto o = t.make(std::move(out), ng);
  if (ng)
    t.record([&t, x, gain, bias, o, eps] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      const auto& vx2 = t.value(x);
      const auto& vg2 = t.value(gain);
      int d2 = vx2.cols;
      bool nx = t.requires_grad(x);
      bool ngain = t.requires_grad(gain);
      bool nbias = t.requires_grad(bias);
      std::vector<Real> xhat(static_cast<std::size_t>(d2));
      for (int r = 0; r < vx2.rows; ++r) {
        Real mu = Real(0);
        for (int c = 0; c < d2; ++c) mu += vx2.at(r, c);
        mu /= Real(d2);
        Real var = Real(0);
        for (int c = 0; c < d2; ++c) {
          Real dvc = vx2.at(r, c) - mu;
          var += dvc * dvc;
        }
        var /= Real(d2);
        Real inv = Real(1) / std::sqrt(var + eps);
        for (int c = 0; c < d2; ++c) xhat[static_cast<std::size_t>(c)] = (vx2.at(r, c) - mu) * inv;
        if (ngain) {
          auto& gg = t.grad_buf(gain);
          for (int c = 0; c < d2; ++c) gg.at(0, c) += g.at(r, c) * xhat[static_cast<std::size_t>(c)];
        }
        if (nbias) {
          auto& gb = t.grad_buf(bias);
          for (int c = 0; c < d2; ++c) gb.at(0, c) += g.at(r, c);
        }
        if (nx) {
          Real mean_gh = Real(0), mean_ghx = Real(0);
          for (int c = 0; c < d2; ++c) {
            Real gh = g.at(r, c) * vg2.at(0, c);
            mean_gh += gh;
            mean_ghx += gh * xhat[static_cast<std::size_t>(c)];
          }
          mean_gh /= Real(d2);
          mean_ghx /= Real(d2);
          auto& gx = t.grad_buf(x);
          for (int c = 0; c < d2; ++c) {
            Real gh = g.at(r, c) * vg2.at(0, c);
            gx.at(r, c) += inv * (gh - mean_gh - xhat[static_cast<std::size_t>(c)] * mean_ghx);
          }
        }
      }
    });
  return o;
}

template <class Real>
inline constexpr Real kMinDirectionNorm = Real(1e-5);

// Rows scaled to unit Euclidean norm. A row shorter than the norm floor has
// no usable direction and raises NumericError rather than being inflated.
template <class Real>
Var<Real> normalize_rows(Tape<Real>& t, Var<Real> x) {
  const auto& vx = t.value(x);
  Tensor<Real> out(vx.rows, vx.cols);
  for (int r = 0; r < vx.rows; ++r) {
    const Real* xr = vx.data.data() + static_cast<std::size_t>(r) * vx.cols;
    Real n = detail::seq_norm(xr, static_cast<std::size_t>(vx.cols));
    if (!(n >= kMinDirectionNorm<Real>))
      throw NumericError("normalize_rows: row " + std::to_string(r) + " has near-zero norm");
    detail::emap(out).row(r) = detail::emap(vx).row(r) / n;
  }
  bool ng = t.requires_grad(x);
  auto o = t.make(std::move(out), ng);
  if (ng)
    t.record([&t, x, o] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      const auto& vx2 = t.value(x);
      const auto& y = t.value(o);
      auto gx = detail::emap(t.grad_buf(x));
      auto cols = static_cast<std::size_t>(vx2.cols);
      for (int r = 0; r < vx2.rows; ++r) {
        std::size_t off = static_cast<std::size_t>(r) * cols;
        Real n = detail::seq_norm(vx2.data.data() + off, cols);
        Real dot = detail::seq_dot(g.data.data() + off, y.data.data() + off, cols);
        gx.row(r) += (detail::emap(g).row(r) - dot * detail::emap(y).row(r)) / n;
      }
    });
  return o;
}

// Per-row cosine similarity of paired rows: [m x d], [m x d] -> [m x 1].
// Output values are clamped to [-1, 1] to absorb rounding overshoot.
template <class Real>
Var<Real> rows_cosine(Tape<Real>& t, Var<Real> a, Var<Real> b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  detail::require(va.same_shape(vb),
                  "rows_cosine: shape mismatch " + va.shape_str() + " vs " + vb.shape_str());
  Tensor<Real> out(va.rows, 1);
  for (int r = 0; r < va.rows; ++r) {
    std::size_t off = static_cast<std::size_t>(r) * va.cols;
    const Real* ar = va.data.data() + off;
    const Real* br = vb.data.data() + off;
    auto cols = static_cast<std::size_t>(va.cols);
    Real na = detail::seq_norm(ar, cols);
    Real nb = detail::seq_norm(br, cols);
    if (!(na >= kMinDirectionNorm<Real>) || !(nb >= kMinDirectionNorm<Real>))
      throw NumericError("rows_cosine: row " + std::to_string(r) + " has near-zero norm");
    Real c = detail::seq_dot(ar, br, cols) / (na * nb);
    out.at(r, 0) = std::min(Real(1), std::max(Real(-1), c));
  }
  bool ng = t.requires_grad(a) || t.requires_grad(b);
  auto o = t.make(std::move(out), ng);
  if (ng)
    t.record([&t, a, b, o] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      const auto& va2 = t.value(a);
      const auto& vb2 = t.value(b);
      bool na_ = t.requires_grad(a);
      bool nb_ = t.requires_grad(b);
      for (int r = 0; r < va2.rows; ++r) {
        Real gv = g.at(r, 0);
        if (gv == Real(0)) continue;
        auto ar = detail::emap(va2).row(r);
        auto br = detail::emap(vb2).row(r);
        std::size_t off = static_cast<std::size_t>(r) * va2.cols;
        auto cols = static_cast<std::size_t>(va2.cols);
        Real na = detail::seq_norm(va2.data.data() + off, cols);
        Real nb = detail::seq_norm(vb2.data.data() + off, cols);
        Real c = detail::seq_dot(va2.data.data() + off, vb2.data.data() + off, cols) / (na * nb);
        if (na_)
          detail::emap(t.grad_buf(a)).row(r) += gv * (br / (na * nb) - c * ar / (na * na));
        if (nb_)
          detail::emap(t.grad_buf(b)).row(r) += gv * (ar / (na * nb) - c * br / (nb * nb));
      }
    });
  return o;
}

// Cosine similarity of two vectors (any orientation) as a [1 x 1] scalar.
template <class Real>
Var<Real> cosine(Tape<Real>& t, Var<Real> a, Var<Real> b) {
  auto as_row = [&t](Var<Real> v) {
    const auto& tv = t.value(v);
    detail::require(tv.rows == 1 || tv.cols == 1, "cosine: expected a vector, got " + tv.shape_str());
    return tv.rows == 1 ? v : reshape(t, v, 1, tv.rows);
  };
  return rows_cosine(t, as_row(a), as_row(b));
}

// ---------------------------------------------------------------------------
// Fused attention
// ---------------------------------------------------------------------------

struct AttentionGroup {
  int q_len = 0;
  int k_len = 0;
};

// Scaled dot-product attention over independent row groups, with the head
// dimension folded in. q/k are [sum(q_len) x dq] and [sum(k_len) x dq],
// v is [sum(k_len) x dv]; head h uses column block h of width dq/heads
// (dv/heads for v) and scales scores by 1/sqrt(dq/heads). Groups never
// attend across their row boundaries, which is what makes one call cover
// every outfit of a batch at once.
template <class Real>
Var<Real> multihead_grouped_attention(Tape<Real>& t, Var<Real> q, Var<Real> k, Var<Real> v,
                                      std::vector<AttentionGroup> groups, int heads) {
  const auto& vq = t.value(q);
  const auto& vk = t.value(k);
  const auto& vv = t.value(v);
  if (heads < 1) throw ConfigError("attention: head count must be positive");
  detail::require(vq.cols == vk.cols, "attention: q/k width mismatch");
  detail::require(vk.rows == vv.rows, "attention: k/v row mismatch");
  detail::require(vq.cols % heads == 0 && vv.cols % heads == 0,
                  "attention: widths must divide the head count");
  long q_total = 0, k_total = 0;
  for (const auto& gr : groups) {
    detail::require(gr.q_len >= 1 && gr.k_len >= 1, "attention: empty group");
    q_total += gr.q_len;
    k_total += gr.k_len;
  }
  detail::require(q_total == vq.rows && k_total == vk.rows,
                  "attention: group lengths do not cover the inputs");

  const int dqh = vq.cols / heads;
  const int dvh = vv.cols / heads;
  const Real scl = Real(1) / std::sqrt(Real(dqh));

  auto softmax_inplace = [](detail::EMat<Real>& s) {
    const auto cols = static_cast<std::size_t>(s.cols());
    for (int r = 0; r < s.rows(); ++r) {
      Real* row = s.data() + static_cast<std::size_t>(r) * cols;
      Real m = detail::seq_max(row, cols);
      for (std::size_t c = 0; c < cols; ++c) row[c] = std::exp(row[c] - m);
      Real z = detail::seq_sum(row, cols);
      for (std::size_t c = 0; c < cols; ++c) row[c] /= z;
    }
  };

  Tensor<Real> out(vq.rows, vv.cols);
  {
    auto mq = detail::emap(vq);
    auto mk = detail::emap(vk);
    auto mv = detail::emap(vv);
    auto mo = detail::emap(out);
    detail::EMat<Real> s;
    int qo = 0, ko = 0;
    for (const auto& gr : groups) {
      for (int h = 0; h < heads; ++h) {
        s.noalias() = mq.block(qo, h * dqh, gr.q_len, dqh) *
                      mk.block(ko, h * dqh, gr.k_len, dqh).transpose() * scl;
        softmax_inplace(s);
        mo.block(qo, h * dvh, gr.q_len, dvh).noalias() = s * mv.block(ko, h * dvh, gr.k_len, dvh);
      }
      qo += gr.q_len;
      ko += gr.k_len;
    }
  }

  bool ng = t.requires_grad(q) || t.requires_grad(k) || t.requires_grad(v);
  auto o = t.make(std::move(out), ng);
  if (ng) {
    auto shared = std::make_shared<std::vector<AttentionGroup>>(std::move(groups));
    t.record([&t, q, k, v, o, shared, heads, dqh, dvh, scl, softmax_inplace] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      auto mq = detail::emap(t.value(q));
      auto mk = detail::emap(t.value(k));
      auto mv = detail::emap(t.value(v));
      auto mg = detail::emap(g);
      bool nq = t.requires_grad(q), nk = t.requires_grad(k), nv = t.requires_grad(v);
      detail::EMat<Real> s, da, ds;
      int qo = 0, ko = 0;
      for (const auto& gr : *shared) {
        for (int h = 0; h < heads; ++h) {
          auto qb = mq.block(qo, h * dqh, gr.q_len, dqh);
          auto kb = mk.block(ko, h * dqh, gr.k_len, dqh);
          auto vb = mv.block(ko, h * dvh, gr.k_len, dvh);
          auto gb = mg.block(qo, h * dvh, gr.q_len, dvh);
          s.noalias() = qb * kb.transpose() * scl;
          softmax_inplace(s);
          da.noalias() = gb * vb.transpose();
          ds.resize(s.rows(), s.cols());
          const auto scols = static_cast<std::size_t>(s.cols());
          for (int r = 0; r < ds.rows(); ++r) {
            std::size_t off = static_cast<std::size_t>(r) * scols;
            Real row_dot = detail::seq_dot(s.data() + off, da.data() + off, scols);
            ds.row(r) = s.row(r).cwiseProduct((da.row(r).array() - row_dot).matrix());
          }
          if (nv)
            detail::emap(t.grad_buf(v)).block(ko, h * dvh, gr.k_len, dvh).noalias() +=
                s.transpose() * gb;
          if (nq)
            detail::emap(t.grad_buf(q)).block(qo, h * dqh, gr.q_len, dqh).noalias() +=
                ds * kb * scl;
          if (nk)
            detail::emap(t.grad_buf(k)).block(ko, h * dqh, gr.k_len, dqh).noalias() +=
                ds.transpose() * qb * scl;
        }
        qo += gr.q_len;
        ko += gr.k_len;
      }
    });
  }
  return o;
}

// Plain single-group scaled dot-product attention; q [n x dq], k [m x dq],
// v [m x dv].
template <class Real>
Var<Real> attention(Tape<Real>& t, Var<Real> q, Var<Real> k, Var<Real> v, int heads = 1) {
  return multihead_grouped_attention(t, q, k, v,
                                     {AttentionGroup{t.value(q).rows, t.value(k).rows}}, heads);
}

}  // namespace outfitlab::diff
