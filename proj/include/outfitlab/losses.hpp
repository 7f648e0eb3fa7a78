#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "outfitlab/tape.hpp"

namespace outfitlab::loss {

using diff::Tape;
using diff::Tensor;
using diff::Var;

// Pairwise ranking loss: mean softplus((neg - pos) / tau) over aligned
// [N x 1] score columns.
template <class Real>
Var<Real> bpr(Tape<Real>& t, Var<Real> pos, Var<Real> neg, Real tau) {
  const auto& vp = t.value(pos);
  const auto& vn = t.value(neg);
  if (vp.cols != 1 || vn.cols != 1 || vp.rows != vn.rows)
    throw DimensionError("bpr: expected matching [N x 1] score columns, got " + vp.shape_str() +
                         " and " + vn.shape_str());
  if (tau <= Real(0)) throw ConfigError("bpr: temperature must be positive");
  auto margin = scale(t, sub(t, neg, pos), Real(1) / tau);
  return mean_all(t, softplus(t, margin));
}

// Shared kernel behind the softmax ranking losses.
//
// Per pair i with positive score r0 and negative scores r_k, the loss is
//   l_i = -log( exp(r0/tau) / (exp(r0/tau) + sum_k exp(w_k r_k / tau)) )
// where w_k is an optional per-negative weight (identically 1 when absent).
// Computed in shifted form u_k = (w_k r_k - r0)/tau with M = max(0, max u):
//   l_i = M + log(exp(-M) + sum_k exp(u_k - M))
// so equal scores with unit weights give exactly log(N+1), and a weighted
// call with every weight exactly 1 follows the same float path as the
// unweighted one bit for bit.
//
// Gradients: with p = softmax over {positive, negatives} of the exponents,
//   dl/dr_k = p_k w_k / tau,  dl/dr0 = (p_0 - 1) / tau,
// scaled by 1/N from the outer mean.
template <class Real>
Var<Real> ranked_softmax_loss(Tape<Real>& t, Var<Real> pos, Var<Real> negs,
                              const Tensor<Real>* weights, Real tau) {
  const auto& vp = t.value(pos);
  const auto& vn = t.value(negs);
  if (vp.cols != 1 || vp.rows != vn.rows)
    throw DimensionError("ranked_softmax_loss: positives " + vp.shape_str() +
                         " do not align with negatives " + vn.shape_str());
  if (vn.cols < 1) throw DimensionError("ranked_softmax_loss: at least one negative per pair");
  if (weights && !weights->same_shape(vn))
    throw DimensionError("ranked_softmax_loss: weight shape " + weights->shape_str() +
                         " does not match negatives " + vn.shape_str());
  if (tau <= Real(0)) throw ConfigError("ranked_softmax_loss: temperature must be positive");

  const int n = vn.rows, m = vn.cols;
  std::shared_ptr<Tensor<Real>> w =
      weights ? std::make_shared<Tensor<Real>>(*weights) : nullptr;

  auto term = [w, tau](const Tensor<Real>& negv, int i, int k, Real r0) {
    Real rv = negv.at(i, k);
    Real tk = w ? w->at(i, k) * rv : rv;
    return (tk - r0) / tau;
  };

  Tensor<Real> out(1, 1);
  {
    Real total = Real(0);
    for (int i = 0; i < n; ++i) {
      Real r0 = vp.at(i, 0);
      Real mx = Real(0);
      for (int k = 0; k < m; ++k) mx = std::max(mx, term(vn, i, k, r0));
      Real z = std::exp(-mx);
      for (int k = 0; k < m; ++k) z += std::exp(term(vn, i, k, r0) - mx);
      total += mx + std::log(z);
    }
    out.data[0] = total / Real(n);
  }

  bool ng = t.requires_grad(pos) || t.requires_grad(negs);
  auto o = t.make(std::move(out), ng);
  if (ng)
    t.record([&t, pos, negs, o, w, tau, term, n, m] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      Real gv = g.data[0] / Real(n);
      const auto& vp2 = t.value(pos);
      const auto& vn2 = t.value(negs);
      bool np = t.requires_grad(pos), nn = t.requires_grad(negs);
      std::vector<Real> p(static_cast<std::size_t>(m));
      for (int i = 0; i < n; ++i) {
        Real r0 = vp2.at(i, 0);
        Real mx = Real(0);
        for (int k = 0; k < m; ++k) mx = std::max(mx, term(vn2, i, k, r0));
        Real p0 = std::exp(-mx);
        Real z = p0;
        for (int k = 0; k < m; ++k) {
          p[static_cast<std::size_t>(k)] = std::exp(term(vn2, i, k, r0) - mx);
          z += p[static_cast<std::size_t>(k)];
        }
        if (np) t.grad_buf(pos).at(i, 0) += gv * (p0 / z - Real(1)) / tau;
        if (nn) {
          auto& gn = t.grad_buf(negs);
          for (int k = 0; k < m; ++k) {
            Real wk = w ? w->at(i, k) : Real(1);
            gn.at(i, k) += gv * (p[static_cast<std::size_t>(k)] / z) * wk / tau;
          }
        }
      }
    });
  return o;
}

// Softmax ranking of each positive against its sampled negatives.
template <class Real>
Var<Real> npair(Tape<Real>& t, Var<Real> pos, Var<Real> negs, Real tau) {
  return ranked_softmax_loss(t, pos, negs, static_cast<const Tensor<Real>*>(nullptr), tau);
}

// Per-negative distillation signal: how far the teacher places candidate
// score rhat_neg below the user's positive boundary rhat_pos. Negative
// values flag candidates the teacher ranks above the boundary.
template <class Real>
Real false_negativeness(Real rhat_pos, Real rhat_neg, Real alpha) {
  return alpha * (rhat_pos - rhat_neg);
}

// Softmax ranking with teacher-derived per-negative weights. A weight
// matrix of exactly ones reproduces npair bit for bit.
template <class Real>
Var<Real> fnd(Tape<Real>& t, Var<Real> pos, Var<Real> negs, const Tensor<Real>& signals,
              Real tau) {
  return ranked_softmax_loss(t, pos, negs, &signals, tau);
}

// Normalized-temperature cross entropy over a precomputed similarity
// matrix of 2N views, where rows 2i and 2i+1 are the two views of pair i.
// Each row is an anchor whose partner must win against the other 2N-2
// rows; the diagonal is excluded.
template <class Real>
Var<Real> ntxent_from_similarity(Tape<Real>& t, Var<Real> sim, Real tau) {
  const auto& vs = t.value(sim);
  if (vs.rows != vs.cols || vs.rows < 2 || vs.rows % 2 != 0)
    throw DimensionError("ntxent: expected an even square similarity matrix, got " +
                         vs.shape_str());
  if (tau <= Real(0)) throw ConfigError("ntxent: temperature must be positive");
  const int n2 = vs.rows;

  Tensor<Real> out(1, 1);
  {
    Real total = Real(0);
    for (int a = 0; a < n2; ++a) {
      int partner = a ^ 1;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (int b = 0; b < n2; ++b)
        if (b != a) mx = std::max(mx, vs.at(a, b) / tau);
      Real z = Real(0);
      for (int b = 0; b < n2; ++b)
        if (b != a) z += std::exp(vs.at(a, b) / tau - mx);
      total += mx + std::log(z) - vs.at(a, partner) / tau;
    }
    out.data[0] = total / Real(n2);
  }

  bool ng = t.requires_grad(sim);
  auto o = t.make(std::move(out), ng);
  if (ng)
    t.record([&t, sim, o, tau, n2] {
      const auto& g = t.grad_of(o);
      if (g.data.empty()) return;
      Real gv = g.data[0] / Real(n2);
      const auto& vs2 = t.value(sim);
      auto& gs = t.grad_buf(sim);
      for (int a = 0; a < n2; ++a) {
        int partner = a ^ 1;
        Real mx = -std::numeric_limits<Real>::infinity();
        for (int b = 0; b < n2; ++b)
          if (b != a) mx = std::max(mx, vs2.at(a, b) / tau);
        Real z = Real(0);
        for (int b = 0; b < n2; ++b)
          if (b != a) z += std::exp(vs2.at(a, b) / tau - mx);
        for (int b = 0; b < n2; ++b) {
          if (b == a) continue;
          Real qb = std::exp(vs2.at(a, b) / tau - mx) / z;
          gs.at(a, b) += gv * (qb - Real(b == partner)) / tau;
        }
      }
    });
  return o;
}

// Contrastive loss over projected view representations [2N x d]: cosine
// similarities via row normalization, then the cross-entropy above.
template <class Real>
Var<Real> cl(Tape<Real>& t, Var<Real> projected_views, Real tau) {
  auto z = diff::normalize_rows(t, projected_views);
  auto sim = diff::matmul_nt(t, z, z);
  return ntxent_from_similarity(t, sim, tau);
}

// Distillation plus lambda-weighted contrastive term. Callers that want
// the lambda = 0 path to match a bare distillation run bit for bit must
// skip building the contrastive branch and not call this.
template <class Real>
Var<Real> fnd_cl(Tape<Real>& t, Var<Real> fnd_loss, Var<Real> cl_loss, Real lambda) {
  return add(t, fnd_loss, scale(t, cl_loss, lambda));
}

}  // namespace outfitlab::loss
