#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "reclab/nn/tape.hpp"
#include "reclab/rng.hpp"

// Differentiable primitives. Each op evaluates eagerly with Eigen and
// registers a backward closure on the tape. Gradients accumulate (+=)
// into parents, so shared subexpressions are handled naturally.
namespace reclab::nn {

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  bool rg = t.wants_grad(a.id) || t.wants_grad(b.id);
  int ai = a.id, bi = b.id;
  return t.push(a.value() + b.value(), rg, [ai, bi](Tape<S>& t, const Mat<S>& g) {
    if (t.wants_grad(ai)) t.grad_ref(ai) += g;
    if (t.wants_grad(bi)) t.grad_ref(bi) += g;
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  bool rg = t.wants_grad(a.id) || t.wants_grad(b.id);
  int ai = a.id, bi = b.id;
  return t.push(a.value() - b.value(), rg, [ai, bi](Tape<S>& t, const Mat<S>& g) {
    if (t.wants_grad(ai)) t.grad_ref(ai) += g;
    if (t.wants_grad(bi)) t.grad_ref(bi) -= g;
  });
}

template <typename S>
Var<S> neg(Var<S> a) {
  Tape<S>& t = *a.tape;
  int ai = a.id;
  return t.push(-a.value(), t.wants_grad(ai), [ai](Tape<S>& t, const Mat<S>& g) {
    if (t.wants_grad(ai)) t.grad_ref(ai) -= g;
  });
}

// Broadcast a 1xC row vector over all rows (bias add).
template <typename S>
Var<S> add_rowvec(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  require(b.rows() == 1 && b.cols() == a.cols(), "add_rowvec: b must be 1 x cols(a)");
  bool rg = t.wants_grad(a.id) || t.wants_grad(b.id);
  int ai = a.id, bi = b.id;
  Mat<S> y = a.value();
  y.rowwise() += b.value().row(0);
  return t.push(std::move(y), rg, [ai, bi](Tape<S>& t, const Mat<S>& g) {
    if (t.wants_grad(ai)) t.grad_ref(ai) += g;
    if (t.wants_grad(bi)) t.grad_ref(bi).row(0) += g.colwise().sum();
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {  // elementwise
  Tape<S>& t = *a.tape;
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  bool rg = t.wants_grad(a.id) || t.wants_grad(b.id);
  int ai = a.id, bi = b.id;
  return t.push(a.value().cwiseProduct(b.value()), rg, [ai, bi](Tape<S>& t, const Mat<S>& g) {
    if (t.wants_grad(ai)) t.grad_ref(ai) += g.cwiseProduct(t.node(bi).value);
    if (t.wants_grad(bi)) t.grad_ref(bi) += g.cwiseProduct(t.node(ai).value);
  });
}

// Elementwise product with a constant matrix (labels, dropout masks, ...).
template <typename S>
Var<S> cmul(Var<S> a, const Mat<S>& c) {
  Tape<S>& t = *a.tape;
  require(a.rows() == c.rows() && a.cols() == c.cols(), "cmul: shape mismatch");
  int ai = a.id;
  auto cp = std::make_shared<Mat<S>>(c);
  return t.push(a.value().cwiseProduct(c), t.wants_grad(ai),
                [ai, cp](Tape<S>& t, const Mat<S>& g) {
                  if (t.wants_grad(ai)) t.grad_ref(ai) += g.cwiseProduct(*cp);
                });
}

template <typename S>
Var<S> scale(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  int ai = a.id;
  return t.push(a.value() * c, t.wants_grad(ai), [ai, c](Tape<S>& t, const Mat<S>& g) {
    if (t.wants_grad(ai)) t.grad_ref(ai) += c * g;
  });
}

// Add a constant matrix (attention masks, level masks).
template <typename S>
Var<S> add_const(Var<S> a, const Mat<S>& c) {
  Tape<S>& t = *a.tape;
  require(a.rows() == c.rows() && a.cols() == c.cols(), "add_const: shape mismatch");
  int ai = a.id;
  return t.push(a.value() + c, t.wants_grad(ai), [ai](Tape<S>& t, const Mat<S>& g) {
    if (t.wants_grad(ai)) t.grad_ref(ai) += g;
  });
}

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  bool rg = t.wants_grad(a.id) || t.wants_grad(b.id);
  int ai = a.id, bi = b.id;
  Mat<S> y(a.rows(), b.cols());
  y.noalias() = a.value() * b.value();
  return t.push(std::move(y), rg, [ai, bi](Tape<S>& t, const Mat<S>& g) {
    if (t.wants_grad(ai)) t.grad_ref(ai).noalias() += g * t.node(bi).value.transpose();
    if (t.wants_grad(bi)) t.grad_ref(bi).noalias() += t.node(ai).value.transpose() * g;
  });
}

// a * b^T; the attention-score and tied-output shape.
template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  require(a.cols() == b.cols(), "matmul_nt: inner dimension mismatch");
  bool rg = t.wants_grad(a.id) || t.wants_grad(b.id);
  int ai = a.id, bi = b.id;
  Mat<S> y(a.rows(), b.rows());
  y.noalias() = a.value() * b.value().transpose();
  return t.push(std::move(y), rg, [ai, bi](Tape<S>& t, const Mat<S>& g) {
    if (t.wants_grad(ai)) t.grad_ref(ai).noalias() += g * t.node(bi).value;
    if (t.wants_grad(bi)) t.grad_ref(bi).noalias() += g.transpose() * t.node(ai).value;
  });
}

template <typename S>
Var<S> relu(Var<S> a) {
  Tape<S>& t = *a.tape;
  int ai = a.id;
  return t.push(a.value().cwiseMax(S(0)), t.wants_grad(ai),
                [ai](Tape<S>& t, const Mat<S>& g) {
                  if (!t.wants_grad(ai)) return;
                  const Mat<S>& x = t.node(ai).value;
                  t.grad_ref(ai) += g.cwiseProduct(
                      (x.array() > S(0)).template cast<S>().matrix());
                });
}

template <typename S>
Var<S> softmax_rows(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> y = a.value();
  for (Index r = 0; r < y.rows(); ++r) {
    auto row = y.row(r).array();
    row -= row.maxCoeff();
    row = row.exp();
    row /= row.sum();
  }
  int ai = a.id;
  auto yp = std::make_shared<Mat<S>>(y);
  return t.push(std::move(y), t.wants_grad(ai), [ai, yp](Tape<S>& t, const Mat<S>& g) {
    if (!t.wants_grad(ai)) return;
    // dx = y .* (g - rowsum(g .* y))
    Vec<S> rs = g.cwiseProduct(*yp).rowwise().sum();
    t.grad_ref(ai) += yp->cwiseProduct(g.colwise() - rs);
  });
}

template <typename S>
Var<S> softplus(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> y = a.value().unaryExpr([](S x) {
    // log(1 + e^x), overflow-safe on both tails
    return x > S(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  });
  int ai = a.id;
  return t.push(std::move(y), t.wants_grad(ai), [ai](Tape<S>& t, const Mat<S>& g) {
    if (!t.wants_grad(ai)) return;
    const Mat<S>& x = t.node(ai).value;
    t.grad_ref(ai) += g.cwiseProduct(x.unaryExpr(
        [](S v) { return S(1) / (S(1) + std::exp(-v)); }));
  });
}

template <typename S>
Var<S> exp_op(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> y = a.value().array().exp().matrix();
  int ai = a.id;
  auto yp = std::make_shared<Mat<S>>(y);
  return t.push(std::move(y), t.wants_grad(ai), [ai, yp](Tape<S>& t, const Mat<S>& g) {
    if (t.wants_grad(ai)) t.grad_ref(ai) += g.cwiseProduct(*yp);
  });
}

template <typename S>
Var<S> l2_normalize_rows(Var<S> a, S eps = S(1e-12)) {
  Tape<S>& t = *a.tape;
  Mat<S> y = a.value();
  Vec<S> inv_norm(y.rows());
  for (Index r = 0; r < y.rows(); ++r) {
    S n = std::sqrt(y.row(r).squaredNorm() + eps);
    inv_norm(r) = S(1) / n;
    y.row(r) *= inv_norm(r);
  }
  int ai = a.id;
  auto yp = std::make_shared<Mat<S>>(y);
  auto ip = std::make_shared<Vec<S>>(std::move(inv_norm));
  return t.push(std::move(y), t.wants_grad(ai),
                [ai, yp, ip](Tape<S>& t, const Mat<S>& g) {
                  if (!t.wants_grad(ai)) return;
                  Mat<S>& ga = t.grad_ref(ai);
                  for (Index r = 0; r < g.rows(); ++r) {
                    S dot = g.row(r).dot(yp->row(r));
                    ga.row(r) += (*ip)(r) * (g.row(r) - dot * yp->row(r));
                  }
                });
}

// Row-wise layer norm with learnable 1xC gain/bias.
template <typename S>
Var<S> layer_norm_rows(Var<S> a, Var<S> gain, Var<S> bias, S eps = S(1e-5)) {
  Tape<S>& t = *a.tape;
  const Index C = a.cols();
  require(gain.rows() == 1 && gain.cols() == C, "layer_norm: gain must be 1 x cols");
  require(bias.rows() == 1 && bias.cols() == C, "layer_norm: bias must be 1 x cols");
  Mat<S> xhat(a.rows(), C);
  Vec<S> inv_std(a.rows());
  for (Index r = 0; r < a.rows(); ++r) {
    auto row = a.value().row(r).array();
    S mu = row.mean();
    S var = (row - mu).square().mean();
    S inv = S(1) / std::sqrt(var + eps);
    inv_std(r) = inv;
    xhat.row(r) = ((row - mu) * inv).matrix();
  }
  Mat<S> y = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  y.rowwise() += bias.value().row(0);
  bool rg = t.wants_grad(a.id) || t.wants_grad(gain.id) || t.wants_grad(bias.id);
  int ai = a.id, gi = gain.id, bi = bias.id;
  auto xp = std::make_shared<Mat<S>>(std::move(xhat));
  auto sp = std::make_shared<Vec<S>>(std::move(inv_std));
  return t.push(std::move(y), rg, [ai, gi, bi, xp, sp](Tape<S>& t, const Mat<S>& g) {
    const Mat<S>& xh = *xp;
    if (t.wants_grad(gi)) t.grad_ref(gi).row(0) += g.cwiseProduct(xh).colwise().sum();
    if (t.wants_grad(bi)) t.grad_ref(bi).row(0) += g.colwise().sum();
    if (t.wants_grad(ai)) {
      Mat<S> dxh =
          (g.array().rowwise() * t.node(gi).value.row(0).array()).matrix();
      Mat<S>& ga = t.grad_ref(ai);
      for (Index r = 0; r < g.rows(); ++r) {
        S m1 = dxh.row(r).mean();
        S m2 = dxh.row(r).cwiseProduct(xh.row(r)).mean();
        ga.row(r) += ((*sp)(r) * (dxh.row(r).array() - m1 - xh.row(r).array() * m2))
                         .matrix();
      }
    }
  });
}

// Embedding lookup: output row r = table row idx[r].
template <typename S>
Var<S> gather_rows(Var<S> table, std::vector<Index> idx) {
  Tape<S>& t = *table.tape;
  Mat<S> y(static_cast<Index>(idx.size()), table.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    require(idx[r] >= 0 && idx[r] < table.rows(), "gather_rows: index out of range");
    y.row(static_cast<Index>(r)) = table.value().row(idx[r]);
  }
  int ti = table.id;
  auto ip = std::make_shared<std::vector<Index>>(std::move(idx));
  return t.push(std::move(y), t.wants_grad(ti), [ti, ip](Tape<S>& t, const Mat<S>& g) {
    if (!t.wants_grad(ti)) return;
    Mat<S>& gt = t.grad_ref(ti);
    for (std::size_t r = 0; r < ip->size(); ++r)
      gt.row((*ip)[r]) += g.row(static_cast<Index>(r));
  });
}

template <typename S>
Var<S> slice_cols(Var<S> a, Index c0, Index w) {
  Tape<S>& t = *a.tape;
  require(c0 >= 0 && c0 + w <= a.cols(), "slice_cols: out of range");
  int ai = a.id;
  return t.push(a.value().middleCols(c0, w), t.wants_grad(ai),
                [ai, c0, w](Tape<S>& t, const Mat<S>& g) {
                  if (t.wants_grad(ai)) t.grad_ref(ai).middleCols(c0, w) += g;
                });
}

template <typename S>
Var<S> slice_rows(Var<S> a, Index r0, Index h) {
  Tape<S>& t = *a.tape;
  require(r0 >= 0 && r0 + h <= a.rows(), "slice_rows: out of range");
  int ai = a.id;
  return t.push(a.value().middleRows(r0, h), t.wants_grad(ai),
                [ai, r0, h](Tape<S>& t, const Mat<S>& g) {
                  if (t.wants_grad(ai)) t.grad_ref(ai).middleRows(r0, h) += g;
                });
}

template <typename S>
Var<S> block(Var<S> a, Index r0, Index c0, Index h, Index w) {
  Tape<S>& t = *a.tape;
  require(r0 >= 0 && c0 >= 0 && r0 + h <= a.rows() && c0 + w <= a.cols(),
          "block: out of range");
  int ai = a.id;
  return t.push(a.value().block(r0, c0, h, w), t.wants_grad(ai),
                [ai, r0, c0, h, w](Tape<S>& t, const Mat<S>& g) {
                  if (t.wants_grad(ai)) t.grad_ref(ai).block(r0, c0, h, w) += g;
                });
}

template <typename S>
Var<S> vstack(const std::vector<Var<S>>& parts) {
  require(!parts.empty(), "vstack: empty input");
  Tape<S>& t = *parts[0].tape;
  Index cols = parts[0].cols(), rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require(p.cols() == cols, "vstack: column mismatch");
    rows += p.rows();
    rg = rg || t.wants_grad(p.id);
  }
  Mat<S> y(rows, cols);
  std::vector<int> ids;
  std::vector<Index> heights;
  Index r = 0;
  for (const auto& p : parts) {
    y.middleRows(r, p.rows()) = p.value();
    ids.push_back(p.id);
    heights.push_back(p.rows());
    r += p.rows();
  }
  auto idp = std::make_shared<std::vector<int>>(std::move(ids));
  auto hp = std::make_shared<std::vector<Index>>(std::move(heights));
  return t.push(std::move(y), rg, [idp, hp](Tape<S>& t, const Mat<S>& g) {
    Index r = 0;
    for (std::size_t i = 0; i < idp->size(); ++i) {
      if (t.wants_grad((*idp)[i]))
        t.grad_ref((*idp)[i]) += g.middleRows(r, (*hp)[i]);
      r += (*hp)[i];
    }
  });
}

template <typename S>
Var<S> hstack(const std::vector<Var<S>>& parts) {
  require(!parts.empty(), "hstack: empty input");
  Tape<S>& t = *parts[0].tape;
  Index rows = parts[0].rows(), cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require(p.rows() == rows, "hstack: row mismatch");
    cols += p.cols();
    rg = rg || t.wants_grad(p.id);
  }
  Mat<S> y(rows, cols);
  std::vector<int> ids;
  std::vector<Index> widths;
  Index c = 0;
  for (const auto& p : parts) {
    y.middleCols(c, p.cols()) = p.value();
    ids.push_back(p.id);
    widths.push_back(p.cols());
    c += p.cols();
  }
  auto idp = std::make_shared<std::vector<int>>(std::move(ids));
  auto wp = std::make_shared<std::vector<Index>>(std::move(widths));
  return t.push(std::move(y), rg, [idp, wp](Tape<S>& t, const Mat<S>& g) {
    Index c = 0;
    for (std::size_t i = 0; i < idp->size(); ++i) {
      if (t.wants_grad((*idp)[i]))
        t.grad_ref((*idp)[i]) += g.middleCols(c, (*wp)[i]);
      c += (*wp)[i];
    }
  });
}

// Interleave row groups: output row block p is [na rows of a | nb rows of b].
// Used to build per-position decoder inputs [context ; code embeddings].
template <typename S>
Var<S> row_interleave(Var<S> a, Var<S> b, Index na, Index nb) {
  Tape<S>& t = *a.tape;
  require(a.cols() == b.cols(), "row_interleave: column mismatch");
  require(na > 0 && nb >= 0, "row_interleave: invalid group sizes");
  require(a.rows() % na == 0, "row_interleave: a rows not divisible");
  const Index P = a.rows() / na;
  require(b.rows() == P * nb, "row_interleave: b rows inconsistent");
  Mat<S> y(P * (na + nb), a.cols());
  for (Index p = 0; p < P; ++p) {
    y.middleRows(p * (na + nb), na) = a.value().middleRows(p * na, na);
    if (nb > 0)
      y.middleRows(p * (na + nb) + na, nb) = b.value().middleRows(p * nb, nb);
  }
  bool rg = t.wants_grad(a.id) || t.wants_grad(b.id);
  int ai = a.id, bi = b.id;
  return t.push(std::move(y), rg, [ai, bi, na, nb, P](Tape<S>& t, const Mat<S>& g) {
    for (Index p = 0; p < P; ++p) {
      if (t.wants_grad(ai))
        t.grad_ref(ai).middleRows(p * na, na) += g.middleRows(p * (na + nb), na);
      if (nb > 0 && t.wants_grad(bi))
        t.grad_ref(bi).middleRows(p * nb, nb) +=
            g.middleRows(p * (na + nb) + na, nb);
    }
  });
}

// Sum consecutive groups of `group` rows: (P*group) x C -> P x C.
// The code-embedding fusion shape.
template <typename S>
Var<S> sum_row_groups(Var<S> a, Index group) {
  Tape<S>& t = *a.tape;
  require(group > 0 && a.rows() % group == 0, "sum_row_groups: bad group size");
  const Index P = a.rows() / group;
  Mat<S> y = Mat<S>::Zero(P, a.cols());
  for (Index p = 0; p < P; ++p)
    for (Index j = 0; j < group; ++j) y.row(p) += a.value().row(p * group + j);
  int ai = a.id;
  return t.push(std::move(y), t.wants_grad(ai),
                [ai, group, P](Tape<S>& t, const Mat<S>& g) {
                  if (!t.wants_grad(ai)) return;
                  Mat<S>& ga = t.grad_ref(ai);
                  for (Index p = 0; p < P; ++p)
                    for (Index j = 0; j < group; ++j) ga.row(p * group + j) += g.row(p);
                });
}

template <typename S>
Var<S> rowwise_dot(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  require(a.rows() == b.rows() && a.cols() == b.cols(), "rowwise_dot: shape mismatch");
  Mat<S> y(a.rows(), 1);
  for (Index r = 0; r < a.rows(); ++r) y(r, 0) = a.value().row(r).dot(b.value().row(r));
  bool rg = t.wants_grad(a.id) || t.wants_grad(b.id);
  int ai = a.id, bi = b.id;
  return t.push(std::move(y), rg, [ai, bi](Tape<S>& t, const Mat<S>& g) {
    if (t.wants_grad(ai))
      t.grad_ref(ai) +=
          (t.node(bi).value.array().colwise() * g.col(0).array()).matrix();
    if (t.wants_grad(bi))
      t.grad_ref(bi) +=
          (t.node(ai).value.array().colwise() * g.col(0).array()).matrix();
  });
}

template <typename S>
Var<S> sum_all(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> y(1, 1);
  y(0, 0) = a.value().sum();
  int ai = a.id;
  return t.push(std::move(y), t.wants_grad(ai), [ai](Tape<S>& t, const Mat<S>& g) {
    if (t.wants_grad(ai)) t.grad_ref(ai).array() += g(0, 0);
  });
}

template <typename S>
Var<S> mean_all(Var<S> a) {
  return scale(sum_all(a), S(1) / S(a.rows() * a.cols()));
}

// Sum of squared entries as a 1x1 scalar.
template <typename S>
Var<S> sq_norm(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> y(1, 1);
  y(0, 0) = a.value().squaredNorm();
  int ai = a.id;
  return t.push(std::move(y), t.wants_grad(ai), [ai](Tape<S>& t, const Mat<S>& g) {
    if (t.wants_grad(ai)) t.grad_ref(ai) += (S(2) * g(0, 0)) * t.node(ai).value;
  });
}

// sum(a .* w) for a constant weight matrix; the generic weighted reduction.
template <typename S>
Var<S> weighted_sum(Var<S> a, const Mat<S>& w) {
  Tape<S>& t = *a.tape;
  require(a.rows() == w.rows() && a.cols() == w.cols(), "weighted_sum: shape mismatch");
  Mat<S> y(1, 1);
  y(0, 0) = a.value().cwiseProduct(w).sum();
  int ai = a.id;
  auto wp = std::make_shared<Mat<S>>(w);
  return t.push(std::move(y), t.wants_grad(ai), [ai, wp](Tape<S>& t, const Mat<S>& g) {
    if (t.wants_grad(ai)) t.grad_ref(ai) += g(0, 0) * (*wp);
  });
}

// y = s * x where s is a learnable 1x1 scalar.
template <typename S>
Var<S> scale_by(Var<S> x, Var<S> s) {
  Tape<S>& t = *x.tape;
  require(s.value().size() == 1, "scale_by: s must be 1x1");
  bool rg = t.wants_grad(x.id) || t.wants_grad(s.id);
  int xi = x.id, si = s.id;
  return t.push(x.value() * s.scalar(), rg, [xi, si](Tape<S>& t, const Mat<S>& g) {
    if (t.wants_grad(xi)) t.grad_ref(xi) += t.node(si).value(0, 0) * g;
    if (t.wants_grad(si))
      t.grad_ref(si)(0, 0) += g.cwiseProduct(t.node(xi).value).sum();
  });
}

// y = x + s (broadcast 1x1 scalar).
template <typename S>
Var<S> add_scalar(Var<S> x, Var<S> s) {
  Tape<S>& t = *x.tape;
  require(s.value().size() == 1, "add_scalar: s must be 1x1");
  bool rg = t.wants_grad(x.id) || t.wants_grad(s.id);
  int xi = x.id, si = s.id;
  Mat<S> y = x.value().array() + s.scalar();
  return t.push(std::move(y), rg, [xi, si](Tape<S>& t, const Mat<S>& g) {
    if (t.wants_grad(xi)) t.grad_ref(xi) += g;
    if (t.wants_grad(si)) t.grad_ref(si)(0, 0) += g.sum();
  });
}

template <typename S>
Var<S> stop_gradient(Var<S> a) {
  return a.tape->leaf(a.value(), false);
}

// Forward takes `post`'s value; backward routes the whole gradient to `pre`
// (the pre-quantization input), skipping the non-differentiable step.
template <typename S>
Var<S> straight_through(Var<S> pre, Var<S> post) {
  Tape<S>& t = *pre.tape;
  require(pre.rows() == post.rows() && pre.cols() == post.cols(),
          "straight_through: shape mismatch");
  int pi = pre.id;
  return t.push(post.value(), t.wants_grad(pi), [pi](Tape<S>& t, const Mat<S>& g) {
    if (t.wants_grad(pi)) t.grad_ref(pi) += g;
  });
}

// Inverted dropout; identity when not training or rate is zero.
template <typename S>
Var<S> dropout(Var<S> a, double rate, Rng& rng, bool train) {
  if (!train || rate <= 0.0) return a;
  require(rate < 1.0, "dropout: rate must be in [0, 1)");
  Tape<S>& t = *a.tape;
  Mat<S> mask(a.rows(), a.cols());
  const S keep_scale = S(1.0 / (1.0 - rate));
  for (Index r = 0; r < mask.rows(); ++r)
    for (Index c = 0; c < mask.cols(); ++c)
      mask(r, c) = rng.uniform() < rate ? S(0) : keep_scale;
  return cmul(a, mask);
}

// Mean cross-entropy of row-wise logits against integer targets.
// Rows must already be restricted to supervised positions.
template <typename S>
Var<S> cross_entropy_mean(Var<S> logits, std::vector<Index> targets) {
  Tape<S>& t = *logits.tape;
  const Index R = logits.rows();
  require(static_cast<Index>(targets.size()) == R, "cross_entropy: target count mismatch");
  require(R > 0, "cross_entropy: empty batch");
  Mat<S> y(1, 1);
  S total = S(0);
  for (Index r = 0; r < R; ++r) {
    require(targets[static_cast<std::size_t>(r)] >= 0 &&
                targets[static_cast<std::size_t>(r)] < logits.cols(),
            "cross_entropy: target out of range");
    auto row = logits.value().row(r).array();
    S m = row.maxCoeff();
    S lse = m + std::log((row - m).exp().sum());
    total += lse - row(targets[static_cast<std::size_t>(r)]);
  }
  y(0, 0) = total / S(R);
  int li = logits.id;
  auto tp = std::make_shared<std::vector<Index>>(std::move(targets));
  return t.push(std::move(y), t.wants_grad(li), [li, tp](Tape<S>& t, const Mat<S>& g) {
    if (!t.wants_grad(li)) return;
    const Mat<S>& x = t.node(li).value;
    Mat<S>& gl = t.grad_ref(li);
    const S w = g(0, 0) / S(x.rows());
    for (Index r = 0; r < x.rows(); ++r) {
      auto row = x.row(r).array();
      S m = row.maxCoeff();
      Eigen::Array<S, 1, Eigen::Dynamic> p = (row - m).exp();
      p /= p.sum();
      gl.row(r) += (w * p).matrix();
      gl(r, (*tp)[static_cast<std::size_t>(r)]) -= w;
    }
  });
}

// y = x W + b with b a 1xC bias row.
template <typename S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b) {
  return add_rowvec(matmul(x, w), b);
}

}  // namespace reclab::nn
