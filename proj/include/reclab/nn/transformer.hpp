#pragma once

#include <string>
#include <vector>

#include "reclab/nn/ops.hpp"
#include "reclab/nn/params.hpp"

namespace reclab::nn {

// Additive mask value that exp() maps to exactly zero in both float and
// double without producing Inf in the logits.
template <typename S>
constexpr S kMaskedScore = S(-1e30);

struct TransformerConfig {
  Index dim = 256;
  Index layers = 2;
  Index head_dim = 64;
  double dropout = 0.0;
  bool causal = true;
  Index max_positions = 512;

  Index heads() const { return dim / head_dim; }
  Index mlp_hidden() const { return 4 * dim; }

  void validate() const {
    require_config(dim > 0 && layers > 0 && head_dim > 0, "transformer: bad sizes");
    require_config(dim % head_dim == 0, "transformer: dim not divisible by head_dim");
    require_config(dropout >= 0.0 && dropout < 1.0, "transformer: dropout not in [0,1)");
    require_config(max_positions > 0, "transformer: max_positions must be positive");
  }
};

// Registers the stack's parameters under `prefix`. Weight matrices are
// truncated-normal (std 0.02), biases zero, layer-norm gains one.
template <typename S>
void add_transformer_params(ParamStore<S>& p, const std::string& prefix,
                            const TransformerConfig& cfg, Rng& rng) {
  cfg.validate();
  p.add_truncated_normal(prefix + ".pos", cfg.max_positions, cfg.dim, rng);
  for (Index l = 0; l < cfg.layers; ++l) {
    std::string lp = prefix + ".l" + std::to_string(l);
    p.add_ones(lp + ".ln1.g", 1, cfg.dim);
    p.add_zeros(lp + ".ln1.b", 1, cfg.dim);
    for (const char* n : {".wq", ".wk", ".wv", ".wo"})
      p.add_truncated_normal(lp + n, cfg.dim, cfg.dim, rng);
    for (const char* n : {".bq", ".bk", ".bv", ".bo"}) p.add_zeros(lp + n, 1, cfg.dim);
    p.add_ones(lp + ".ln2.g", 1, cfg.dim);
    p.add_zeros(lp + ".ln2.b", 1, cfg.dim);
    p.add_truncated_normal(lp + ".w1", cfg.dim, cfg.mlp_hidden(), rng);
    p.add_zeros(lp + ".b1", 1, cfg.mlp_hidden());
    p.add_truncated_normal(lp + ".w2", cfg.mlp_hidden(), cfg.dim, rng);
    p.add_zeros(lp + ".b2", 1, cfg.dim);
  }
}

template <typename S>
Mat<S> causal_mask(Index n) {
  Mat<S> m = Mat<S>::Zero(n, n);
  for (Index r = 0; r < n; ++r)
    for (Index c = r + 1; c < n; ++c) m(r, c) = kMaskedScore<S>;
  return m;
}

// Pre-norm transformer over a batch of equal-length sequences stacked along
// rows: row b*seq_len + s is token s of sequence b. Adds learned absolute
// position embeddings to the inputs; no final layer norm, so a stack with
// zeroed attention/MLP weights is the identity on (input + positions).
// Dropout sits on attention weights and MLP outputs, training mode only.
template <typename S>
Var<S> transformer_forward(Binder<S>& p, const std::string& prefix, Var<S> tokens,
                           Index batch, Index seq_len, const TransformerConfig& cfg,
                           bool train, Rng& rng) {
  cfg.validate();
  require(tokens.cols() == cfg.dim, "transformer_forward: token dim mismatch");
  require(tokens.rows() == batch * seq_len, "transformer_forward: row count mismatch");
  require_config(seq_len <= cfg.max_positions,
                 "transformer_forward: sequence exceeds max positions");

  std::vector<Index> pos_idx;
  pos_idx.reserve(static_cast<std::size_t>(batch * seq_len));
  for (Index b = 0; b < batch; ++b)
    for (Index s = 0; s < seq_len; ++s) pos_idx.push_back(s);
  Var<S> x = add(tokens, gather_rows(p(prefix + ".pos"), std::move(pos_idx)));

  const Index H = cfg.heads(), dh = cfg.head_dim;
  const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(dh));
  Mat<S> mask = cfg.causal ? causal_mask<S>(seq_len) : Mat<S>();

  for (Index l = 0; l < cfg.layers; ++l) {
    std::string lp = prefix + ".l" + std::to_string(l);
    Var<S> h = layer_norm_rows(x, p(lp + ".ln1.g"), p(lp + ".ln1.b"));
    Var<S> q = linear(h, p(lp + ".wq"), p(lp + ".bq"));
    Var<S> k = linear(h, p(lp + ".wk"), p(lp + ".bk"));
    Var<S> v = linear(h, p(lp + ".wv"), p(lp + ".bv"));

    std::vector<Var<S>> rows_out;
    rows_out.reserve(static_cast<std::size_t>(batch));
    for (Index b = 0; b < batch; ++b) {
      std::vector<Var<S>> heads;
      heads.reserve(static_cast<std::size_t>(H));
      for (Index hd = 0; hd < H; ++hd) {
        Var<S> qh = block(q, b * seq_len, hd * dh, seq_len, dh);
        Var<S> kh = block(k, b * seq_len, hd * dh, seq_len, dh);
        Var<S> vh = block(v, b * seq_len, hd * dh, seq_len, dh);
        Var<S> scores = scale(matmul_nt(qh, kh), inv_sqrt_dh);
        if (cfg.causal) scores = add_const(scores, mask);
        Var<S> attn = dropout(softmax_rows(scores), cfg.dropout, rng, train);
        heads.push_back(matmul(attn, vh));
      }
      rows_out.push_back(hstack(heads));
    }
    Var<S> o = batch == 1 ? rows_out[0] : vstack(rows_out);
    x = add(x, linear(o, p(lp + ".wo"), p(lp + ".bo")));

    Var<S> h2 = layer_norm_rows(x, p(lp + ".ln2.g"), p(lp + ".ln2.b"));
    Var<S> m = linear(relu(linear(h2, p(lp + ".w1"), p(lp + ".b1"))),
                      p(lp + ".w2"), p(lp + ".b2"));
    x = add(x, dropout(m, cfg.dropout, rng, train));
  }
  return x;
}

// Per-layer key/value rows accumulated during incremental decoding.
template <typename S>
struct KvCache {
  std::vector<Mat<S>> k, v;
  Index len = 0;
};

// Evaluation-mode forward passes reading parameters straight from the
// store, with optional KV caching for causal stacks. The tape path above
// and this one compute the same function; tests pin their agreement.
template <typename S>
class TransformerInfer {
 public:
  TransformerInfer(const ParamStore<S>& store, std::string prefix, TransformerConfig cfg)
      : store_(&store), prefix_(std::move(prefix)), cfg_(cfg) {
    cfg_.validate();
  }

  const TransformerConfig& config() const { return cfg_; }

  KvCache<S> make_cache() const {
    KvCache<S> c;
    c.k.assign(static_cast<std::size_t>(cfg_.layers), Mat<S>());
    c.v.assign(static_cast<std::size_t>(cfg_.layers), Mat<S>());
    return c;
  }

  // Full pass over one sequence (N x dim) -> (N x dim).
  Mat<S> forward(const Mat<S>& tokens) const {
    require_config(tokens.rows() <= cfg_.max_positions,
                   "transformer: sequence exceeds max positions");
    const Index n = tokens.rows();
    Mat<S> x = tokens + w(".pos").topRows(n);
    Mat<S> mask = cfg_.causal ? causal_mask<S>(n) : Mat<S>();
    for (Index l = 0; l < cfg_.layers; ++l) x = layer_eval(x, l, mask);
    return x;
  }

  // Appends new tokens to the cache; returns outputs for the new rows only.
  Mat<S> forward_incremental(const Mat<S>& tokens, KvCache<S>& cache) const {
    require(cfg_.causal, "forward_incremental: requires a causal stack");
    const Index m = tokens.rows();
    require_config(cache.len + m <= cfg_.max_positions,
                   "transformer: sequence exceeds max positions");
    Mat<S> x = tokens + w(".pos").middleRows(cache.len, m);
    const Index H = cfg_.heads(), dh = cfg_.head_dim;
    const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(dh));
    for (Index l = 0; l < cfg_.layers; ++l) {
      std::string lp = layer_prefix(l);
      Mat<S> h = ln(x, w(lp + ".ln1.g"), w(lp + ".ln1.b"));
      Mat<S> q = (h * w(lp + ".wq")).rowwise() + w(lp + ".bq").row(0);
      Mat<S> k = (h * w(lp + ".wk")).rowwise() + w(lp + ".bk").row(0);
      Mat<S> v = (h * w(lp + ".wv")).rowwise() + w(lp + ".bv").row(0);
      auto& ck = cache.k[static_cast<std::size_t>(l)];
      auto& cv = cache.v[static_cast<std::size_t>(l)];
      append_rows(ck, k);
      append_rows(cv, v);
      const Index total = ck.rows();
      Mat<S> o(m, cfg_.dim);
      for (Index hd = 0; hd < H; ++hd) {
        Mat<S> scores(m, total);
        scores.noalias() = q.middleCols(hd * dh, dh) *
                           ck.middleCols(hd * dh, dh).transpose();
        scores *= inv_sqrt_dh;
        for (Index r = 0; r < m; ++r)
          for (Index c = cache.len + r + 1; c < total; ++c)
            scores(r, c) = kMaskedScore<S>;
        softmax_rows_inplace(scores);
        o.middleCols(hd * dh, dh).noalias() = scores * cv.middleCols(hd * dh, dh);
      }
      x += (o * w(lp + ".wo")).rowwise() + w(lp + ".bo").row(0);
      Mat<S> h2 = ln(x, w(lp + ".ln2.g"), w(lp + ".ln2.b"));
      Mat<S> mid = ((h2 * w(lp + ".w1")).rowwise() + w(lp + ".b1").row(0))
                       .cwiseMax(S(0));
      x += (mid * w(lp + ".w2")).rowwise() + w(lp + ".b2").row(0);
    }
    cache.len += m;
    return x;
  }

 private:
  // Relative to prefix_; w() prepends it.
  static std::string layer_prefix(Index l) { return ".l" + std::to_string(l); }
  const Mat<S>& w(const std::string& suffix) const { return store_->at(prefix_ + suffix); }

  static void append_rows(Mat<S>& dst, const Mat<S>& rows) {
    if (dst.size() == 0) {
      dst = rows;
      return;
    }
    Mat<S> grown(dst.rows() + rows.rows(), dst.cols());
    grown.topRows(dst.rows()) = dst;
    grown.bottomRows(rows.rows()) = rows;
    dst = std::move(grown);
  }

  static void softmax_rows_inplace(Mat<S>& m) {
    for (Index r = 0; r < m.rows(); ++r) {
      auto row = m.row(r).array();
      row -= row.maxCoeff();
      row = row.exp();
      row /= row.sum();
    }
  }

  static Mat<S> ln(const Mat<S>& x, const Mat<S>& gain, const Mat<S>& bias,
                   S eps = S(1e-5)) {
    Mat<S> y(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
      auto row = x.row(r).array();
      S mu = row.mean();
      S var = (row - mu).square().mean();
      y.row(r) = (((row - mu) / std::sqrt(var + eps)) * gain.row(0).array() +
                  bias.row(0).array())
                     .matrix();
    }
    return y;
  }

  Mat<S> layer_eval(const Mat<S>& x_in, Index l, const Mat<S>& mask) const {
    std::string lp = layer_prefix(l);
    const Index n = x_in.rows(), H = cfg_.heads(), dh = cfg_.head_dim;
    const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(dh));
    Mat<S> x = x_in;
    Mat<S> h = ln(x, w(lp + ".ln1.g"), w(lp + ".ln1.b"));
    Mat<S> q = (h * w(lp + ".wq")).rowwise() + w(lp + ".bq").row(0);
    Mat<S> k = (h * w(lp + ".wk")).rowwise() + w(lp + ".bk").row(0);
    Mat<S> v = (h * w(lp + ".wv")).rowwise() + w(lp + ".bv").row(0);
    Mat<S> o(n, cfg_.dim);
    for (Index hd = 0; hd < H; ++hd) {
      Mat<S> scores(n, n);
      scores.noalias() =
          q.middleCols(hd * dh, dh) * k.middleCols(hd * dh, dh).transpose();
      scores *= inv_sqrt_dh;
      if (cfg_.causal) scores += mask;
      softmax_rows_inplace(scores);
      o.middleCols(hd * dh, dh).noalias() = scores * v.middleCols(hd * dh, dh);
    }
    x += (o * w(lp + ".wo")).rowwise() + w(lp + ".bo").row(0);
    Mat<S> h2 = ln(x, w(lp + ".ln2.g"), w(lp + ".ln2.b"));
    Mat<S> mid =
        ((h2 * w(lp + ".w1")).rowwise() + w(lp + ".b1").row(0)).cwiseMax(S(0));
    x += (mid * w(lp + ".w2")).rowwise() + w(lp + ".b2").row(0);
    return x;
  }

  const ParamStore<S>* store_;
  std::string prefix_;
  TransformerConfig cfg_;
};

}  // namespace reclab::nn
