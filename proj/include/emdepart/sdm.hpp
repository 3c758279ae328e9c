#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "emdepart/perceivers.hpp"
#include "emdepart/tape.hpp"

namespace emdepart {

// Semantic decomposition: k learned query embeddings iteratively aggregate a
// token sequence through single-head cross-attention blocks.
//
// Block t, with E the incoming queries and X the tokens:
//   A_t   = (E Wq)(X Wk)^T / sqrt(r_h)          (kept as the block's trace)
//   Ehat  = E + drop(softmax(A_t) (X Wv) Wo)
//   E_t   = Ehat + drop(mlp(ln(Ehat)))          (pre-norm 2-layer GELU MLP)
// after the last block:
//   B     = ln(E_L + global stacked k times)    (no_global drops the addition)
//
// The pre-norm MLP placement keeps zero-weight blocks an exact identity on E.

struct SdmBlockParams {
  Parameter *wq, *bq, *wk, *bk, *wv, *bv;  // r -> r_h
  Parameter *wo, *bo;                      // r_h -> r
  Parameter *ln_g, *ln_b;
  Parameter *mlp_w1, *mlp_b1, *mlp_w2, *mlp_b2;
};

struct SdmParams {
  Parameter* e0;  // [k, r] initial view queries
  std::vector<SdmBlockParams> blocks;
  Parameter *final_ln_g, *final_ln_b;
  std::size_t k = 0, r = 0, r_h = 0;
  double ln_eps = 1e-5;
};

inline SdmParams make_sdm(ParamStore& s, const std::string& prefix, std::size_t k, std::size_t r,
                          std::size_t layers, std::size_t r_h = 0) {
  if (r_h == 0) r_h = r;
  SdmParams p;
  p.k = k;
  p.r = r;
  p.r_h = r_h;
  p.e0 = &s.create(prefix + ".e0", {k, r}, Init::normal(0.5));
  for (std::size_t b = 0; b < layers; ++b) {
    std::string bp = prefix + ".blk" + std::to_string(b);
    SdmBlockParams blk;
    blk.wq = &s.create(bp + ".wq", {r, r_h}, Init::xavier());
    blk.bq = &s.create(bp + ".bq", {r_h}, Init::zeros());
    blk.wk = &s.create(bp + ".wk", {r, r_h}, Init::xavier());
    blk.bk = &s.create(bp + ".bk", {r_h}, Init::zeros());
    blk.wv = &s.create(bp + ".wv", {r, r_h}, Init::xavier());
    blk.bv = &s.create(bp + ".bv", {r_h}, Init::zeros());
    blk.wo = &s.create(bp + ".wo", {r_h, r}, Init::xavier());
    blk.bo = &s.create(bp + ".bo", {r}, Init::zeros());
    blk.ln_g = &s.create(bp + ".ln.g", {r}, Init::ones());
    blk.ln_b = &s.create(bp + ".ln.b", {r}, Init::zeros());
    blk.mlp_w1 = &s.create(bp + ".mlp.w1", {r, r}, Init::xavier());
    blk.mlp_b1 = &s.create(bp + ".mlp.b1", {r}, Init::zeros());
    blk.mlp_w2 = &s.create(bp + ".mlp.w2", {r, r}, Init::xavier());
    blk.mlp_b2 = &s.create(bp + ".mlp.b2", {r}, Init::zeros());
    p.blocks.push_back(blk);
  }
  p.final_ln_g = &s.create(prefix + ".ln.g", {r}, Init::ones());
  p.final_ln_b = &s.create(prefix + ".ln.b", {r}, Init::zeros());
  return p;
}

struct SdmOut {
  Value B;    // [k, r] view embeddings (post layer norm, global added)
  Value E_L;  // [k, r] final queries before the global merge
  std::vector<Value> block_logits;  // per block [k, n], scaled pre-softmax
};

// Plain snapshots for diagnostics and inference-time scoring.
struct ViewEmbeddings {
  Tensor B;
  Tensor E_L;
};

struct AggregationTrace {
  Tensor logits;  // [l, k, n]
};

inline SdmOut sdm_forward(ForwardCtx& ctx, const SdmParams& p, Value tokens, Value global,
                          bool no_global = false) {
  const Tensor& X = tokens.val();
  X.require_rank(2, "sdm_forward tokens");
  if (X.cols() != p.r)
    throw ShapeError("sdm_forward: token width " + std::to_string(X.cols()) + " vs r " +
                     std::to_string(p.r));
  if (global.val().numel() != p.r)
    throw ShapeError("sdm_forward: global width " + std::to_string(global.val().numel()) +
                     " vs r " + std::to_string(p.r));
  Tape& t = ctx.tape;
  SdmOut out;
  Value e = t.param(*p.e0);
  for (const auto& blk : p.blocks) {
    Value q = affine(t, e, *blk.wq, *blk.bq);
    Value k = affine(t, tokens, *blk.wk, *blk.bk);
    Value v = affine(t, tokens, *blk.wv, *blk.bv);
    AttentionOut attn = scaled_attention(t, q, k, v);
    out.block_logits.push_back(attn.logits);
    Value ehat = t.add(e, ctx.drop(affine(t, attn.out, *blk.wo, *blk.bo)));
    Value normed = t.layer_norm(ehat, t.param(*blk.ln_g), t.param(*blk.ln_b), p.ln_eps);
    Value mlp = affine(t, t.gelu(affine(t, normed, *blk.mlp_w1, *blk.mlp_b1)), *blk.mlp_w2,
                       *blk.mlp_b2);
    e = t.add(ehat, ctx.drop(mlp));
  }
  out.E_L = e;
  Value pre = no_global ? e : t.add(e, t.repeat_row(global, p.k));
  out.B = t.layer_norm(pre, t.param(*p.final_ln_g), t.param(*p.final_ln_b), p.ln_eps);
  return out;
}

inline ViewEmbeddings snapshot(const SdmOut& out) { return {out.B.val(), out.E_L.val()}; }

inline AggregationTrace snapshot_trace(const SdmOut& out) {
  std::size_t l = out.block_logits.size();
  if (l == 0) throw ShapeError("snapshot_trace: no blocks");
  std::size_t k = out.block_logits[0].val().rows(), n = out.block_logits[0].val().cols();
  AggregationTrace tr{Tensor({l, k, n})};
  for (std::size_t b = 0; b < l; ++b) {
    const Tensor& L = out.block_logits[b].val();
    if (L.rows() != k || L.cols() != n) throw ShapeError("snapshot_trace: ragged block logits");
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < n; ++j) tr.logits.at(b, i, j) = L.at(i, j);
  }
  return tr;
}

// ---- diagnostics on plain tensors ----

inline Tensor l2_normalize_rows(const Tensor& x) {
  x.require_rank(2, "l2_normalize_rows");
  Tensor out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) s += x.at(i, j) * x.at(i, j);
    double nrm = std::sqrt(s);
    if (nrm < 1e-150) throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(i));
    for (std::size_t j = 0; j < x.cols(); ++j) out.at(i, j) /= nrm;
  }
  return out;
}

// Pairwise cosine matrix of the rows of E_L: diagonal 1, symmetric.
inline Tensor redundancy_matrix(const Tensor& e_l) {
  Tensor n = l2_normalize_rows(e_l);
  std::size_t k = n.rows(), r = n.cols();
  Tensor m({k, k});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < r; ++c) s += n.at(i, c) * n.at(j, c);
      m.at(i, j) = s;
    }
  return m;
}

// 1 - |mean of unit rows|: 0 when all view embeddings align, 1 when their
// directions cancel. The collapse diagnostic tracked per epoch.
inline double circular_variance(const Tensor& b) {
  Tensor n = l2_normalize_rows(b);
  std::size_t k = n.rows(), r = n.cols();
  double s2 = 0.0;
  for (std::size_t j = 0; j < r; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < k; ++i) m += n.at(i, j);
    m /= static_cast<double>(k);
    s2 += m * m;
  }
  return 1.0 - std::sqrt(s2);
}

}  // namespace emdepart
