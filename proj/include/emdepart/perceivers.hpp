#pragma once

#include <string>
#include <vector>

#include "emdepart/param.hpp"
#include "emdepart/tape.hpp"

namespace emdepart {

// Shared state for one recorded forward pass. Dropout fires only on residual
// branch outputs (and the perceiver MLP hidden layer), only when training.
struct ForwardCtx {
  Tape& tape;
  Rng& rng;
  bool training = false;
  double dropout = 0.0;

  Value drop(Value v) { return tape.dropout(v, dropout, rng, training); }
};

// ---- image side: tokenwise projection + 2-layer GELU MLP with residual ----

struct ImagePerceiverParams {
  Parameter *proj_w, *proj_b;              // r0 -> r
  Parameter *mlp_w1, *mlp_b1, *mlp_w2, *mlp_b2;  // r -> r -> r
};

inline ImagePerceiverParams make_image_perceiver(ParamStore& s, const std::string& prefix,
                                                 std::size_t r0, std::size_t r) {
  ImagePerceiverParams p;
  p.proj_w = &s.create(prefix + ".proj.w", {r0, r}, Init::xavier());
  p.proj_b = &s.create(prefix + ".proj.b", {r}, Init::zeros());
  p.mlp_w1 = &s.create(prefix + ".mlp.w1", {r, r}, Init::xavier());
  p.mlp_b1 = &s.create(prefix + ".mlp.b1", {r}, Init::zeros());
  p.mlp_w2 = &s.create(prefix + ".mlp.w2", {r, r}, Init::xavier());
  p.mlp_b2 = &s.create(prefix + ".mlp.b2", {r}, Init::zeros());
  return p;
}

struct PerceivedImage {
  Value cls;     // [r] global image feature
  Value tokens;  // [n, r] patch features
};

// raw: [n+1, r0], token row 0 is the global feature. The residual wraps the
// MLP around the projected tokens; no_residual drops it (ablation).
inline PerceivedImage image_perceive(ForwardCtx& ctx, const ImagePerceiverParams& p,
                                     const Tensor& raw, bool no_residual = false) {
  raw.require_rank(2, "image_perceive input");
  if (raw.rows() < 2) throw ShapeError("image_perceive: need a global row plus patches");
  Tape& t = ctx.tape;
  Value x = t.input(raw);
  Value proj = affine(t, x, *p.proj_w, *p.proj_b);
  Value h = ctx.drop(t.gelu(affine(t, proj, *p.mlp_w1, *p.mlp_b1)));
  Value branch = ctx.drop(affine(t, h, *p.mlp_w2, *p.mlp_b2));
  Value out = no_residual ? branch : t.add(proj, branch);
  std::size_t rows = raw.rows();
  return {t.row(out, 0), t.row_slice(out, 1, rows)};
}

// ---- text side: projection, learnable CLS, pre-norm transformer encoder ----

struct EncoderHeadParams {
  Parameter *wq, *wk, *wv, *wo;  // r -> dh, dh -> r
};

struct EncoderBlockParams {
  Parameter *ln1_g, *ln1_b, *ln2_g, *ln2_b;
  std::vector<EncoderHeadParams> heads;
  Parameter* attn_bias;                    // [r], added once after the head sum
  Parameter *ffn_w1, *ffn_b1, *ffn_w2, *ffn_b2;
};

struct TextPerceiverParams {
  Parameter *proj_w, *proj_b;  // token dim -> r
  Parameter* cls;              // [r]
  std::vector<EncoderBlockParams> blocks;
  std::size_t heads = 0;
  double ln_eps = 1e-5;
};

inline TextPerceiverParams make_text_perceiver(ParamStore& s, const std::string& prefix,
                                               std::size_t token_dim, std::size_t r,
                                               std::size_t layers, std::size_t heads) {
  if (heads == 0 || r % heads != 0)
    throw ShapeError("text perceiver: width " + std::to_string(r) + " not divisible into " +
                     std::to_string(heads) + " heads");
  std::size_t dh = r / heads;
  TextPerceiverParams p;
  p.heads = heads;
  p.proj_w = &s.create(prefix + ".proj.w", {token_dim, r}, Init::xavier());
  p.proj_b = &s.create(prefix + ".proj.b", {r}, Init::zeros());
  p.cls = &s.create(prefix + ".cls", {r}, Init::normal(0.02));
  for (std::size_t b = 0; b < layers; ++b) {
    std::string bp = prefix + ".enc" + std::to_string(b);
    EncoderBlockParams blk;
    blk.ln1_g = &s.create(bp + ".ln1.g", {r}, Init::ones());
    blk.ln1_b = &s.create(bp + ".ln1.b", {r}, Init::zeros());
    blk.ln2_g = &s.create(bp + ".ln2.g", {r}, Init::ones());
    blk.ln2_b = &s.create(bp + ".ln2.b", {r}, Init::zeros());
    for (std::size_t h = 0; h < heads; ++h) {
      std::string hp = bp + ".h" + std::to_string(h);
      EncoderHeadParams head;
      head.wq = &s.create(hp + ".wq", {r, dh}, Init::xavier());
      head.wk = &s.create(hp + ".wk", {r, dh}, Init::xavier());
      head.wv = &s.create(hp + ".wv", {r, dh}, Init::xavier());
      head.wo = &s.create(hp + ".wo", {dh, r}, Init::xavier());
      blk.heads.push_back(head);
    }
    blk.attn_bias = &s.create(bp + ".attn.b", {r}, Init::zeros());
    blk.ffn_w1 = &s.create(bp + ".ffn.w1", {r, r}, Init::xavier());
    blk.ffn_b1 = &s.create(bp + ".ffn.b1", {r}, Init::zeros());
    blk.ffn_w2 = &s.create(bp + ".ffn.w2", {r, r}, Init::xavier());
    blk.ffn_b2 = &s.create(bp + ".ffn.b2", {r}, Init::zeros());
    p.blocks.push_back(blk);
  }
  return p;
}

struct PerceivedText {
  Value cls;     // [r] global text feature
  Value tokens;  // [m, r] word features
};

// token_embs: [m, word_dim]. No positional encoding, so word features are
// permutation-equivariant and the CLS row stays in front.
inline PerceivedText text_perceive(ForwardCtx& ctx, const TextPerceiverParams& p,
                                   const Tensor& token_embs) {
  token_embs.require_rank(2, "text_perceive input");
  Tape& t = ctx.tape;
  Value proj = affine(t, t.input(token_embs), *p.proj_w, *p.proj_b);
  Value x = t.concat_rows(t.as_row_matrix(t.param(*p.cls)), proj);
  for (const auto& blk : p.blocks) {
    Value normed = t.layer_norm(x, t.param(*blk.ln1_g), t.param(*blk.ln1_b), p.ln_eps);
    Value head_sum;
    for (const auto& head : blk.heads) {
      Value q = t.matmul(normed, t.param(*head.wq));
      Value k = t.matmul(normed, t.param(*head.wk));
      Value v = t.matmul(normed, t.param(*head.wv));
      Value h = t.matmul(scaled_attention(t, q, k, v).out, t.param(*head.wo));
      head_sum = head_sum.defined() ? t.add(head_sum, h) : h;
    }
    Value attn = t.add_rowvec(head_sum, t.param(*blk.attn_bias));
    x = t.add(x, ctx.drop(attn));
    Value normed2 = t.layer_norm(x, t.param(*blk.ln2_g), t.param(*blk.ln2_b), p.ln_eps);
    Value ffn = affine(t, t.gelu(affine(t, normed2, *blk.ffn_w1, *blk.ffn_b1)), *blk.ffn_w2,
                       *blk.ffn_b2);
    x = t.add(x, ctx.drop(ffn));
  }
  std::size_t rows = token_embs.rows() + 1;
  return {t.row(x, 0), t.row_slice(x, 1, rows)};
}

}  // namespace emdepart
