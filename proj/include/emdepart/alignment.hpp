#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "emdepart/perceivers.hpp"
#include "emdepart/sdm.hpp"
#include "emdepart/tape.hpp"

namespace emdepart {

enum class SimilarityVariant { SmoothChamfer, Average, Maximum };
enum class Pooling { Mean, Max };

inline const char* to_string(SimilarityVariant v) {
  switch (v) {
    case SimilarityVariant::SmoothChamfer: return "smooth_chamfer";
    case SimilarityVariant::Average: return "average";
    case SimilarityVariant::Maximum: return "maximum";
  }
  return "?";
}

inline SimilarityVariant similarity_from_string(const std::string& s) {
  if (s == "smooth_chamfer") return SimilarityVariant::SmoothChamfer;
  if (s == "average") return SimilarityVariant::Average;
  if (s == "maximum") return SimilarityVariant::Maximum;
  throw DataError("unknown similarity variant '" + s + "'");
}

struct AlignmentConfig {
  double tau = 32.0;
  double lambda_local = 0.1;
  double lambda_var = 1.0;
  double lambda_div = 3.0;
  double gamma = 0.1;    // hinge margin on attention-logit std
  double eps_var = 1e-4; // inside the variance sqrt
  int p = 3;             // partners kept per embedding at inference
  SimilarityVariant variant = SimilarityVariant::SmoothChamfer;
  Pooling pooling = Pooling::Mean;
};

// ---- plain scoring on tensors (inference path) ----

// C[i][j] = cosine of a's row i against b's row j.
inline Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
  Tensor na = l2_normalize_rows(a), nb = l2_normalize_rows(b);
  if (na.cols() != nb.cols())
    throw ShapeError("cosine_matrix: widths " + std::to_string(na.cols()) + " vs " +
                     std::to_string(nb.cols()));
  Tensor c({na.rows(), nb.rows()});
  for (std::size_t i = 0; i < na.rows(); ++i)
    for (std::size_t j = 0; j < nb.rows(); ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < na.cols(); ++t) s += na.at(i, t) * nb.at(j, t);
      c.at(i, j) = s;
    }
  return c;
}

// log sum_j exp(cos(b, B_j)); bounded in [log k - 1, log k + 1].
inline double lse(const Tensor& b, const Tensor& B) {
  b.require_rank(1, "lse query");
  Tensor q({1, b.numel()});
  q.data = b.data;
  Tensor c = cosine_matrix(q, B);
  double mx = c.at(0, 0);
  for (std::size_t j = 1; j < c.cols(); ++j) mx = std::max(mx, c.at(0, j));
  double s = 0.0;
  for (std::size_t j = 0; j < c.cols(); ++j) s += std::exp(c.at(0, j) - mx);
  return mx + std::log(s);
}

namespace detail {

inline double lse_over(const Tensor& c, std::size_t fixed, bool fixed_is_row,
                       const std::vector<bool>* mask = nullptr) {
  std::size_t count = fixed_is_row ? c.cols() : c.rows();
  double mx = -INFINITY;
  for (std::size_t t = 0; t < count; ++t) {
    if (mask && !(*mask)[t]) continue;
    double v = fixed_is_row ? c.at(fixed, t) : c.at(t, fixed);
    mx = std::max(mx, v);
  }
  if (mx == -INFINITY) throw NumericError("lse_over: empty selection");
  double s = 0.0;
  for (std::size_t t = 0; t < count; ++t) {
    if (mask && !(*mask)[t]) continue;
    double v = fixed_is_row ? c.at(fixed, t) : c.at(t, fixed);
    s += std::exp(v - mx);
  }
  return mx + std::log(s);
}

}  // namespace detail

inline void require_matched_sets(const Tensor& bt, const Tensor& bv, const char* what) {
  bt.require_rank(2, what);
  bv.require_rank(2, what);
  if (bt.rows() != bv.rows())
    throw ShapeError(std::string(what) + ": set sizes " + std::to_string(bt.rows()) + " vs " +
                     std::to_string(bv.rows()));
}

// Bidirectional log-sum-exp match of two k-element embedding sets:
// (1/2k) (sum_i LSE(t_i, B_V) + sum_j LSE(v_j, B_T)).
inline double smooth_chamfer(const Tensor& b_t, const Tensor& b_v) {
  require_matched_sets(b_t, b_v, "smooth_chamfer");
  std::size_t k = b_t.rows();
  Tensor c = cosine_matrix(b_t, b_v);
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) total += detail::lse_over(c, i, true);
  for (std::size_t j = 0; j < k; ++j) total += detail::lse_over(c, j, false);
  return total / (2.0 * static_cast<double>(k));
}

// Replacements for the set similarity in the training objective's ablations:
// average of all pairwise cosines, or bidirectional best-match average.
inline double chamfer_variant(const Tensor& b_t, const Tensor& b_v, SimilarityVariant variant) {
  require_matched_sets(b_t, b_v, "chamfer_variant");
  std::size_t k = b_t.rows();
  if (variant == SimilarityVariant::SmoothChamfer) return smooth_chamfer(b_t, b_v);
  Tensor c = cosine_matrix(b_t, b_v);
  if (variant == SimilarityVariant::Average) {
    double s = 0.0;
    for (double v : c.data) s += v;
    return s / static_cast<double>(k * k);
  }
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    double mx = c.at(i, 0);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, c.at(i, j));
    total += mx;
  }
  for (std::size_t j = 0; j < k; ++j) {
    double mx = c.at(0, j);
    for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, c.at(i, j));
    total += mx;
  }
  return total / (2.0 * static_cast<double>(k));
}

// Per-direction top-p partner selection. visual[i][j]: textual embedding j is
// among the p best partners of visual embedding i; textual[i][j]: visual i is
// among the p best partners of textual j. Ties break toward the lower index.
struct TopCosMask {
  std::vector<std::vector<bool>> visual;   // [k][k] over cos(v_i, t_j)
  std::vector<std::vector<bool>> textual;  // [k][k], same indexing
};

inline TopCosMask top_cos(const Tensor& b_v, const Tensor& b_t, int p) {
  require_matched_sets(b_v, b_t, "top_cos");
  std::size_t k = b_v.rows();
  if (p < 1 || static_cast<std::size_t>(p) > k)
    throw DataError("top_cos: p " + std::to_string(p) + " outside [1," + std::to_string(k) + "]");
  Tensor c = cosine_matrix(b_v, b_t);  // c[i][j] = cos(v_i, t_j)
  TopCosMask mask;
  mask.visual.assign(k, std::vector<bool>(k, false));
  mask.textual.assign(k, std::vector<bool>(k, false));
  std::vector<std::size_t> order(k);
  for (std::size_t i = 0; i < k; ++i) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return c.at(i, a) > c.at(i, b); });
    for (int t = 0; t < p; ++t) mask.visual[i][order[static_cast<std::size_t>(t)]] = true;
  }
  for (std::size_t j = 0; j < k; ++j) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return c.at(a, j) > c.at(b, j); });
    for (int t = 0; t < p; ++t) mask.textual[order[static_cast<std::size_t>(t)]][j] = true;
  }
  return mask;
}

// Bidirectional LSE restricted to each embedding's top-p partners, keeping the
// 1/(2k) prefactor, so p == k recovers smooth_chamfer exactly.
inline double partial_score(const Tensor& b_v, const Tensor& b_t, int p) {
  TopCosMask mask = top_cos(b_v, b_t, p);
  std::size_t k = b_v.rows();
  Tensor c = cosine_matrix(b_v, b_t);
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) total += detail::lse_over(c, i, true, &mask.visual[i]);
  std::vector<bool> col(k);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t i = 0; i < k; ++i) col[i] = mask.textual[i][j];
    total += detail::lse_over(c, j, false, &col);
  }
  return total / (2.0 * static_cast<double>(k));
}

// Inference-time set similarity honoring the configured training variant;
// the partial top-p selection only applies to the default variant.
inline double set_score(const Tensor& b_v, const Tensor& b_t, const AlignmentConfig& cfg,
                        bool use_partial = true) {
  if (cfg.variant != SimilarityVariant::SmoothChamfer)
    return chamfer_variant(b_t, b_v, cfg.variant);
  if (!use_partial) return smooth_chamfer(b_t, b_v);
  return partial_score(b_v, b_t, cfg.p);
}

// ---- cross-modal fusion for the fine-grained score ----

struct CrossAttentionParams {
  Parameter *wq, *wk, *wv, *wo;  // r -> r, single head, no biases
  Parameter *ln_g, *ln_b;
  Parameter* d;  // [r, 1] scoring head
};

inline CrossAttentionParams make_cross_attention(ParamStore& s, const std::string& prefix,
                                                 std::size_t r) {
  CrossAttentionParams p;
  p.wq = &s.create(prefix + ".wq", {r, r}, Init::xavier());
  p.wk = &s.create(prefix + ".wk", {r, r}, Init::xavier());
  p.wv = &s.create(prefix + ".wv", {r, r}, Init::xavier());
  p.wo = &s.create(prefix + ".wo", {r, r}, Init::xavier());
  p.ln_g = &s.create(prefix + ".ln.g", {r}, Init::ones());
  p.ln_b = &s.create(prefix + ".ln.b", {r}, Init::zeros());
  p.d = &s.create(prefix + ".d", {r, 1}, Init::xavier());
  return p;
}

// Patch features attend over word features: ln(I_l + drop(attn(I_l, T_l) Wo)).
inline Value cross_attention_fuse(ForwardCtx& ctx, const CrossAttentionParams& p, Value img_tokens,
                                  Value txt_tokens) {
  Tape& t = ctx.tape;
  Value q = t.matmul(img_tokens, t.param(*p.wq));
  Value k = t.matmul(txt_tokens, t.param(*p.wk));
  Value v = t.matmul(txt_tokens, t.param(*p.wv));
  Value fused = t.matmul(scaled_attention(t, q, k, v).out, t.param(*p.wo));
  Value res = t.add(img_tokens, ctx.drop(fused));
  return t.layer_norm(res, t.param(*p.ln_g), t.param(*p.ln_b), 1e-5);
}

// Pool the fused patches and project to one logit.
inline Value fine_grained_score(ForwardCtx& ctx, const CrossAttentionParams& p, Value fused,
                                Pooling pooling) {
  Tape& t = ctx.tape;
  Value pooled = pooling == Pooling::Mean ? t.reduce_mean(fused, 0) : t.reduce_max(fused, 0);
  return t.dot(pooled, t.param(*p.d));
}

// ---- losses on the tape ----

// Set similarity between two already-row-normalized sets, as a tape value.
inline Value tape_set_similarity(Tape& t, Value norm_t, Value norm_v, SimilarityVariant variant) {
  std::size_t k = norm_t.val().rows();
  if (k != norm_v.val().rows())
    throw ShapeError("tape_set_similarity: set sizes " + std::to_string(k) + " vs " +
                     std::to_string(norm_v.val().rows()));
  Value c = t.matmul_nt(norm_t, norm_v);
  switch (variant) {
    case SimilarityVariant::SmoothChamfer: {
      Value rows = t.sum_all(t.logsumexp(c, 1));
      Value cols = t.sum_all(t.logsumexp(c, 0));
      return t.scale(t.add(rows, cols), 1.0 / (2.0 * static_cast<double>(k)));
    }
    case SimilarityVariant::Average:
      return t.mean_all(c);
    case SimilarityVariant::Maximum: {
      Value rows = t.sum_all(t.reduce_max(c, 1));
      Value cols = t.sum_all(t.reduce_max(c, 0));
      return t.scale(t.add(rows, cols), 1.0 / (2.0 * static_cast<double>(k)));
    }
  }
  throw DataError("tape_set_similarity: bad variant");
}

// Temperature-scaled cross entropy of set similarities against every candidate
// class, averaged over the batch. labels index into class_b_t.
inline Value loss_global(Tape& t, const std::vector<Value>& batch_b_v,
                         const std::vector<Value>& class_b_t, const std::vector<std::size_t>& labels,
                         double tau, SimilarityVariant variant = SimilarityVariant::SmoothChamfer) {
  if (batch_b_v.empty() || class_b_t.empty())
    throw ShapeError("loss_global: empty batch or class set");
  if (labels.size() != batch_b_v.size()) throw ShapeError("loss_global: labels/batch mismatch");
  if (tau <= 0.0) throw DataError("loss_global: tau must be positive");
  std::vector<Value> norm_v, norm_t;
  norm_v.reserve(batch_b_v.size());
  norm_t.reserve(class_b_t.size());
  for (auto b : batch_b_v) norm_v.push_back(t.row_l2_normalize(b));
  for (auto b : class_b_t) norm_t.push_back(t.row_l2_normalize(b));

  Value total;
  for (std::size_t b = 0; b < norm_v.size(); ++b) {
    if (labels[b] >= norm_t.size()) throw ShapeError("loss_global: label out of range");
    std::vector<Value> scores;
    scores.reserve(norm_t.size());
    for (std::size_t c = 0; c < norm_t.size(); ++c)
      scores.push_back(tape_set_similarity(t, norm_t[c], norm_v[b], variant));
    Value logits = t.scale(t.stack_scalars(scores), 1.0 / tau);
    Value ce = t.sub(t.logsumexp(logits, 1), t.index(logits, labels[b]));
    total = total.defined() ? t.add(total, ce) : ce;
  }
  return t.scale(total, 1.0 / static_cast<double>(batch_b_v.size()));
}

// Cross entropy over fine-grained scores, no temperature, averaged over the
// batch. img_tokens/txt_tokens are the perceived sequences (pre-decomposition).
inline Value loss_local(ForwardCtx& ctx, const CrossAttentionParams& p,
                        const std::vector<Value>& img_tokens, const std::vector<Value>& txt_tokens,
                        const std::vector<std::size_t>& labels, Pooling pooling = Pooling::Mean) {
  if (img_tokens.empty() || txt_tokens.empty())
    throw ShapeError("loss_local: empty batch or class set");
  if (labels.size() != img_tokens.size()) throw ShapeError("loss_local: labels/batch mismatch");
  Tape& t = ctx.tape;
  Value total;
  for (std::size_t b = 0; b < img_tokens.size(); ++b) {
    if (labels[b] >= txt_tokens.size()) throw ShapeError("loss_local: label out of range");
    std::vector<Value> scores;
    scores.reserve(txt_tokens.size());
    for (std::size_t c = 0; c < txt_tokens.size(); ++c) {
      Value fused = cross_attention_fuse(ctx, p, img_tokens[b], txt_tokens[c]);
      scores.push_back(fine_grained_score(ctx, p, fused, pooling));
    }
    Value logits = t.stack_scalars(scores);
    Value ce = t.sub(t.logsumexp(logits, 1), t.index(logits, labels[b]));
    total = total.defined() ? t.add(total, ce) : ce;
  }
  return t.scale(total, 1.0 / static_cast<double>(img_tokens.size()));
}

// Hinge on the per-token std of attention logits across the k views, summed
// over tokens and blocks: sum max(0, gamma - sqrt(var + eps)). Variance is the
// population variance over the k logits attending each token.
inline Value attention_spread_penalty(Tape& t, const std::vector<Value>& block_logits, double gamma,
                                      double eps) {
  if (block_logits.empty()) throw ShapeError("attention_spread_penalty: no blocks");
  Value total;
  for (auto logits : block_logits) {
    Value mu = t.reduce_mean(logits, 0);
    Value m2 = t.reduce_mean(t.mul(logits, logits), 0);
    Value var = t.sub(m2, t.mul(mu, mu));
    Value sd = t.sqrt_shift(var, eps);
    Value hinge = t.sum_all(t.relu(t.rsub_const(sd, gamma)));
    total = total.defined() ? t.add(total, hinge) : hinge;
  }
  return total;
}

// Half the sum of both modalities' spread penalties for one image/document pair.
inline Value loss_var(Tape& t, const std::vector<Value>& trace_v,
                      const std::vector<Value>& trace_t, double gamma, double eps) {
  return t.scale(t.add(attention_spread_penalty(t, trace_v, gamma, eps),
                       attention_spread_penalty(t, trace_t, gamma, eps)),
                 0.5);
}

// Frobenius distance of the row-cosine matrix from identity.
inline Value redundancy_penalty(Tape& t, Value e_l) {
  std::size_t k = e_l.val().rows();
  Value n = t.row_l2_normalize(e_l);
  Value m = t.matmul_nt(n, n);
  Tensor eye({k, k});
  for (std::size_t i = 0; i < k; ++i) eye.at(i, i) = 1.0;
  Value diff = t.sub(m, t.input(eye));
  return t.sqrt_shift(t.sum_all(t.mul(diff, diff)), 0.0);
}

// (1/2k^2) (|M_T - I| + |M_V - I|) for one image/document pair.
inline Value loss_div(Tape& t, Value e_l_t, Value e_l_v) {
  std::size_t k = e_l_t.val().rows();
  if (k != e_l_v.val().rows())
    throw ShapeError("loss_div: set sizes " + std::to_string(k) + " vs " +
                     std::to_string(e_l_v.val().rows()));
  return t.scale(t.add(redundancy_penalty(t, e_l_t), redundancy_penalty(t, e_l_v)),
                 1.0 / (2.0 * static_cast<double>(k) * static_cast<double>(k)));
}

struct LossBreakdown {
  Value total;
  Value global_term, local_term, var_term, div_term;  // unweighted components
};

// total = global + lambda_local * local + lambda_var * var + lambda_div * div.
// Components always ride along unweighted for logging; a zero weight zeroes the
// contribution (and its gradient) without hiding the component's value.
inline LossBreakdown total_loss(Tape& t, Value l_global, Value l_local, Value l_var, Value l_div,
                                const AlignmentConfig& cfg) {
  LossBreakdown out;
  out.global_term = l_global;
  out.local_term = l_local;
  out.var_term = l_var;
  out.div_term = l_div;
  Value total = l_global;
  total = t.add(total, t.scale(l_local, cfg.lambda_local));
  total = t.add(total, t.scale(l_var, cfg.lambda_var));
  total = t.add(total, t.scale(l_div, cfg.lambda_div));
  out.total = total;
  return out;
}

}  // namespace emdepart
