#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "emdepart/alignment.hpp"
#include "emdepart/gradcheck.hpp"
#include "emdepart/model.hpp"

namespace emdepart {

// Finite-difference audit of every loss term on a miniature model with fixed
// random inputs. Each component is checked in isolation (parameters it never
// touches must come out zero on both sides), then the weighted total.
struct GradSuiteConfig {
  std::uint64_t seed = 1;
  double tol = 1e-4;
  double step = 1e-5;
  std::size_t k = 3;          // views
  std::size_t n = 5;          // image patches
  std::size_t m = 7;          // document tokens
  std::size_t r = 8;          // embedding width
  std::size_t sdm_layers = 2;
  std::size_t classes = 2;
  std::size_t batch = 2;
  std::size_t r0 = 9;         // raw image feature width
  std::size_t token_dim = 20;
};

struct GradSuiteCheck {
  std::string name;
  GradCheckReport report;
};

struct GradSuiteResult {
  std::vector<GradSuiteCheck> checks;
  bool ok = true;

  const GradSuiteCheck* worst() const {
    const GradSuiteCheck* w = nullptr;
    for (auto& c : checks)
      if (!w || c.report.worst.rel_err > w->report.worst.rel_err) w = &c;
    return w;
  }
};

inline GradSuiteResult run_gradient_suite(const GradSuiteConfig& cfg = {}) {
  ModelConfig mc;
  mc.r0 = cfg.r0;
  mc.token_dim = cfg.token_dim;
  mc.r = cfg.r;
  mc.k = cfg.k;
  mc.encoder_layers = 2;
  mc.heads = 2;
  mc.sdm_layers = cfg.sdm_layers;
  mc.dropout = 0.0;
  mc.init_seed = cfg.seed;
  EmDepartModel model(mc);

  // Fixed inputs; distinct weights on the total so a swapped term cannot
  // cancel out.
  AlignmentConfig acfg;
  acfg.tau = 4.0;
  acfg.lambda_local = 0.7;
  acfg.lambda_var = 1.3;
  acfg.lambda_div = 2.1;
  acfg.gamma = 0.35;

  Rng data_rng(cfg.seed + 101);
  std::vector<Tensor> raw_images, doc_tokens;
  for (std::size_t i = 0; i < cfg.batch; ++i) {
    Tensor t({cfg.n + 1, cfg.r0});
    for (double& v : t.data) v = data_rng.normal();
    raw_images.push_back(std::move(t));
  }
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    Tensor t({cfg.m, cfg.token_dim});
    for (double& v : t.data) v = data_rng.normal();
    doc_tokens.push_back(std::move(t));
  }
  std::vector<std::size_t> labels(cfg.batch);
  for (std::size_t i = 0; i < cfg.batch; ++i) labels[i] = i % cfg.classes;

  enum class Term { Global, Local, Var, Div, Total };
  auto build = [&](Term term, bool with_grad) {
    Tape tape;
    Rng drop_rng(0);
    ForwardCtx ctx{tape, drop_rng, false, 0.0};

    std::vector<Value> txt_b, txt_tokens, txt_el, img_b, img_tokens, img_el;
    std::vector<std::vector<Value>> txt_traces, img_traces;
    for (auto& doc : doc_tokens) {
      auto fwd = model.forward_text(ctx, doc);
      txt_b.push_back(fwd.sdm.B);
      txt_el.push_back(fwd.sdm.E_L);
      txt_tokens.push_back(fwd.perceived.tokens);
      txt_traces.push_back(fwd.sdm.block_logits);
    }
    for (auto& raw : raw_images) {
      auto fwd = model.forward_image(ctx, raw);
      img_b.push_back(fwd.sdm.B);
      img_el.push_back(fwd.sdm.E_L);
      img_tokens.push_back(fwd.perceived.tokens);
      img_traces.push_back(fwd.sdm.block_logits);
    }

    auto global_term = [&] {
      return loss_global(tape, img_b, txt_b, labels, acfg.tau, acfg.variant);
    };
    auto local_term = [&] {
      return loss_local(ctx, model.fg, img_tokens, txt_tokens, labels, acfg.pooling);
    };
    auto var_term = [&] {
      std::vector<Value> per_img, per_cls;
      for (auto& tr : img_traces)
        per_img.push_back(attention_spread_penalty(tape, tr, acfg.gamma, acfg.eps_var));
      for (auto& tr : txt_traces)
        per_cls.push_back(attention_spread_penalty(tape, tr, acfg.gamma, acfg.eps_var));
      return tape.scale(tape.add(tape.mean_all(tape.stack_scalars(per_cls)),
                                 tape.mean_all(tape.stack_scalars(per_img))),
                        0.5);
    };
    auto div_term = [&] {
      double k = static_cast<double>(cfg.k);
      std::vector<Value> per_img, per_cls;
      for (auto e : img_el) per_img.push_back(redundancy_penalty(tape, e));
      for (auto e : txt_el) per_cls.push_back(redundancy_penalty(tape, e));
      return tape.scale(tape.add(tape.mean_all(tape.stack_scalars(per_cls)),
                                 tape.mean_all(tape.stack_scalars(per_img))),
                        1.0 / (2.0 * k * k));
    };

    Value out;
    switch (term) {
      case Term::Global: out = global_term(); break;
      case Term::Local: out = local_term(); break;
      case Term::Var: out = var_term(); break;
      case Term::Div: out = div_term(); break;
      case Term::Total:
        out = total_loss(tape, global_term(), local_term(), var_term(), div_term(), acfg).total;
        break;
    }
    if (with_grad) tape.backward(out);
    return out.val().at(0);
  };

  GradCheckOptions opt;
  opt.h = cfg.step;
  opt.tol = cfg.tol;

  GradSuiteResult result;
  const std::pair<const char*, Term> terms[] = {{"L_global", Term::Global},
                                                {"L_local", Term::Local},
                                                {"L_var", Term::Var},
                                                {"L_div", Term::Div},
                                                {"total", Term::Total}};
  for (auto& [name, term] : terms) {
    GradCheckReport rep = finite_diff_check(
        model.store, [&] { return build(term, true); }, [&] { return build(term, false); }, opt);
    result.ok = result.ok && rep.ok;
    result.checks.push_back({name, std::move(rep)});
  }
  return result;
}

}  // namespace emdepart
