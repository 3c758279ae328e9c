#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "emdepart/param.hpp"
#include "emdepart/rng.hpp"
#include "emdepart/tensor.hpp"

namespace emdepart {

struct GradCheckOptions {
  double h = 1e-5;    // central-difference step
  double tol = 1e-4;  // relative error threshold
  // 0 checks every entry; otherwise each parameter gets a seeded random
  // subsample of at most this many entries.
  std::size_t max_entries_per_param = 0;
  std::uint64_t subsample_seed = 0;
};

struct GradCheckEntry {
  std::string param;
  std::size_t flat_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  bool ok = false;
  std::size_t entries_checked = 0;
  GradCheckEntry worst;  // largest relative error, failing or not
  std::vector<GradCheckEntry> failures;

  std::string describe() const {
    std::string s = ok ? "gradient check passed: " : "gradient check FAILED: ";
    s += std::to_string(entries_checked) + " entries, worst " + worst.param + "[" +
         std::to_string(worst.flat_index) + "] analytic=" + std::to_string(worst.analytic) +
         " numeric=" + std::to_string(worst.numeric) + " rel_err=" + std::to_string(worst.rel_err);
    if (!failures.empty()) s += ", " + std::to_string(failures.size()) + " failures";
    return s;
  }
};

// Central-difference check of analytic gradients, all in double precision.
//
// loss_with_grad: zero the grads, run forward + backward, return the loss.
// loss_only:      return the loss without touching grads (perturbation evals).
// The loss must be deterministic between calls (dropout off, inputs fixed).
//
// rel_err = |analytic - numeric| / max(1, |analytic|, |numeric|), which acts
// as absolute error near zero. Any NaN in loss or gradient fails the check.
inline GradCheckReport finite_diff_check(ParamStore& store,
                                         const std::function<double()>& loss_with_grad,
                                         const std::function<double()>& loss_only,
                                         const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  store.zero_grads();
  double base = loss_with_grad();
  if (!std::isfinite(base)) {
    report.worst = {"<loss>", 0, base, base, INFINITY};
    report.failures.push_back(report.worst);
    return report;
  }

  // Snapshot analytic grads before perturbation runs.
  std::vector<Tensor> analytic;
  auto params = store.items();
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->grad);

  Rng pick(opt.subsample_seed);
  bool any_fail = false;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter* p = params[pi];
    std::vector<std::size_t> idx;
    std::size_t n = p->value.numel();
    if (opt.max_entries_per_param == 0 || n <= opt.max_entries_per_param) {
      idx.resize(n);
      for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    } else {
      std::vector<std::size_t> all(n);
      for (std::size_t i = 0; i < n; ++i) all[i] = i;
      pick.shuffle(all);
      idx.assign(all.begin(), all.begin() + opt.max_entries_per_param);
    }
    for (std::size_t i : idx) {
      double saved = p->value.data[i];
      p->value.data[i] = saved + opt.h;
      double lp = loss_only();
      p->value.data[i] = saved - opt.h;
      double lm = loss_only();
      p->value.data[i] = saved;

      double numeric = (lp - lm) / (2.0 * opt.h);
      double a = analytic[pi].data[i];
      double rel;
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        rel = INFINITY;
      } else {
        double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
        rel = std::fabs(a - numeric) / denom;
      }
      ++report.entries_checked;
      GradCheckEntry e{p->name, i, a, numeric, rel};
      if (rel > report.worst.rel_err || report.entries_checked == 1) report.worst = e;
      if (!(rel <= opt.tol)) {
        any_fail = true;
        if (report.failures.size() < 32) report.failures.push_back(e);
      }
    }
  }
  report.ok = !any_fail && report.entries_checked > 0;
  return report;
}

inline GradCheckReport finite_diff_check(ParamStore& store,
                                         const std::function<double()>& loss_with_grad,
                                         const GradCheckOptions& opt = {}) {
  return finite_diff_check(store, loss_with_grad, loss_with_grad, opt);
}

}  // namespace emdepart
