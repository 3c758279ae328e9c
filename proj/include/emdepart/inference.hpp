#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "emdepart/data.hpp"
#include "emdepart/tensor.hpp"

namespace emdepart {

// Image-by-class score matrix; rows follow the image order the caller scored,
// columns follow class_ids.
struct ScoreTable {
  std::vector<int> class_ids;
  std::vector<std::vector<double>> rows;

  void require_consistent() const {
    if (class_ids.empty()) throw DataError("score table has no classes");
    for (const auto& r : rows)
      if (r.size() != class_ids.size())
        throw ShapeError("score table row width " + std::to_string(r.size()) + " for " +
                         std::to_string(class_ids.size()) + " classes");
  }
};

// Highest score wins; equal scores go to the lower class id. allowed, when
// given, restricts the candidate set; penalty is subtracted from every class
// in penalized before comparison (calibrated stacking).
inline int argmax_class(const std::vector<double>& scores, const std::vector<int>& class_ids,
                        const std::set<int>* allowed = nullptr,
                        const std::set<int>* penalized = nullptr, double penalty = 0.0) {
  if (scores.size() != class_ids.size()) throw ShapeError("argmax_class: scores/ids mismatch");
  bool found = false;
  double best = 0.0;
  int best_id = 0;
  for (std::size_t c = 0; c < class_ids.size(); ++c) {
    int id = class_ids[c];
    if (allowed && !allowed->count(id)) continue;
    double s = scores[c];
    if (penalized && penalized->count(id)) s -= penalty;
    if (!std::isfinite(s)) throw NumericError("argmax_class: non-finite score");
    if (!found || s > best || (s == best && id < best_id)) {
      found = true;
      best = s;
      best_id = id;
    }
  }
  if (!found) throw DataError("argmax_class: empty candidate set");
  return best_id;
}

// Candidates restricted to the given classes (the unseen set in the standard
// protocol).
inline std::vector<int> predict_restricted(const ScoreTable& table, const std::set<int>& allowed) {
  table.require_consistent();
  std::vector<int> out;
  out.reserve(table.rows.size());
  for (const auto& r : table.rows) out.push_back(argmax_class(r, table.class_ids, &allowed));
  return out;
}

// All classes compete; seen-class scores are handicapped by gamma_cs.
inline std::vector<int> predict_calibrated(const ScoreTable& table, const std::set<int>& seen,
                                           double gamma_cs) {
  table.require_consistent();
  std::vector<int> out;
  out.reserve(table.rows.size());
  for (const auto& r : table.rows)
    out.push_back(argmax_class(r, table.class_ids, nullptr, &seen, gamma_cs));
  return out;
}

// Mean over classes of the within-class top-1 rate, in percent. Every class in
// class_ids must own at least one label.
inline double per_class_top1(const std::vector<int>& predictions, const std::vector<int>& labels,
                             const std::set<int>& class_ids,
                             std::map<int, double>* per_class = nullptr) {
  if (predictions.size() != labels.size())
    throw ShapeError("per_class_top1: predictions/labels mismatch");
  if (class_ids.empty()) throw DataError("per_class_top1: empty class set");
  std::map<int, std::pair<std::size_t, std::size_t>> tally;  // id -> {correct, total}
  for (int id : class_ids) tally[id] = {0, 0};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto it = tally.find(labels[i]);
    if (it == tally.end())
      throw DataError("per_class_top1: label " + std::to_string(labels[i]) +
                      " outside the class set");
    ++it->second.second;
    if (predictions[i] == labels[i]) ++it->second.first;
  }
  double sum = 0.0;
  for (auto& [id, counts] : tally) {
    if (counts.second == 0)
      throw DataError("per_class_top1: class " + std::to_string(id) + " has no images");
    double acc = 100.0 * static_cast<double>(counts.first) / static_cast<double>(counts.second);
    if (per_class) (*per_class)[id] = acc;
    sum += acc;
  }
  return sum / static_cast<double>(tally.size());
}

inline double harmonic_mean(double u, double s) {
  if (u + s == 0.0) return 0.0;
  return 2.0 * u * s / (u + s);
}

struct EvalReport {
  double t1 = 0.0;  // unseen accuracy, candidates restricted to unseen classes
  double u = 0.0;   // unseen accuracy under calibrated stacking over all classes
  double s = 0.0;   // seen accuracy under calibrated stacking
  double h = 0.0;
  double gamma_cs = 0.0;
  int p = 0;
  std::map<int, double> per_class;  // calibrated per-class accuracy, both splits

  std::string to_json() const {
    std::string out = "{\n";
    out += "  \"T1\": " + format_double(t1) + ",\n";
    out += "  \"U\": " + format_double(u) + ",\n";
    out += "  \"S\": " + format_double(s) + ",\n";
    out += "  \"H\": " + format_double(h) + ",\n";
    out += "  \"gamma_cs\": " + format_double(gamma_cs) + ",\n";
    out += "  \"p\": " + std::to_string(p) + ",\n";
    out += "  \"per_class\": {";
    bool first = true;
    for (auto& [id, acc] : per_class) {
      out += first ? "\n" : ",\n";
      out += "    \"" + std::to_string(id) + "\": " + format_double(acc);
      first = false;
    }
    out += first ? "}\n" : "\n  }\n";
    out += "}\n";
    return out;
  }
};

// unseen_table scores the held-out-class images, seen_table the held-out
// images of training classes; both against every class.
inline EvalReport evaluate_tables(const ScoreTable& unseen_table,
                                  const std::vector<int>& unseen_labels,
                                  const ScoreTable& seen_table,
                                  const std::vector<int>& seen_labels, const std::set<int>& seen,
                                  const std::set<int>& unseen, double gamma_cs, int p) {
  EvalReport rep;
  rep.gamma_cs = gamma_cs;
  rep.p = p;
  rep.t1 = per_class_top1(predict_restricted(unseen_table, unseen), unseen_labels, unseen);
  rep.u = per_class_top1(predict_calibrated(unseen_table, seen, gamma_cs), unseen_labels, unseen,
                         &rep.per_class);
  rep.s = per_class_top1(predict_calibrated(seen_table, seen, gamma_cs), seen_labels, seen,
                         &rep.per_class);
  rep.h = harmonic_mean(rep.u, rep.s);
  return rep;
}

// Sweep the handicap over a grid, maximizing the harmonic mean of the two
// splits; ties keep the earliest grid entry.
inline double select_gamma_cs(const ScoreTable& unseen_table,
                              const std::vector<int>& unseen_labels,
                              const ScoreTable& seen_table, const std::vector<int>& seen_labels,
                              const std::set<int>& seen, const std::set<int>& unseen,
                              const std::vector<double>& grid) {
  if (grid.empty()) throw DataError("select_gamma_cs: empty grid");
  double best_gamma = grid[0], best_h = -1.0;
  for (double g : grid) {
    double u = per_class_top1(predict_calibrated(unseen_table, seen, g), unseen_labels, unseen);
    double s = per_class_top1(predict_calibrated(seen_table, seen, g), seen_labels, seen);
    double h = harmonic_mean(u, s);
    if (h > best_h) {
      best_h = h;
      best_gamma = g;
    }
  }
  return best_gamma;
}

}  // namespace emdepart
