#pragma once

#include <fstream>
#include <initializer_list>
#include <string>

#include "emdepart/data.hpp"
#include "emdepart/model.hpp"
#include "emdepart/trainer.hpp"

namespace emdepart {

// Run configuration for the command-line tools. A config file is a JSON
// object with up to five sections: data, model, alignment, train, eval.
// Every section and every key is optional; anything unrecognized is an
// error rather than a silent no-op. Paths and run modes stay on the command
// line, only hyperparameters live here.
//
// model.r0 and model.token_dim are not accepted: both are fixed by the
// dataset the tool loads.

struct DataConfig {
  OovPolicy oov = OovPolicy::Skip;
};

struct EvalConfig {
  double gamma_cs = 0.0;  // calibrated-stacking penalty on seen classes
  bool use_partial = true;
};

struct CliConfig {
  DataConfig data;
  ModelConfig model;
  AlignmentConfig align;
  TrainConfig train;
  EvalConfig eval;
};

namespace detail {

inline void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw DataError(where + " must be a JSON object");
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> keys,
                           const std::string& where) {
  for (auto& [key, _] : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || key == k;
    if (!known) throw DataError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void fetch(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception& e) {
    throw DataError("bad value for '" + std::string(key) + "' in " + where + ": " + e.what());
  }
}

inline void apply_data(const json& j, DataConfig& c) {
  require_object(j, "data section");
  reject_unknown(j, {"oov"}, "data section");
  if (!j.contains("oov")) return;
  std::string s = j.at("oov").get<std::string>();
  if (s == "skip") c.oov = OovPolicy::Skip;
  else if (s == "zero") c.oov = OovPolicy::Zero;
  else throw DataError("data.oov must be 'skip' or 'zero', got '" + s + "'");
}

inline void apply_model(const json& j, ModelConfig& c) {
  require_object(j, "model section");
  reject_unknown(j,
                 {"r", "k", "encoder_layers", "heads", "sdm_layers", "r_h", "dropout", "init_seed",
                  "no_global", "no_residual"},
                 "model section");
  fetch(j, "r", c.r, "model");
  fetch(j, "k", c.k, "model");
  fetch(j, "encoder_layers", c.encoder_layers, "model");
  fetch(j, "heads", c.heads, "model");
  fetch(j, "sdm_layers", c.sdm_layers, "model");
  fetch(j, "r_h", c.r_h, "model");
  fetch(j, "dropout", c.dropout, "model");
  fetch(j, "init_seed", c.init_seed, "model");
  fetch(j, "no_global", c.no_global, "model");
  fetch(j, "no_residual", c.no_residual, "model");
}

inline void apply_alignment(const json& j, AlignmentConfig& c) {
  require_object(j, "alignment section");
  reject_unknown(
      j, {"tau", "lambda_local", "lambda_var", "lambda_div", "gamma", "eps_var", "p", "variant",
          "pooling"},
      "alignment section");
  fetch(j, "tau", c.tau, "alignment");
  fetch(j, "lambda_local", c.lambda_local, "alignment");
  fetch(j, "lambda_var", c.lambda_var, "alignment");
  fetch(j, "lambda_div", c.lambda_div, "alignment");
  fetch(j, "gamma", c.gamma, "alignment");
  fetch(j, "eps_var", c.eps_var, "alignment");
  fetch(j, "p", c.p, "alignment");
  if (j.contains("variant")) c.variant = similarity_from_string(j.at("variant").get<std::string>());
  if (j.contains("pooling")) {
    std::string pool = j.at("pooling").get<std::string>();
    if (pool != "mean" && pool != "max")
      throw DataError("alignment.pooling must be 'mean' or 'max', got '" + pool + "'");
    c.pooling = pool == "mean" ? Pooling::Mean : Pooling::Max;
  }
}

inline void apply_train(const json& j, TrainConfig& c) {
  require_object(j, "train section");
  reject_unknown(j,
                 {"lr", "batch_size", "epochs", "warmup_epochs", "seed", "use_validation_protocol",
                  "gamma_cs", "no_partial_score"},
                 "train section");
  fetch(j, "lr", c.lr, "train");
  fetch(j, "batch_size", c.batch_size, "train");
  fetch(j, "epochs", c.epochs, "train");
  fetch(j, "warmup_epochs", c.warmup_epochs, "train");
  fetch(j, "seed", c.seed, "train");
  fetch(j, "use_validation_protocol", c.use_validation_protocol, "train");
  fetch(j, "gamma_cs", c.gamma_cs, "train");
  fetch(j, "no_partial_score", c.no_partial_score, "train");
}

inline void apply_eval(const json& j, EvalConfig& c) {
  require_object(j, "eval section");
  reject_unknown(j, {"gamma_cs", "use_partial"}, "eval section");
  fetch(j, "gamma_cs", c.gamma_cs, "eval");
  fetch(j, "use_partial", c.use_partial, "eval");
}

}  // namespace detail

inline CliConfig parse_cli_config(const json& j) {
  detail::require_object(j, "config file");
  detail::reject_unknown(j, {"data", "model", "alignment", "train", "eval"}, "config file");
  CliConfig cfg;
  if (j.contains("data")) detail::apply_data(j.at("data"), cfg.data);
  if (j.contains("model")) detail::apply_model(j.at("model"), cfg.model);
  if (j.contains("alignment")) detail::apply_alignment(j.at("alignment"), cfg.align);
  if (j.contains("train")) detail::apply_train(j.at("train"), cfg.train);
  if (j.contains("eval")) detail::apply_eval(j.at("eval"), cfg.eval);
  return cfg;
}

inline json read_config_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open config file " + path);
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw DataError("config file " + path + " is not valid JSON: " + e.what());
  }
}

inline CliConfig load_cli_config(const std::string& path) {
  if (path.empty()) return CliConfig{};
  return parse_cli_config(read_config_json(path));
}

// Sweep description for grid search, written as its own JSON file:
//   {"axes": [{"name": "lambda_div", "values": [0, 1, 3]}], "cartesian": false}
inline GridSpec load_grid_spec(const std::string& path) {
  json j = read_config_json(path);
  detail::require_object(j, "grid file");
  detail::reject_unknown(j, {"axes", "cartesian"}, "grid file");
  if (!j.contains("axes")) throw DataError("grid file needs an 'axes' array");
  const json& axes = j.at("axes");
  if (!axes.is_array() || axes.empty()) throw DataError("grid 'axes' must be a nonempty array");
  GridSpec spec;
  for (const json& a : axes) {
    detail::require_object(a, "grid axis");
    detail::reject_unknown(a, {"name", "values"}, "grid axis");
    SweepAxis axis;
    detail::fetch(a, "name", axis.name, "grid axis");
    detail::fetch(a, "values", axis.values, "grid axis");
    if (axis.name.empty() || axis.values.empty())
      throw DataError("each grid axis needs a name and at least one value");
    spec.axes.push_back(std::move(axis));
  }
  detail::fetch(j, "cartesian", spec.cartesian, "grid file");
  return spec;
}

}  // namespace emdepart
