#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "emdepart/model.hpp"

namespace emdepart {

struct TrainConfig {
  double lr = 1e-4;
  std::size_t batch_size = 64;
  std::size_t epochs = 32;
  std::size_t warmup_epochs = 0;
  std::uint64_t seed = 7;  // batch order and dropout draws
  bool use_validation_protocol = false;
  double gamma_cs = 0.0;          // seen-class handicap for logged and final H
  bool no_partial_score = false;  // ablation: full smooth match at inference
};

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"lr", c.lr},
           {"batch_size", c.batch_size},
           {"epochs", c.epochs},
           {"warmup_epochs", c.warmup_epochs},
           {"seed", c.seed},
           {"use_validation_protocol", c.use_validation_protocol},
           {"gamma_cs", c.gamma_cs},
           {"no_partial_score", c.no_partial_score}};
}

inline void from_json(const json& j, TrainConfig& c) {
  c = TrainConfig{};
  j.at("lr").get_to(c.lr);
  j.at("batch_size").get_to(c.batch_size);
  j.at("epochs").get_to(c.epochs);
  j.at("warmup_epochs").get_to(c.warmup_epochs);
  j.at("seed").get_to(c.seed);
  j.at("use_validation_protocol").get_to(c.use_validation_protocol);
  j.at("gamma_cs").get_to(c.gamma_cs);
  j.at("no_partial_score").get_to(c.no_partial_score);
}

// Linear ramp to base_lr over the warmup epochs, then half-cosine decay to 0
// across the remaining epochs.
inline double cosine_lr(std::size_t epoch, const TrainConfig& cfg) {
  if (cfg.epochs == 0) throw DataError("cosine_lr: zero epochs");
  if (epoch >= cfg.epochs) throw DataError("cosine_lr: epoch beyond schedule");
  if (epoch < cfg.warmup_epochs)
    return cfg.lr * static_cast<double>(epoch) / static_cast<double>(cfg.warmup_epochs);
  std::size_t last = cfg.epochs - 1;
  if (last <= cfg.warmup_epochs) return cfg.lr;
  double progress = static_cast<double>(epoch - cfg.warmup_epochs) /
                    static_cast<double>(last - cfg.warmup_epochs);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---- Adam ----

struct AdamState {
  std::vector<Tensor> m, v;  // aligned with the store's creation order
  std::size_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

inline AdamState make_adam(ParamStore& store) {
  AdamState st;
  for (Parameter* p : store.items()) {
    st.m.push_back(Tensor::zeros(p->value.shape));
    st.v.push_back(Tensor::zeros(p->value.shape));
  }
  return st;
}

// Bias-corrected update; leaves every gradient zeroed.
inline void adam_step(ParamStore& store, AdamState& st, double lr) {
  auto params = store.items();
  if (params.size() != st.m.size())
    throw ShapeError("adam_step: state tracks " + std::to_string(st.m.size()) +
                     " parameters, store has " + std::to_string(params.size()));
  ++st.step;
  double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    for (std::size_t j = 0; j < p.value.numel(); ++j) {
      double g = p.grad.data[j];
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + p.name);
      double& m = st.m[i].data[j];
      double& v = st.v[i].data[j];
      m = st.beta1 * m + (1.0 - st.beta1) * g;
      v = st.beta2 * v + (1.0 - st.beta2) * g * g;
      p.value.data[j] -= lr * (m / bc1) / (std::sqrt(v / bc2) + st.eps);
    }
  }
  store.zero_grads();
}

// ---- split protocols ----

// Resolves which classes are trained, which act as unseen, and which images
// feed training and the two evaluation splits. The validation protocol retires
// val_seen from training and treats its classes as the unseen side.
struct Protocol {
  std::set<int> seen, unseen;
  std::vector<int> train_classes;  // sorted; the cross-entropy candidate list
  std::vector<std::size_t> train_pool;
  std::vector<std::size_t> eval_unseen_images, eval_seen_images;
};

inline Protocol make_protocol(const Dataset& ds, bool use_validation) {
  Protocol p;
  if (!use_validation) {
    p.seen.insert(ds.splits.seen.begin(), ds.splits.seen.end());
    p.unseen.insert(ds.splits.unseen.begin(), ds.splits.unseen.end());
    p.train_pool = train_indices(ds.bank, ds.splits);
    p.eval_unseen_images = ds.splits.test_images;
    p.eval_seen_images = ds.splits.test_seen_images;
  } else {
    if (ds.splits.val_seen.empty())
      throw DataError("validation protocol requires a val_seen partition");
    std::set<int> val(ds.splits.val_seen.begin(), ds.splits.val_seen.end());
    for (int id : ds.splits.seen)
      if (!val.count(id)) p.seen.insert(id);
    if (p.seen.empty()) throw DataError("validation protocol leaves no training classes");
    p.unseen = val;
    std::set<std::size_t> held(ds.splits.test_seen_images.begin(),
                               ds.splits.test_seen_images.end());
    for (std::size_t i = 0; i < ds.bank.num_images(); ++i) {
      int label = ds.bank.labels[i];
      if (p.unseen.count(label)) {
        p.eval_unseen_images.push_back(i);
      } else if (p.seen.count(label)) {
        if (held.count(i))
          p.eval_seen_images.push_back(i);
        else
          p.train_pool.push_back(i);
      }
    }
    if (p.train_pool.empty()) throw DataError("validation protocol: no training images");
    if (p.eval_seen_images.empty())
      throw DataError("validation protocol: no held-out seen images left");
  }
  p.train_classes.assign(p.seen.begin(), p.seen.end());
  return p;
}

struct ProtocolEval {
  double t1 = 0.0, u = 0.0, s = 0.0, h = 0.0;
};

inline ProtocolEval protocol_eval(const EmDepartModel& m, const Dataset& ds, const Protocol& pr,
                                  const AlignmentConfig& acfg, double gamma_cs, bool use_partial) {
  std::vector<int> all_ids(pr.seen.begin(), pr.seen.end());
  all_ids.insert(all_ids.end(), pr.unseen.begin(), pr.unseen.end());
  auto classes = embed_classes(m, ds, all_ids);
  ScoreTable unseen_t = score_table(m, ds.bank, pr.eval_unseen_images, classes, acfg, use_partial);
  ScoreTable seen_t = score_table(m, ds.bank, pr.eval_seen_images, classes, acfg, use_partial);
  EvalReport rep =
      evaluate_tables(unseen_t, labels_for(ds.bank, pr.eval_unseen_images), seen_t,
                      labels_for(ds.bank, pr.eval_seen_images), pr.seen, pr.unseen, gamma_cs,
                      acfg.p);
  return {rep.t1, rep.u, rep.s, rep.h};
}

// Sweeps the seen-class handicap on the protocol's evaluation split,
// maximizing H; ties keep the smallest handicap.
inline double tune_gamma_cs(const EmDepartModel& m, const Dataset& ds, const Protocol& pr,
                            const AlignmentConfig& acfg, const std::vector<double>& grid,
                            bool use_partial) {
  std::vector<int> all_ids(pr.seen.begin(), pr.seen.end());
  all_ids.insert(all_ids.end(), pr.unseen.begin(), pr.unseen.end());
  auto classes = embed_classes(m, ds, all_ids);
  ScoreTable unseen_t = score_table(m, ds.bank, pr.eval_unseen_images, classes, acfg, use_partial);
  ScoreTable seen_t = score_table(m, ds.bank, pr.eval_seen_images, classes, acfg, use_partial);
  return select_gamma_cs(unseen_t, labels_for(ds.bank, pr.eval_unseen_images), seen_t,
                         labels_for(ds.bank, pr.eval_seen_images), pr.seen, pr.unseen, grid);
}

inline std::vector<double> default_gamma_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 40; ++i) g.push_back(static_cast<double>(i) * 0.05);
  return g;
}

// ---- one optimization step ----

struct BatchStats {
  double l_global = 0.0, l_local = 0.0, l_var = 0.0, l_div = 0.0;
  double svar_v = 0.0, svar_t = 0.0;  // mean circular variance of E_L rows
};

namespace detail {

template <typename F>
Value named_loss_component(const char* name, F&& build) {
  try {
    Value v = build();
    if (!std::isfinite(v.val().at(0)))
      throw NumericError(std::string(name) + " became non-finite");
    return v;
  } catch (const NumericError& e) {
    throw NumericError(std::string(name) + ": " + e.what());
  }
}

}  // namespace detail

// Forward both modalities, assemble the four-term objective, backprop, and
// apply one Adam update. Document token matrices arrive precomputed; the text
// side runs once per step over the candidate classes.
inline BatchStats train_step(EmDepartModel& model, const std::map<int, Tensor>& doc_tokens,
                             const FeatureBank& bank, const std::vector<std::size_t>& batch,
                             const std::vector<int>& train_classes, const AlignmentConfig& acfg,
                             Rng& drop_rng, AdamState& adam, double lr) {
  Tape tape;
  ForwardCtx ctx{tape, drop_rng, true, model.cfg.dropout};
  std::map<int, std::size_t> class_pos;
  for (std::size_t c = 0; c < train_classes.size(); ++c) class_pos[train_classes[c]] = c;

  std::vector<Value> txt_b, txt_tokens, txt_el;
  std::vector<std::vector<Value>> txt_traces;
  for (int id : train_classes) {
    auto it = doc_tokens.find(id);
    if (it == doc_tokens.end()) throw DataError("missing document tokens for class " + std::to_string(id));
    auto fwd = model.forward_text(ctx, it->second);
    txt_b.push_back(fwd.sdm.B);
    txt_el.push_back(fwd.sdm.E_L);
    txt_tokens.push_back(fwd.perceived.tokens);
    txt_traces.push_back(fwd.sdm.block_logits);
  }

  std::vector<Value> img_b, img_tokens, img_el;
  std::vector<std::vector<Value>> img_traces;
  std::vector<std::size_t> labels;
  for (std::size_t idx : batch) {
    auto pos = class_pos.find(bank.labels[idx]);
    if (pos == class_pos.end())
      throw DataError("image " + std::to_string(idx) + " labeled outside the training classes");
    labels.push_back(pos->second);
    auto fwd = model.forward_image(ctx, bank.image(idx));
    img_b.push_back(fwd.sdm.B);
    img_el.push_back(fwd.sdm.E_L);
    img_tokens.push_back(fwd.perceived.tokens);
    img_traces.push_back(fwd.sdm.block_logits);
  }

  Value lg = detail::named_loss_component("L_global", [&] {
    return loss_global(tape, img_b, txt_b, labels, acfg.tau, acfg.variant);
  });
  Value ll = detail::named_loss_component("L_local", [&] {
    return loss_local(ctx, model.fg, img_tokens, txt_tokens, labels, acfg.pooling);
  });
  Value lv = detail::named_loss_component("L_var", [&] {
    std::vector<Value> per_img, per_cls;
    for (auto& tr : img_traces)
      per_img.push_back(attention_spread_penalty(tape, tr, acfg.gamma, acfg.eps_var));
    for (auto& tr : txt_traces)
      per_cls.push_back(attention_spread_penalty(tape, tr, acfg.gamma, acfg.eps_var));
    return tape.scale(tape.add(tape.mean_all(tape.stack_scalars(per_cls)),
                               tape.mean_all(tape.stack_scalars(per_img))),
                      0.5);
  });
  double k = static_cast<double>(model.cfg.k);
  Value ld = detail::named_loss_component("L_div", [&] {
    std::vector<Value> per_img, per_cls;
    for (auto e : img_el) per_img.push_back(redundancy_penalty(tape, e));
    for (auto e : txt_el) per_cls.push_back(redundancy_penalty(tape, e));
    return tape.scale(tape.add(tape.mean_all(tape.stack_scalars(per_cls)),
                               tape.mean_all(tape.stack_scalars(per_img))),
                      1.0 / (2.0 * k * k));
  });
  LossBreakdown total = total_loss(tape, lg, ll, lv, ld, acfg);

  BatchStats stats;
  stats.l_global = lg.val().at(0);
  stats.l_local = ll.val().at(0);
  stats.l_var = lv.val().at(0);
  stats.l_div = ld.val().at(0);
  for (auto e : img_el) stats.svar_v += circular_variance(e.val());
  for (auto e : txt_el) stats.svar_t += circular_variance(e.val());
  stats.svar_v /= static_cast<double>(img_el.size());
  stats.svar_t /= static_cast<double>(txt_el.size());

  tape.backward(total.total);
  adam_step(model.store, adam, lr);
  return stats;
}

// ---- checkpointed training state ----

constexpr std::uint64_t kDropSeedMix = 0x9e3779b97f4a7c15ULL;
inline const char* kCsvHeader = "epoch,lr,L_global,L_local,L_var,L_div,S_var_V,S_var_T,val_T1,val_H";

struct TrainState {
  std::size_t epoch_next = 0;
  AdamState adam;
  Rng data_rng{0}, drop_rng{0};
};

inline CheckpointExtra pack_train_state(const EmDepartModel& model, const TrainState& st,
                                        const AlignmentConfig& acfg, const TrainConfig& tcfg) {
  CheckpointExtra extra;
  extra.strings["epoch_next"] = std::to_string(st.epoch_next);
  extra.strings["adam_step"] = std::to_string(st.adam.step);
  extra.strings["rng_data"] = st.data_rng.save_state();
  extra.strings["rng_drop"] = st.drop_rng.save_state();
  extra.strings["alignment_config"] = json(acfg).dump();
  extra.strings["train_config"] = json(tcfg).dump();
  auto params = const_cast<EmDepartModel&>(model).store.items();
  for (std::size_t i = 0; i < params.size(); ++i) {
    extra.tensors.emplace("adam.m." + params[i]->name, st.adam.m[i]);
    extra.tensors.emplace("adam.v." + params[i]->name, st.adam.v[i]);
  }
  return extra;
}

inline TrainState unpack_train_state(EmDepartModel& model, const CheckpointExtra& extra,
                                     const AlignmentConfig& acfg, const TrainConfig& tcfg) {
  TrainState st;
  auto need = [&](const std::string& key) {
    auto it = extra.strings.find(key);
    if (it == extra.strings.end()) throw DataError("checkpoint lacks training field " + key);
    return it->second;
  };
  if (need("alignment_config") != json(acfg).dump())
    throw DataError("resume alignment config does not match the checkpoint");
  if (need("train_config") != json(tcfg).dump())
    throw DataError("resume train config does not match the checkpoint");
  st.epoch_next = std::stoull(need("epoch_next"));
  st.adam = make_adam(model.store);
  st.adam.step = std::stoull(need("adam_step"));
  st.data_rng.load_state(need("rng_data"));
  st.drop_rng.load_state(need("rng_drop"));
  auto params = model.store.items();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto m = extra.tensors.find("adam.m." + params[i]->name);
    auto v = extra.tensors.find("adam.v." + params[i]->name);
    if (m == extra.tensors.end() || v == extra.tensors.end())
      throw DataError("checkpoint lacks optimizer state for " + params[i]->name);
    if (m->second.shape != params[i]->value.shape || v->second.shape != params[i]->value.shape)
      throw DataError("optimizer state shape mismatch for " + params[i]->name);
    st.adam.m[i] = m->second;
    st.adam.v[i] = v->second;
  }
  return st;
}

// ---- the training loop ----

struct TrainPaths {
  std::string metrics;     // CSV target; empty keeps it in memory only
  std::string checkpoint;  // rewritten after every epoch; empty disables
  std::string resume;      // checkpoint to continue from
};

struct TrainResult {
  std::string csv;  // header plus one row per epoch run here
  EvalReport final_eval;
  std::size_t epochs_run = 0;
};

// stop_after limits how many epochs this invocation runs (0 = to completion);
// the per-epoch checkpoint lets a later call resume where it stopped.
inline TrainResult train(EmDepartModel& model, const Dataset& ds, const AlignmentConfig& acfg,
                         const TrainConfig& tcfg, const TrainPaths& paths = {},
                         std::size_t stop_after = 0) {
  Protocol protocol = make_protocol(ds, tcfg.use_validation_protocol);
  std::map<int, Tensor> doc_tokens;
  std::vector<int> all_ids(protocol.seen.begin(), protocol.seen.end());
  all_ids.insert(all_ids.end(), protocol.unseen.begin(), protocol.unseen.end());
  for (int id : all_ids) doc_tokens.emplace(id, document_token_matrix(ds, id));

  TrainState st;
  if (!paths.resume.empty()) {
    CheckpointExtra extra;
    load_checkpoint_into(paths.resume, model, &extra);
    st = unpack_train_state(model, extra, acfg, tcfg);
  } else {
    st.adam = make_adam(model.store);
    st.data_rng = Rng(tcfg.seed);
    st.drop_rng = Rng(tcfg.seed ^ kDropSeedMix);
  }

  std::ofstream csv_file;
  bool write_header = true;
  if (!paths.metrics.empty()) {
    if (!paths.resume.empty()) {
      std::ifstream probe(paths.metrics);
      write_header = !probe || probe.peek() == std::ifstream::traits_type::eof();
    }
    csv_file.open(paths.metrics, paths.resume.empty() ? std::ios::trunc : std::ios::app);
    if (!csv_file) throw DataError("cannot write " + paths.metrics);
  }
  std::string csv_text = std::string(kCsvHeader) + "\n";
  if (!paths.metrics.empty() && write_header) csv_file << kCsvHeader << "\n";

  TrainResult result;
  bool use_partial = !tcfg.no_partial_score;
  for (std::size_t epoch = st.epoch_next; epoch < tcfg.epochs; ++epoch) {
    if (stop_after != 0 && result.epochs_run >= stop_after) break;
    double lr = cosine_lr(epoch, tcfg);
    auto batches = batch_iter(protocol.train_pool, tcfg.batch_size, st.data_rng);
    BatchStats sums;
    std::size_t images = 0;
    double svar_batches = 0.0;
    for (const auto& batch : batches) {
      BatchStats s = train_step(model, doc_tokens, ds.bank, batch, protocol.train_classes, acfg,
                                st.drop_rng, st.adam, lr);
      double w = static_cast<double>(batch.size());
      sums.l_global += s.l_global * w;
      sums.l_local += s.l_local * w;
      sums.l_var += s.l_var * w;
      sums.l_div += s.l_div * w;
      sums.svar_v += s.svar_v * w;
      sums.svar_t += s.svar_t;
      images += batch.size();
      svar_batches += 1.0;
    }
    double inv = 1.0 / static_cast<double>(images);
    ProtocolEval ev = protocol_eval(model, ds, protocol, acfg, tcfg.gamma_cs, use_partial);

    std::string row = std::to_string(epoch) + "," + format_double(lr) + "," +
                      format_double(sums.l_global * inv) + "," + format_double(sums.l_local * inv) +
                      "," + format_double(sums.l_var * inv) + "," +
                      format_double(sums.l_div * inv) + "," + format_double(sums.svar_v * inv) +
                      "," + format_double(sums.svar_t / svar_batches) + "," +
                      format_double(ev.t1) + "," + format_double(ev.h);
    csv_text += row + "\n";
    if (!paths.metrics.empty()) {
      csv_file << row << "\n";
      csv_file.flush();
    }

    st.epoch_next = epoch + 1;
    ++result.epochs_run;
    if (!paths.checkpoint.empty()) {
      CheckpointExtra extra = pack_train_state(model, st, acfg, tcfg);
      save_checkpoint(paths.checkpoint, model, &extra);
    }
  }

  result.csv = csv_text;
  Protocol final_protocol = protocol;
  EvalReport rep;
  {
    std::vector<int> ids(final_protocol.seen.begin(), final_protocol.seen.end());
    ids.insert(ids.end(), final_protocol.unseen.begin(), final_protocol.unseen.end());
    auto classes = embed_classes(model, ds, ids);
    ScoreTable unseen_t =
        score_table(model, ds.bank, final_protocol.eval_unseen_images, classes, acfg, use_partial);
    ScoreTable seen_t =
        score_table(model, ds.bank, final_protocol.eval_seen_images, classes, acfg, use_partial);
    rep = evaluate_tables(unseen_t, labels_for(ds.bank, final_protocol.eval_unseen_images), seen_t,
                          labels_for(ds.bank, final_protocol.eval_seen_images), final_protocol.seen,
                          final_protocol.unseen, tcfg.gamma_cs, acfg.p);
  }
  result.final_eval = rep;
  return result;
}

// ---- hyperparameter sweeps ----

struct RunBundle {
  ModelConfig model;
  AlignmentConfig align;
  TrainConfig train;
};

inline void to_json(json& j, const RunBundle& b) {
  j = json{{"model", b.model}, {"alignment", b.align}, {"train", b.train}};
}

inline void from_json(const json& j, RunBundle& b) {
  j.at("model").get_to(b.model);
  j.at("alignment").get_to(b.align);
  j.at("train").get_to(b.train);
}

inline std::size_t axis_as_count(const std::string& name, double v) {
  if (v <= 0.0 || v != std::floor(v))
    throw DataError("sweep axis " + name + " needs a positive integer, got " + format_double(v));
  return static_cast<std::size_t>(v);
}

inline void apply_axis(RunBundle& b, const std::string& name, double v) {
  if (name == "lr") b.train.lr = v;
  else if (name == "batch_size") b.train.batch_size = axis_as_count(name, v);
  else if (name == "epochs") b.train.epochs = axis_as_count(name, v);
  else if (name == "warmup_epochs") b.train.warmup_epochs = static_cast<std::size_t>(v);
  else if (name == "dropout") b.model.dropout = v;
  else if (name == "r") b.model.r = axis_as_count(name, v);
  else if (name == "k") b.model.k = axis_as_count(name, v);
  else if (name == "tau") b.align.tau = v;
  else if (name == "gamma") b.align.gamma = v;
  else if (name == "lambda_local") b.align.lambda_local = v;
  else if (name == "lambda_var") b.align.lambda_var = v;
  else if (name == "lambda_div") b.align.lambda_div = v;
  else if (name == "p") b.align.p = static_cast<int>(axis_as_count(name, v));
  else throw DataError("unknown sweep axis '" + name + "'");
}

inline double read_axis(const RunBundle& b, const std::string& name) {
  if (name == "lr") return b.train.lr;
  if (name == "batch_size") return static_cast<double>(b.train.batch_size);
  if (name == "epochs") return static_cast<double>(b.train.epochs);
  if (name == "warmup_epochs") return static_cast<double>(b.train.warmup_epochs);
  if (name == "dropout") return b.model.dropout;
  if (name == "r") return static_cast<double>(b.model.r);
  if (name == "k") return static_cast<double>(b.model.k);
  if (name == "tau") return b.align.tau;
  if (name == "gamma") return b.align.gamma;
  if (name == "lambda_local") return b.align.lambda_local;
  if (name == "lambda_var") return b.align.lambda_var;
  if (name == "lambda_div") return b.align.lambda_div;
  if (name == "p") return static_cast<double>(b.align.p);
  throw DataError("unknown sweep axis '" + name + "'");
}

struct SweepAxis {
  std::string name;
  std::vector<double> values;
};

struct GridSpec {
  std::vector<SweepAxis> axes;
  bool cartesian = false;  // default: coordinate sweep in axis order
};

struct GridRun {
  RunBundle bundle;
  ProtocolEval eval;
};

struct GridSearchResult {
  RunBundle best;
  std::vector<GridRun> runs;
  std::string csv;  // one row per configuration
};

namespace detail {

inline ProtocolEval grid_run(const RunBundle& bundle, const Dataset& ds) {
  TrainConfig tcfg = bundle.train;
  tcfg.use_validation_protocol = true;
  EmDepartModel model(bundle.model);
  TrainResult res = train(model, ds, bundle.align, tcfg);
  return {res.final_eval.t1, res.final_eval.u, res.final_eval.s, res.final_eval.h};
}

}  // namespace detail

// Validation-protocol sweep. Coordinate mode walks the axes in order, fixing
// each axis at its best value before moving on; Cartesian mode runs the full
// product. Ties keep the earlier candidate.
inline GridSearchResult grid_search(const RunBundle& base, const GridSpec& spec,
                                    const Dataset& ds) {
  if (spec.axes.empty()) throw DataError("grid_search: no axes");
  for (const auto& axis : spec.axes)
    if (axis.values.empty()) throw DataError("grid_search: axis " + axis.name + " has no values");
  make_protocol(ds, true);  // fail fast without a validation partition

  GridSearchResult result;
  std::string header;
  for (const auto& axis : spec.axes) header += axis.name + ",";
  result.csv = header + "H,T1,U,S\n";
  auto record = [&](const RunBundle& b, const ProtocolEval& ev) {
    for (const auto& axis : spec.axes) result.csv += format_double(read_axis(b, axis.name)) + ",";
    result.csv += format_double(ev.h) + "," + format_double(ev.t1) + "," + format_double(ev.u) +
                  "," + format_double(ev.s) + "\n";
    result.runs.push_back({b, ev});
  };

  if (!spec.cartesian) {
    RunBundle current = base;
    for (const auto& axis : spec.axes) {
      double best_value = axis.values.front(), best_h = -1.0;
      for (double v : axis.values) {
        RunBundle candidate = current;
        apply_axis(candidate, axis.name, v);
        ProtocolEval ev = detail::grid_run(candidate, ds);
        record(candidate, ev);
        if (ev.h > best_h) {
          best_h = ev.h;
          best_value = v;
        }
      }
      apply_axis(current, axis.name, best_value);
    }
    result.best = current;
  } else {
    std::vector<std::size_t> pick(spec.axes.size(), 0);
    double best_h = -1.0;
    bool done = false;
    while (!done) {
      RunBundle candidate = base;
      for (std::size_t a = 0; a < spec.axes.size(); ++a)
        apply_axis(candidate, spec.axes[a].name, spec.axes[a].values[pick[a]]);
      ProtocolEval ev = detail::grid_run(candidate, ds);
      record(candidate, ev);
      if (ev.h > best_h) {
        best_h = ev.h;
        result.best = candidate;
      }
      std::size_t a = 0;
      for (;; ++a) {
        if (a == spec.axes.size()) {
          done = true;
          break;
        }
        if (++pick[a] < spec.axes[a].values.size()) break;
        pick[a] = 0;
      }
    }
  }
  return result;
}

}  // namespace emdepart
