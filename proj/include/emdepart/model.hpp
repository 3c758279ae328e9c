#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "emdepart/alignment.hpp"
#include "emdepart/data.hpp"
#include "emdepart/inference.hpp"
#include "emdepart/perceivers.hpp"
#include "emdepart/sdm.hpp"

namespace emdepart {

struct ModelConfig {
  std::size_t r0 = 0;  // raw patch feature width, taken from the data manifest
  std::size_t token_dim = kWordDim;
  std::size_t r = 256;  // shared embedding width
  std::size_t k = 4;    // view embeddings per instance
  std::size_t encoder_layers = 2;
  std::size_t heads = 4;
  std::size_t sdm_layers = 2;
  std::size_t r_h = 0;  // decomposition attention width, 0 picks r
  double dropout = 0.0;
  std::uint64_t init_seed = 1;
  bool no_global = false;    // ablation: no global residual onto the views
  bool no_residual = false;  // ablation: image perceiver without its residual
};

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"r0", c.r0},
           {"token_dim", c.token_dim},
           {"r", c.r},
           {"k", c.k},
           {"encoder_layers", c.encoder_layers},
           {"heads", c.heads},
           {"sdm_layers", c.sdm_layers},
           {"r_h", c.r_h},
           {"dropout", c.dropout},
           {"init_seed", c.init_seed},
           {"no_global", c.no_global},
           {"no_residual", c.no_residual}};
}

inline void from_json(const json& j, ModelConfig& c) {
  c = ModelConfig{};
  j.at("r0").get_to(c.r0);
  j.at("token_dim").get_to(c.token_dim);
  j.at("r").get_to(c.r);
  j.at("k").get_to(c.k);
  j.at("encoder_layers").get_to(c.encoder_layers);
  j.at("heads").get_to(c.heads);
  j.at("sdm_layers").get_to(c.sdm_layers);
  j.at("r_h").get_to(c.r_h);
  j.at("dropout").get_to(c.dropout);
  j.at("init_seed").get_to(c.init_seed);
  j.at("no_global").get_to(c.no_global);
  j.at("no_residual").get_to(c.no_residual);
}

inline void to_json(json& j, const AlignmentConfig& c) {
  j = json{{"tau", c.tau},
           {"lambda_local", c.lambda_local},
           {"lambda_var", c.lambda_var},
           {"lambda_div", c.lambda_div},
           {"gamma", c.gamma},
           {"eps_var", c.eps_var},
           {"p", c.p},
           {"variant", to_string(c.variant)},
           {"pooling", c.pooling == Pooling::Mean ? "mean" : "max"}};
}

inline void from_json(const json& j, AlignmentConfig& c) {
  c = AlignmentConfig{};
  j.at("tau").get_to(c.tau);
  j.at("lambda_local").get_to(c.lambda_local);
  j.at("lambda_var").get_to(c.lambda_var);
  j.at("lambda_div").get_to(c.lambda_div);
  j.at("gamma").get_to(c.gamma);
  j.at("eps_var").get_to(c.eps_var);
  j.at("p").get_to(c.p);
  c.variant = similarity_from_string(j.at("variant").get<std::string>());
  std::string pool = j.at("pooling").get<std::string>();
  if (pool != "mean" && pool != "max") throw DataError("pooling must be mean or max");
  c.pooling = pool == "mean" ? Pooling::Mean : Pooling::Max;
}

inline ModelConfig validated(ModelConfig c) {
  if (c.r0 == 0) throw DataError("model config: r0 not set");
  if (c.r == 0 || c.k == 0) throw DataError("model config: r and k must be positive");
  if (c.dropout < 0.0 || c.dropout >= 1.0) throw DataError("model config: dropout outside [0,1)");
  return c;
}

struct EmDepartModel {
  ModelConfig cfg;
  ParamStore store;
  ImagePerceiverParams img;
  TextPerceiverParams txt;
  SdmParams sdm_v, sdm_t;
  CrossAttentionParams fg;

  explicit EmDepartModel(ModelConfig c)
      : cfg(validated(std::move(c))),
        store(cfg.init_seed),
        img(make_image_perceiver(store, "img", cfg.r0, cfg.r)),
        txt(make_text_perceiver(store, "txt", cfg.token_dim, cfg.r, cfg.encoder_layers, cfg.heads)),
        sdm_v(make_sdm(store, "sdm_v", cfg.k, cfg.r, cfg.sdm_layers, cfg.r_h)),
        sdm_t(make_sdm(store, "sdm_t", cfg.k, cfg.r, cfg.sdm_layers, cfg.r_h)),
        fg(make_cross_attention(store, "fg", cfg.r)) {}

  struct ImageForward {
    PerceivedImage perceived;
    SdmOut sdm;
  };

  struct TextForward {
    PerceivedText perceived;
    SdmOut sdm;
  };

  ImageForward forward_image(ForwardCtx& ctx, const Tensor& raw) const {
    PerceivedImage p = image_perceive(ctx, img, raw, cfg.no_residual);
    SdmOut s = sdm_forward(ctx, sdm_v, p.tokens, p.cls, cfg.no_global);
    return {p, s};
  }

  TextForward forward_text(ForwardCtx& ctx, const Tensor& token_embs) const {
    PerceivedText p = text_perceive(ctx, txt, token_embs);
    SdmOut s = sdm_forward(ctx, sdm_t, p.tokens, p.cls, cfg.no_global);
    return {p, s};
  }

  // Plain snapshots with dropout off; the throwaway tape never runs backward.
  ViewEmbeddings embed_image(const Tensor& raw) const {
    Tape tape;
    Rng rng(0);
    ForwardCtx ctx{tape, rng};
    return snapshot(forward_image(ctx, raw).sdm);
  }

  ViewEmbeddings embed_text(const Tensor& token_embs) const {
    Tape tape;
    Rng rng(0);
    ForwardCtx ctx{tape, rng};
    return snapshot(forward_text(ctx, token_embs).sdm);
  }

  AggregationTrace trace_image(const Tensor& raw) const {
    Tape tape;
    Rng rng(0);
    ForwardCtx ctx{tape, rng};
    return snapshot_trace(forward_image(ctx, raw).sdm);
  }

  AggregationTrace trace_text(const Tensor& token_embs) const {
    Tape tape;
    Rng rng(0);
    ForwardCtx ctx{tape, rng};
    return snapshot_trace(forward_text(ctx, token_embs).sdm);
  }
};

// ---- dataset-level helpers ----

inline Tensor document_token_matrix(const Dataset& ds, int class_id) {
  auto it = ds.docs.tokens.find(class_id);
  if (it == ds.docs.tokens.end())
    throw DataError("no document for class " + std::to_string(class_id));
  return embed_tokens(it->second, ds.table);
}

inline std::map<int, ViewEmbeddings> embed_classes(const EmDepartModel& m, const Dataset& ds,
                                                   const std::vector<int>& class_ids) {
  std::map<int, ViewEmbeddings> out;
  for (int id : class_ids) out.emplace(id, m.embed_text(document_token_matrix(ds, id)));
  return out;
}

// Scores every listed image against every class embedding, honoring the
// configured similarity variant and, optionally, the partial top-p match.
inline ScoreTable score_table(const EmDepartModel& m, const FeatureBank& bank,
                              const std::vector<std::size_t>& image_indices,
                              const std::map<int, ViewEmbeddings>& classes,
                              const AlignmentConfig& acfg, bool use_partial = true) {
  ScoreTable table;
  for (auto& [id, emb] : classes) table.class_ids.push_back(id);
  for (std::size_t idx : image_indices) {
    ViewEmbeddings v = m.embed_image(bank.image(idx));
    std::vector<double> row;
    row.reserve(table.class_ids.size());
    for (auto& [id, emb] : classes) row.push_back(set_score(v.B, emb.B, acfg, use_partial));
    table.rows.push_back(std::move(row));
  }
  table.require_consistent();
  return table;
}

inline std::vector<int> labels_for(const FeatureBank& bank, const std::vector<std::size_t>& idxs) {
  std::vector<int> out;
  out.reserve(idxs.size());
  for (std::size_t i : idxs) {
    if (i >= bank.labels.size()) throw DataError("image index out of range");
    out.push_back(bank.labels[i]);
  }
  return out;
}

// Full test protocol: held-out-class images and held-out seen images, both
// scored against the union of classes.
inline EvalReport evaluate_model(const EmDepartModel& m, const Dataset& ds,
                                 const AlignmentConfig& acfg, double gamma_cs,
                                 bool use_partial = true) {
  std::vector<int> all_ids;
  all_ids.insert(all_ids.end(), ds.splits.seen.begin(), ds.splits.seen.end());
  all_ids.insert(all_ids.end(), ds.splits.unseen.begin(), ds.splits.unseen.end());
  auto classes = embed_classes(m, ds, all_ids);
  ScoreTable unseen_t = score_table(m, ds.bank, ds.splits.test_images, classes, acfg, use_partial);
  ScoreTable seen_t =
      score_table(m, ds.bank, ds.splits.test_seen_images, classes, acfg, use_partial);
  std::set<int> seen(ds.splits.seen.begin(), ds.splits.seen.end());
  std::set<int> unseen(ds.splits.unseen.begin(), ds.splits.unseen.end());
  return evaluate_tables(unseen_t, labels_for(ds.bank, ds.splits.test_images), seen_t,
                         labels_for(ds.bank, ds.splits.test_seen_images), seen, unseen, gamma_cs,
                         acfg.p);
}

// ---- checkpointing ----
// Single file: one JSON header line, then a raw little-endian blob holding
// every parameter in creation order, then any extra tensors in listed order.
// dtype f64 round-trips bit-exactly; f32 matches the compact external format.

struct CheckpointExtra {
  std::map<std::string, std::string> strings;
  std::map<std::string, Tensor> tensors;
};

inline void save_checkpoint(const std::string& path, EmDepartModel& m,
                            const CheckpointExtra* extra = nullptr,
                            const std::string& dtype = "f64") {
  if (dtype != "f64" && dtype != "f32") throw DataError("checkpoint dtype must be f64 or f32");
  json header;
  header["format"] = "emdepart";
  header["version"] = 1;
  header["dtype"] = dtype;
  header["model"] = m.cfg;
  std::size_t width = dtype == "f64" ? 8 : 4, offset = 0;
  json plist = json::array();
  for (Parameter* p : m.store.items()) {
    plist.push_back(json{{"name", p->name}, {"shape", p->value.shape}, {"offset", offset}});
    offset += p->value.numel() * width;
  }
  header["params"] = plist;
  json elist = json::array();
  if (extra) {
    header["extra_strings"] = extra->strings;
    for (auto& [name, t] : extra->tensors) {
      elist.push_back(json{{"name", name}, {"shape", t.shape}, {"offset", offset}});
      offset += t.numel() * width;
    }
  } else {
    header["extra_strings"] = json::object();
  }
  header["extra_tensors"] = elist;

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f << header.dump() << "\n";
  auto write_tensor = [&](const Tensor& t) {
    for (double v : t.data) {
      if (dtype == "f64")
        write_f64_le(f, v);
      else
        write_f32_le(f, v);
    }
  };
  for (Parameter* p : m.store.items()) write_tensor(p->value);
  if (extra)
    for (auto& [name, t] : extra->tensors) write_tensor(t);
  if (!f) throw DataError("short write to " + path);
}

inline json read_checkpoint_header(std::istream& f, const std::string& path) {
  std::string line;
  if (!std::getline(f, line)) throw DataError("cannot read checkpoint header from " + path);
  json header = json::parse(line, nullptr, false);
  if (header.is_discarded()) throw DataError("checkpoint header is not valid JSON: " + path);
  if (header.value("format", "") != "emdepart" || header.value("version", 0) != 1)
    throw DataError("unrecognized checkpoint format in " + path);
  return header;
}

inline ModelConfig peek_checkpoint_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  return read_checkpoint_header(f, path).at("model").get<ModelConfig>();
}

// Fills an already-constructed model whose architecture matches the header.
inline void load_checkpoint_into(const std::string& path, EmDepartModel& m,
                                 CheckpointExtra* extra = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  json header = read_checkpoint_header(f, path);
  std::string dtype = header.at("dtype").get<std::string>();
  if (dtype != "f64" && dtype != "f32") throw DataError("checkpoint dtype must be f64 or f32");

  auto params = m.store.items();
  const json& plist = header.at("params");
  if (plist.size() != params.size())
    throw DataError("checkpoint holds " + std::to_string(plist.size()) + " parameters, model has " +
                    std::to_string(params.size()));
  auto read_tensor = [&](Tensor& t, const std::string& what) {
    for (auto& v : t.data) v = dtype == "f64" ? read_f64_le(f) : read_f32_le(f);
    t.check_finite("checkpoint " + what);
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    const json& entry = plist[i];
    if (entry.at("name").get<std::string>() != params[i]->name)
      throw DataError("checkpoint parameter '" + entry.at("name").get<std::string>() +
                      "' does not match model parameter '" + params[i]->name + "'");
    Shape shape = entry.at("shape").get<Shape>();
    if (shape != params[i]->value.shape)
      throw DataError("checkpoint shape mismatch for " + params[i]->name);
  }
  for (Parameter* p : params) read_tensor(p->value, p->name);

  if (extra) {
    extra->strings = header.at("extra_strings").get<std::map<std::string, std::string>>();
    extra->tensors.clear();
    for (const json& entry : header.at("extra_tensors")) {
      Tensor t(entry.at("shape").get<Shape>());
      read_tensor(t, entry.at("name").get<std::string>());
      extra->tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
    }
  } else {
    // Skip any training-state tensors; plain model loads ignore them.
    std::size_t skip = 0;
    for (const json& entry : header.at("extra_tensors"))
      skip += shape_numel(entry.at("shape").get<Shape>());
    f.ignore(static_cast<std::streamsize>(skip * (dtype == "f64" ? 8 : 4)));
    if (!f) throw DataError("truncated checkpoint " + path);
  }
  f.peek();
  if (!f.eof()) throw DataError("trailing bytes in checkpoint " + path);
}

inline EmDepartModel load_checkpoint(const std::string& path, CheckpointExtra* extra = nullptr) {
  EmDepartModel m(peek_checkpoint_config(path));
  load_checkpoint_into(path, m, extra);
  return m;
}

}  // namespace emdepart
