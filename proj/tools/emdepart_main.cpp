// Command-line front end: synthetic data generation, training, evaluation,
// per-pair score inspection, diagnostics dumps, gradient checking, and
// hyperparameter sweeps. Hyperparameters come from a JSON config file; flags
// carry only paths and run modes.
//
// Exit codes: 0 success, 1 usage error, 2 data or config error, 3 numeric
// failure. Every command prints one JSON document on stdout.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "emdepart/config.hpp"
#include "emdepart/gradsuite.hpp"
#include "emdepart/inference.hpp"
#include "emdepart/model.hpp"
#include "emdepart/synthetic.hpp"
#include "emdepart/trainer.hpp"

namespace {

using namespace emdepart;
namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void emit(const json& j) { std::cout << j.dump(2) << "\n"; }

json tensor2d_json(const Tensor& t) {
  t.require_rank(2, "tensor2d_json");
  json rows = json::array();
  for (std::size_t i = 0; i < t.rows(); ++i) {
    json row = json::array();
    for (std::size_t j = 0; j < t.cols(); ++j) row.push_back(t.at(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

json tensor3d_json(const Tensor& t) {
  t.require_rank(3, "tensor3d_json");
  json out = json::array();
  for (std::size_t a = 0; a < t.shape[0]; ++a) {
    json mid = json::array();
    for (std::size_t b = 0; b < t.shape[1]; ++b) {
      json row = json::array();
      for (std::size_t c = 0; c < t.shape[2]; ++c) row.push_back(t.at(a, b, c));
      mid.push_back(std::move(row));
    }
    out.push_back(std::move(mid));
  }
  return out;
}

std::vector<int> all_class_ids(const Dataset& ds) {
  std::vector<int> ids(ds.splits.seen.begin(), ds.splits.seen.end());
  ids.insert(ids.end(), ds.splits.unseen.begin(), ds.splits.unseen.end());
  std::sort(ids.begin(), ids.end());
  return ids;
}

// ---- gen-synth ----

struct GenSynthOpts {
  std::string out;
  SynthConfig cfg;
};

int cmd_gen_synth(const GenSynthOpts& o) {
  if (o.cfg.views < 2)
    throw UsageError("--views must be at least 2: unseen classes are built from unseen "
                     "combinations of the seen views, which needs more than one view");
  SynthData sd = gen_synthetic(o.cfg);
  write_dataset(o.out, sd.ds);
  emit(json{{"command", "gen-synth"},
            {"out", o.out},
            {"images", sd.ds.bank.num_images()},
            {"classes_seen", o.cfg.c_seen},
            {"classes_unseen", o.cfg.c_unseen},
            {"views", o.cfg.views},
            {"seed", o.cfg.seed}});
  return 0;
}

// ---- shared loading helpers ----

Dataset load_data_dir(const std::string& dir, OovPolicy oov) { return load_dataset(dir, oov); }

ModelConfig sized_for(ModelConfig mc, const Dataset& ds) {
  mc.r0 = ds.bank.r0();
  mc.token_dim = kWordDim;
  return mc;
}

// Alignment settings for a checkpoint: the training-time configuration stored
// in the checkpoint wins unless the config file explicitly has an alignment
// section; flags override individual fields afterwards.
AlignmentConfig alignment_for(const CheckpointExtra& extra, const std::string& config_path,
                              const CliConfig& cfg) {
  bool file_has_section = false;
  if (!config_path.empty()) file_has_section = read_config_json(config_path).contains("alignment");
  if (file_has_section) return cfg.align;
  auto it = extra.strings.find("alignment_config");
  if (it != extra.strings.end()) return json::parse(it->second).get<AlignmentConfig>();
  return cfg.align;
}

int checked_p(int p, std::size_t k) {
  if (p < 1 || static_cast<std::size_t>(p) > k)
    throw UsageError("--p must be between 1 and k=" + std::to_string(k) + ", got " +
                     std::to_string(p));
  return p;
}

// ---- train ----

struct TrainOpts {
  std::string config, data, out, metrics, resume;
  std::size_t stop_after = 0;
  std::vector<std::string> ablate;
};

int cmd_train(const TrainOpts& o) {
  CliConfig cfg = load_cli_config(o.config);
  for (const std::string& a : o.ablate) {
    if (a == "no_global") cfg.model.no_global = true;
    else if (a == "no_residual") cfg.model.no_residual = true;
    else if (a == "no_partial_score") cfg.train.no_partial_score = true;
    else if (a == "average_similarity") cfg.align.variant = SimilarityVariant::Average;
    else if (a == "maximum_similarity") cfg.align.variant = SimilarityVariant::Maximum;
    else throw UsageError("unknown --ablate value '" + a + "'");
  }
  Dataset ds = load_data_dir(o.data, cfg.data.oov);
  EmDepartModel model(sized_for(cfg.model, ds));
  TrainPaths paths;
  paths.metrics = o.metrics.empty() ? o.out + ".metrics.csv" : o.metrics;
  paths.checkpoint = o.out;
  paths.resume = o.resume;
  TrainResult res = train(model, ds, cfg.align, cfg.train, paths, o.stop_after);
  emit(json{{"command", "train"},
            {"checkpoint", o.out},
            {"metrics", paths.metrics},
            {"epochs_run", res.epochs_run},
            {"final", json::parse(res.final_eval.to_json())}});
  return 0;
}

// ---- eval ----

struct EvalOpts {
  std::string ckpt, data, config;
  std::string split = "gzsl";
  int p = 0;
  bool p_set = false;
  double gamma_cs = 0.0;
  bool gamma_set = false;
  bool no_partial = false;
};

int cmd_eval(const EvalOpts& o) {
  CheckpointExtra extra;
  EmDepartModel model = load_checkpoint(o.ckpt, &extra);
  CliConfig cfg = load_cli_config(o.config);
  AlignmentConfig acfg = alignment_for(extra, o.config, cfg);
  if (o.p_set) acfg.p = checked_p(o.p, model.cfg.k);
  double gamma_cs = o.gamma_set ? o.gamma_cs : cfg.eval.gamma_cs;
  bool use_partial = cfg.eval.use_partial && !o.no_partial;

  Dataset ds = load_data_dir(o.data, cfg.data.oov);
  if (o.split == "gzsl") {
    EvalReport rep = evaluate_model(model, ds, acfg, gamma_cs, use_partial);
    std::cout << rep.to_json() << "\n";
    return 0;
  }
  // zsl: unseen test images against unseen classes only
  auto classes = embed_classes(model, ds, ds.splits.unseen);
  ScoreTable table = score_table(model, ds.bank, ds.splits.test_images, classes, acfg, use_partial);
  std::vector<int> labels = labels_for(ds.bank, ds.splits.test_images);
  std::vector<int> preds;
  preds.reserve(table.rows.size());
  for (const auto& row : table.rows) preds.push_back(argmax_class(row, table.class_ids));
  std::map<int, double> per_class;
  std::set<int> unseen_set(table.class_ids.begin(), table.class_ids.end());
  double t1 = per_class_top1(preds, labels, unseen_set, &per_class);
  json pc = json::object();
  for (auto& [id, acc] : per_class) pc[std::to_string(id)] = acc;
  emit(json{{"split", "zsl"}, {"T1", t1}, {"p", acfg.p}, {"per_class", pc}});
  return 0;
}

// ---- score ----

struct ScoreOpts {
  std::string ckpt, data, config;
  long image = -1;
  int cls = -1;
  int p = 0;
  bool p_set = false;
};

int cmd_score(const ScoreOpts& o) {
  CheckpointExtra extra;
  EmDepartModel model = load_checkpoint(o.ckpt, &extra);
  CliConfig cfg = load_cli_config(o.config);
  AlignmentConfig acfg = alignment_for(extra, o.config, cfg);
  int p = o.p_set ? checked_p(o.p, model.cfg.k) : acfg.p;

  Dataset ds = load_data_dir(o.data, cfg.data.oov);
  if (o.image < 0 || static_cast<std::size_t>(o.image) >= ds.bank.num_images())
    throw DataError("image index " + std::to_string(o.image) + " outside [0, " +
                    std::to_string(ds.bank.num_images()) + ")");
  std::vector<int> ids = o.cls >= 0 ? std::vector<int>{o.cls} : all_class_ids(ds);

  ViewEmbeddings v = model.embed_image(ds.bank.image(static_cast<std::size_t>(o.image)));
  json per_class = json::array();
  for (int id : ids) {
    ViewEmbeddings t = model.embed_text(document_token_matrix(ds, id));
    TopCosMask mask = top_cos(v.B, t.B, p);
    per_class.push_back(json{{"class", id},
                             {"cosine", tensor2d_json(cosine_matrix(v.B, t.B))},
                             {"visual_top", mask.visual},
                             {"textual_top", mask.textual},
                             {"partial", partial_score(v.B, t.B, p)},
                             {"smooth_chamfer", smooth_chamfer(t.B, v.B)}});
  }
  emit(json{{"command", "score"}, {"image", o.image}, {"p", p}, {"classes", per_class}});
  return 0;
}

// ---- diagnose ----

struct DiagnoseOpts {
  std::string ckpt, data, out, config;
  std::size_t limit = 16;
};

int cmd_diagnose(const DiagnoseOpts& o) {
  CheckpointExtra extra;
  EmDepartModel model = load_checkpoint(o.ckpt, &extra);
  CliConfig cfg = load_cli_config(o.config);
  Dataset ds = load_data_dir(o.data, cfg.data.oov);
  fs::create_directories(o.out);

  std::vector<int> class_ids = all_class_ids(ds);
  std::size_t num_images = ds.bank.num_images();
  if (o.limit > 0) num_images = std::min(num_images, o.limit);

  json svar{{"classes", json::object()}, {"images", json::object()}};
  json redundancy{{"classes", json::object()}, {"images", json::object()}};
  json attention{{"classes", json::object()}, {"images", json::object()}};
  std::ofstream tsv(fs::path(o.out) / "embeddings.tsv");
  tsv << "label";
  for (std::size_t d = 0; d < model.cfg.r; ++d) tsv << "\td" << d;
  tsv << "\n";
  auto dump_views = [&](const std::string& label, const Tensor& b) {
    for (std::size_t i = 0; i < b.rows(); ++i) {
      tsv << label << "_view" << i;
      for (std::size_t j = 0; j < b.cols(); ++j) tsv << "\t" << format_double(b.at(i, j));
      tsv << "\n";
    }
  };

  double svar_cls = 0.0, svar_img = 0.0;
  for (int id : class_ids) {
    Tensor doc = document_token_matrix(ds, id);
    ViewEmbeddings e = model.embed_text(doc);
    std::string key = std::to_string(id);
    double s = circular_variance(e.E_L);
    svar_cls += s;
    svar["classes"][key] = s;
    redundancy["classes"][key] = tensor2d_json(redundancy_matrix(e.E_L));
    attention["classes"][key] = tensor3d_json(model.trace_text(doc).logits);
    dump_views("class_" + key, e.B);
  }
  for (std::size_t idx = 0; idx < num_images; ++idx) {
    Tensor raw = ds.bank.image(idx);
    ViewEmbeddings e = model.embed_image(raw);
    std::string key = std::to_string(idx);
    double s = circular_variance(e.E_L);
    svar_img += s;
    svar["images"][key] = s;
    redundancy["images"][key] = tensor2d_json(redundancy_matrix(e.E_L));
    attention["images"][key] = tensor3d_json(model.trace_image(raw).logits);
    dump_views("image_" + key, e.B);
  }
  svar_cls /= static_cast<double>(class_ids.size());
  if (num_images > 0) svar_img /= static_cast<double>(num_images);

  std::ofstream(fs::path(o.out) / "svar.json") << svar.dump(2) << "\n";
  std::ofstream(fs::path(o.out) / "redundancy.json") << redundancy.dump(2) << "\n";
  std::ofstream(fs::path(o.out) / "attention.json") << attention.dump(2) << "\n";
  tsv.close();

  emit(json{{"command", "diagnose"},
            {"out", o.out},
            {"files", {"svar.json", "redundancy.json", "attention.json", "embeddings.tsv"}},
            {"classes", class_ids.size()},
            {"images", num_images},
            {"mean_svar_classes", svar_cls},
            {"mean_svar_images", svar_img}});
  return 0;
}

// ---- grad-check ----

struct GradCheckOpts {
  std::uint64_t seed = 1;
  double tol = 1e-4;
  double step = 1e-5;
};

int cmd_grad_check(const GradCheckOpts& o) {
  if (o.tol < 0.0) throw UsageError("--tol must be nonnegative");
  if (o.step <= 0.0) throw UsageError("--step must be positive");
  GradSuiteConfig cfg;
  cfg.seed = o.seed;
  cfg.tol = o.tol;
  cfg.step = o.step;
  GradSuiteResult res = run_gradient_suite(cfg);

  json checks = json::array();
  for (const auto& c : res.checks) {
    json failures = json::array();
    for (const auto& f : c.report.failures)
      failures.push_back(json{{"param", f.param},
                              {"index", f.flat_index},
                              {"analytic", f.analytic},
                              {"numeric", f.numeric},
                              {"rel_err", f.rel_err}});
    checks.push_back(json{{"name", c.name},
                          {"entries", c.report.entries_checked},
                          {"ok", c.report.ok},
                          {"max_rel_err", c.report.worst.rel_err},
                          {"worst_param", c.report.worst.param},
                          {"worst_index", c.report.worst.flat_index},
                          {"analytic", c.report.worst.analytic},
                          {"numeric", c.report.worst.numeric},
                          {"failures", failures}});
  }
  emit(json{{"command", "grad-check"},
            {"seed", o.seed},
            {"tol", o.tol},
            {"step", o.step},
            {"ok", res.ok},
            {"checks", checks}});
  return res.ok ? 0 : 3;
}

// ---- grid-search ----

struct GridSearchOpts {
  std::string config, grid, data, out;
};

int cmd_grid_search(const GridSearchOpts& o) {
  CliConfig cfg = load_cli_config(o.config);
  GridSpec spec = load_grid_spec(o.grid);
  Dataset ds = load_data_dir(o.data, cfg.data.oov);
  RunBundle base{sized_for(cfg.model, ds), cfg.align, cfg.train};
  GridSearchResult res = grid_search(base, spec, ds);
  if (!o.out.empty()) {
    std::ofstream f(o.out);
    if (!f) throw DataError("cannot write " + o.out);
    f << res.csv;
  }
  emit(json{{"command", "grid-search"},
            {"runs", res.runs.size()},
            {"best", json(res.best)},
            {"csv", res.csv},
            {"csv_path", o.out}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view document/image alignment toolkit"};
  app.require_subcommand(1);

  GenSynthOpts gen;
  CLI::App* gen_cmd = app.add_subcommand(
      "gen-synth", "Generate a deterministic synthetic dataset (same flags, same bytes)");
  gen_cmd->add_option("--out", gen.out, "Output dataset directory")->required();
  gen_cmd->add_option("--classes-seen", gen.cfg.c_seen, "Seen classes (default 20)");
  gen_cmd->add_option("--classes-unseen", gen.cfg.c_unseen, "Unseen classes (default 5)");
  gen_cmd->add_option("--views", gen.cfg.views, "Latent view prototypes (default 8, minimum 2)");
  gen_cmd->add_option("--views-per-class", gen.cfg.views_per_class,
                      "Views combined into each class (default 3)");
  gen_cmd->add_option("--patches", gen.cfg.n, "Patches per image (default 12)");
  gen_cmd->add_option("--tokens", gen.cfg.m, "Tokens per document (default 30)");
  gen_cmd->add_option("--feature-dim", gen.cfg.r0, "Raw feature width (default 24)");
  gen_cmd->add_option("--images-per-class", gen.cfg.images_per_class,
                      "Images per class (default 12)");
  gen_cmd->add_option("--noise", gen.cfg.noise_sigma, "Patch noise scale (default 0.3)");
  gen_cmd->add_option("--keep-prob", gen.cfg.view_keep_prob,
                      "Chance an image realizes each class view (default 0.65)");
  gen_cmd->add_option("--words-per-view", gen.cfg.words_per_view,
                      "Vocabulary words per view (default 3)");
  gen_cmd->add_option("--distractors", gen.cfg.distractor_vocab,
                      "Distractor vocabulary size (default 40)");
  gen_cmd->add_option("--test-frac", gen.cfg.test_frac,
                      "Held-out fraction of each seen class (default 0.25)");
  gen_cmd->add_option("--val-seen", gen.cfg.val_seen_count,
                      "Seen classes reserved for validation splits (default 4)");
  gen_cmd->add_option("--seed", gen.cfg.seed, "Generator seed (default 1)");

  TrainOpts tr;
  CLI::App* train_cmd = app.add_subcommand("train", "Train a model and write checkpoint + metrics");
  train_cmd->add_option("--config", tr.config, "JSON config file (hyperparameters)");
  train_cmd->add_option("--data", tr.data, "Dataset directory")->required();
  train_cmd->add_option("--out", tr.out, "Checkpoint path, rewritten every epoch")->required();
  train_cmd->add_option("--metrics", tr.metrics, "Metrics CSV path (default <out>.metrics.csv)");
  train_cmd->add_option("--resume", tr.resume, "Checkpoint to continue from");
  train_cmd->add_option("--stop-after", tr.stop_after,
                        "Stop after this many epochs this invocation (0 = run to completion)");
  train_cmd
      ->add_option("--ablate", tr.ablate,
                   "Ablations: no_global, no_residual, no_partial_score, average_similarity, "
                   "maximum_similarity")
      ->check(CLI::IsMember({"no_global", "no_residual", "no_partial_score", "average_similarity",
                             "maximum_similarity"}));

  EvalOpts ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint, JSON report on stdout");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint path")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset directory")->required();
  eval_cmd->add_option("--config", ev.config, "JSON config file (overrides stored settings)");
  eval_cmd->add_option("--split", ev.split, "zsl (unseen classes only) or gzsl (default)")
      ->check(CLI::IsMember({"zsl", "gzsl"}));
  CLI::Option* p_opt = eval_cmd->add_option("--p", ev.p, "Top-p views kept by the partial match");
  CLI::Option* g_opt =
      eval_cmd->add_option("--gamma-cs", ev.gamma_cs, "Calibrated-stacking penalty (default 0)");
  eval_cmd->add_flag("--no-partial", ev.no_partial, "Score with plain smooth Chamfer instead");

  ScoreOpts sc;
  CLI::App* score_cmd =
      app.add_subcommand("score", "Dump cosine matrix, top-p masks, and scores for one image");
  score_cmd->add_option("--ckpt", sc.ckpt, "Checkpoint path")->required();
  score_cmd->add_option("--data", sc.data, "Dataset directory")->required();
  score_cmd->add_option("--config", sc.config, "JSON config file");
  score_cmd->add_option("--image", sc.image, "Image index")->required();
  score_cmd->add_option("--class", sc.cls, "Class id (default: every class)");
  CLI::Option* sp_opt = score_cmd->add_option("--p", sc.p, "Top-p views kept by the partial match");

  DiagnoseOpts di;
  CLI::App* diag_cmd =
      app.add_subcommand("diagnose", "Write view-collapse and attention diagnostics to a directory");
  diag_cmd->add_option("--ckpt", di.ckpt, "Checkpoint path")->required();
  diag_cmd->add_option("--data", di.data, "Dataset directory")->required();
  diag_cmd->add_option("--config", di.config, "JSON config file");
  diag_cmd->add_option("--out", di.out, "Output directory")->required();
  diag_cmd->add_option("--limit", di.limit, "Max images to trace, 0 = all (default 16)");

  GradCheckOpts gc;
  CLI::App* grad_cmd = app.add_subcommand(
      "grad-check", "Finite-difference audit of every loss term on a miniature model");
  grad_cmd->add_option("--seed", gc.seed, "Init and data seed (default 1)");
  grad_cmd->add_option("--tol", gc.tol, "Relative error threshold (default 1e-4)");
  grad_cmd->add_option("--step", gc.step, "Central-difference step (default 1e-5)");

  GridSearchOpts gs;
  CLI::App* grid_cmd = app.add_subcommand(
      "grid-search", "Sweep hyperparameters on the validation protocol, report the best");
  grid_cmd->add_option("--config", gs.config, "JSON config file with the base setting");
  grid_cmd->add_option("--grid", gs.grid, "JSON sweep file: {\"axes\": [{\"name\", \"values\"}]}")
      ->required();
  grid_cmd->add_option("--data", gs.data, "Dataset directory")->required();
  grid_cmd->add_option("--out", gs.out, "Write the per-run CSV here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  ev.p_set = p_opt->count() > 0;
  ev.gamma_set = g_opt->count() > 0;
  sc.p_set = sp_opt->count() > 0;

  try {
    if (gen_cmd->parsed()) return cmd_gen_synth(gen);
    if (train_cmd->parsed()) return cmd_train(tr);
    if (eval_cmd->parsed()) return cmd_eval(ev);
    if (score_cmd->parsed()) return cmd_score(sc);
    if (diag_cmd->parsed()) return cmd_diagnose(di);
    if (grad_cmd->parsed()) return cmd_grad_check(gc);
    if (grid_cmd->parsed()) return cmd_grid_search(gs);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
