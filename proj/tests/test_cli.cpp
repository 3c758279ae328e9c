// End-to-end checks of the command-line tool: each subcommand runs as a child
// process against a small generated dataset; stdout contracts, exit codes,
// and written files are inspected from the outside.

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#ifndef EMDEPART_CLI_PATH
#error "EMDEPART_CLI_PATH must point at the CLI binary"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

RunResult run_cli(const std::string& args) {
  static int counter = 0;
  fs::path out = fs::temp_directory_path() / ("cli_out_" + std::to_string(counter) + ".txt");
  fs::path err = fs::temp_directory_path() / ("cli_err_" + std::to_string(counter) + ".txt");
  ++counter;
  std::string cmd = std::string(EMDEPART_CLI_PATH) + " " + args + " > " + out.string() + " 2> " +
                    err.string();
  int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  fs::remove(out);
  fs::remove(err);
  return r;
}

fs::path scratch_root() {
  static fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "emdepart_cli_tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

const char* kGenFlags =
    "--classes-seen 6 --classes-unseen 3 --views 6 --images-per-class 6 --patches 6 "
    "--tokens 12 --feature-dim 12 --seed 5";

// Dataset and a short training run shared by every test below.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_dir = scratch_root() / "data";
    ckpt = (scratch_root() / "model.ckpt").string();
    config = (scratch_root() / "config.json").string();
    std::ofstream(config) << R"({
      "model": {"r": 16, "k": 3, "encoder_layers": 1, "heads": 2, "sdm_layers": 1,
                "dropout": 0.1, "init_seed": 3},
      "alignment": {"tau": 1.0, "p": 2, "gamma": 0.25},
      "train": {"lr": 0.003, "batch_size": 8, "epochs": 2, "seed": 11}
    })";
    RunResult gen = run_cli("gen-synth --out " + data_dir.string() + " " + kGenFlags);
    ASSERT_EQ(gen.exit_code, 0) << gen.err;
    RunResult tr =
        run_cli("train --config " + config + " --data " + data_dir.string() + " --out " + ckpt);
    ASSERT_EQ(tr.exit_code, 0) << tr.err;
  }

  static fs::path data_dir;
  static std::string ckpt, config;
};

fs::path Cli::data_dir;
std::string Cli::ckpt, Cli::config;

TEST_F(Cli, GenSynthIsByteDeterministic) {
  fs::path a = scratch_root() / "det_a", b = scratch_root() / "det_b";
  ASSERT_EQ(run_cli("gen-synth --out " + a.string() + " " + kGenFlags).exit_code, 0);
  ASSERT_EQ(run_cli("gen-synth --out " + b.string() + " " + kGenFlags).exit_code, 0);
  std::vector<fs::path> rels;
  for (auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) rels.push_back(fs::relative(e.path(), a));
  ASSERT_GE(rels.size(), 6u);
  for (auto& rel : rels) EXPECT_EQ(slurp(a / rel), slurp(b / rel)) << rel;
}

TEST_F(Cli, GenSynthRejectsSingleView) {
  RunResult r = run_cli("gen-synth --out " + (scratch_root() / "bad").string() + " --views 1");
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_NE(r.err.find("--views"), std::string::npos);
}

TEST_F(Cli, GenSynthReportsSummary) {
  fs::path dir = scratch_root() / "summary";
  RunResult r = run_cli("gen-synth --out " + dir.string() + " " + kGenFlags);
  ASSERT_EQ(r.exit_code, 0);
  json j = json::parse(r.out);
  EXPECT_EQ(j.at("command"), "gen-synth");
  EXPECT_EQ(j.at("images"), 54);
  EXPECT_EQ(j.at("classes_seen"), 6);
}

TEST_F(Cli, TrainWritesMetricsWithStableHeader) {
  std::string csv = slurp(ckpt + ".metrics.csv");
  std::istringstream lines(csv);
  std::string header;
  std::getline(lines, header);
  EXPECT_EQ(header, "epoch,lr,L_global,L_local,L_var,L_div,S_var_V,S_var_T,val_T1,val_H");
  int rows = 0;
  for (std::string line; std::getline(lines, line);) ++rows;
  EXPECT_EQ(rows, 2);
  EXPECT_TRUE(fs::exists(ckpt));
}

TEST_F(Cli, TrainMissingDataDirNamesThePath) {
  RunResult r = run_cli("train --data /nonexistent/nowhere --out " +
                        (scratch_root() / "x.ckpt").string());
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("/nonexistent/nowhere"), std::string::npos);
}

TEST_F(Cli, TrainRejectsUnknownAblation) {
  RunResult r = run_cli("train --data " + data_dir.string() + " --out " +
                        (scratch_root() / "x.ckpt").string() + " --ablate bogus");
  EXPECT_EQ(r.exit_code, 1);
}

TEST_F(Cli, TrainRejectsUnknownConfigKey) {
  std::string bad = (scratch_root() / "bad_config.json").string();
  std::ofstream(bad) << R"({"model": {"bogus": 1}})";
  RunResult r = run_cli("train --config " + bad + " --data " + data_dir.string() + " --out " +
                        (scratch_root() / "x.ckpt").string());
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("bogus"), std::string::npos);
}

TEST_F(Cli, EvalEmitsFullReport) {
  RunResult r = run_cli("eval --ckpt " + ckpt + " --data " + data_dir.string());
  ASSERT_EQ(r.exit_code, 0) << r.err;
  json j = json::parse(r.out);
  for (const char* key : {"T1", "U", "S", "H", "gamma_cs", "p", "per_class"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j.at("p"), 2);  // stored training-time alignment config was picked up
}

TEST_F(Cli, EvalGammaZeroMatchesDefault) {
  RunResult plain = run_cli("eval --ckpt " + ckpt + " --data " + data_dir.string());
  RunResult zero = run_cli("eval --ckpt " + ckpt + " --data " + data_dir.string() +
                           " --gamma-cs 0");
  ASSERT_EQ(plain.exit_code, 0);
  ASSERT_EQ(zero.exit_code, 0);
  EXPECT_EQ(plain.out, zero.out);
}

TEST_F(Cli, EvalZslRestrictsToUnseen) {
  RunResult r = run_cli("eval --ckpt " + ckpt + " --data " + data_dir.string() + " --split zsl");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  json j = json::parse(r.out);
  EXPECT_EQ(j.at("split"), "zsl");
  EXPECT_EQ(j.at("per_class").size(), 3u);  // only the unseen classes are scored
}

TEST_F(Cli, EvalRejectsPBeyondViews) {
  RunResult r = run_cli("eval --ckpt " + ckpt + " --data " + data_dir.string() + " --p 9");
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_NE(r.err.find("--p"), std::string::npos);
}

TEST_F(Cli, EvalRejectsUnknownSplit) {
  RunResult r = run_cli("eval --ckpt " + ckpt + " --data " + data_dir.string() + " --split osl");
  EXPECT_EQ(r.exit_code, 1);
}

TEST_F(Cli, ScoreDumpsMatrixMasksAndScores) {
  RunResult r = run_cli("score --ckpt " + ckpt + " --data " + data_dir.string() +
                        " --image 0 --class 6");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  json j = json::parse(r.out);
  ASSERT_EQ(j.at("classes").size(), 1u);
  const json& c = j.at("classes")[0];
  EXPECT_EQ(c.at("class"), 6);
  ASSERT_EQ(c.at("cosine").size(), 3u);
  ASSERT_EQ(c.at("cosine")[0].size(), 3u);
  ASSERT_EQ(c.at("visual_top").size(), 3u);
  ASSERT_EQ(c.at("textual_top").size(), 3u);
  EXPECT_TRUE(c.at("partial").is_number());
  EXPECT_TRUE(c.at("smooth_chamfer").is_number());
}

TEST_F(Cli, ScoreWithFullPEqualsSmoothChamfer) {
  RunResult r = run_cli("score --ckpt " + ckpt + " --data " + data_dir.string() +
                        " --image 0 --p 3");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  json j = json::parse(r.out);
  for (const json& c : j.at("classes"))
    EXPECT_NEAR(c.at("partial").get<double>(), c.at("smooth_chamfer").get<double>(), 1e-12);
}

TEST_F(Cli, DiagnoseWritesAllFourFiles) {
  fs::path out = scratch_root() / "diag";
  RunResult r = run_cli("diagnose --ckpt " + ckpt + " --data " + data_dir.string() + " --out " +
                        out.string() + " --limit 2");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  for (const char* f : {"svar.json", "redundancy.json", "attention.json", "embeddings.tsv"})
    EXPECT_TRUE(fs::exists(out / f)) << f;

  json svar = json::parse(slurp(out / "svar.json"));
  ASSERT_EQ(svar.at("classes").size(), 9u);
  ASSERT_EQ(svar.at("images").size(), 2u);
  for (auto& [id, v] : svar.at("classes").items()) {
    EXPECT_GE(v.get<double>(), 0.0) << id;
    EXPECT_LE(v.get<double>(), 1.0) << id;
  }

  // attention tensors keep the (layers, views, tokens) layout
  json attn = json::parse(slurp(out / "attention.json"));
  const json& cls = attn.at("classes").at("0");
  ASSERT_EQ(cls.size(), 1u);        // sdm layers
  ASSERT_EQ(cls[0].size(), 3u);     // views
  ASSERT_EQ(cls[0][0].size(), 12u); // document tokens
  const json& img = attn.at("images").at("0");
  ASSERT_EQ(img[0][0].size(), 6u);  // image patches

  json red = json::parse(slurp(out / "redundancy.json"));
  const json& m = red.at("classes").at("0");
  ASSERT_EQ(m.size(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(m[i][i].get<double>(), 1.0, 1e-9);
}

TEST_F(Cli, DiagnoseEmbeddingsLoadAsNumericMatrix) {
  fs::path out = scratch_root() / "diag_tsv";
  ASSERT_EQ(run_cli("diagnose --ckpt " + ckpt + " --data " + data_dir.string() + " --out " +
                    out.string() + " --limit 2")
                .exit_code,
            0);
  std::ifstream tsv(out / "embeddings.tsv");
  std::string header;
  std::getline(tsv, header);
  EXPECT_EQ(header.substr(0, 8), "label\td0");
  int rows = 0;
  for (std::string line; std::getline(tsv, line);) {
    std::istringstream cols(line);
    std::string label;
    ASSERT_TRUE(std::getline(cols, label, '\t'));
    int vals = 0;
    for (std::string cell; std::getline(cols, cell, '\t'); ++vals) {
      EXPECT_NO_THROW((void)std::stod(cell)) << cell;
    }
    EXPECT_EQ(vals, 16);  // r columns after the label
    ++rows;
  }
  EXPECT_EQ(rows, (9 + 2) * 3);  // (classes + images) x k view rows
}

TEST_F(Cli, GradCheckDefaultPasses) {
  RunResult r = run_cli("grad-check");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  json j = json::parse(r.out);
  EXPECT_TRUE(j.at("ok").get<bool>());
  ASSERT_EQ(j.at("checks").size(), 5u);
  for (const json& c : j.at("checks")) EXPECT_TRUE(c.at("ok").get<bool>()) << c.at("name");
}

TEST_F(Cli, GradCheckZeroToleranceListsWorstOffenders) {
  RunResult r = run_cli("grad-check --tol 0");
  EXPECT_EQ(r.exit_code, 3);
  json j = json::parse(r.out);
  EXPECT_FALSE(j.at("ok").get<bool>());
  bool any_listed = false;
  for (const json& c : j.at("checks")) {
    for (const json& f : c.at("failures")) {
      any_listed = true;
      EXPECT_TRUE(f.contains("param"));
      EXPECT_TRUE(f.contains("rel_err"));
    }
  }
  EXPECT_TRUE(any_listed);
}

TEST_F(Cli, GridSearchSweepsAndReportsBest) {
  std::string grid = (scratch_root() / "grid.json").string();
  std::ofstream(grid) << R"({"axes": [{"name": "lambda_div", "values": [0.0, 1.0]}]})";
  std::string csv = (scratch_root() / "grid.csv").string();
  RunResult r = run_cli("grid-search --config " + config + " --grid " + grid + " --data " +
                        data_dir.string() + " --out " + csv);
  ASSERT_EQ(r.exit_code, 0) << r.err;
  json j = json::parse(r.out);
  EXPECT_EQ(j.at("runs"), 2);
  std::string written = slurp(csv);
  EXPECT_EQ(written.substr(0, written.find('\n')), "lambda_div,H,T1,U,S");
  double best = j.at("best").at("alignment").at("lambda_div").get<double>();
  EXPECT_TRUE(best == 0.0 || best == 1.0);
}

TEST_F(Cli, NoSubcommandIsUsageError) {
  EXPECT_EQ(run_cli("").exit_code, 1);
  EXPECT_EQ(run_cli("--help").exit_code, 0);
}

}  // namespace
