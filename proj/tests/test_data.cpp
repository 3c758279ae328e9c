#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "emdepart/data.hpp"
#include "emdepart/synthetic.hpp"

using namespace emdepart;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("emdepart_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

SynthConfig small_cfg() {
  SynthConfig cfg;
  cfg.c_seen = 6;
  cfg.c_unseen = 2;
  cfg.views = 5;
  cfg.views_per_class = 2;
  cfg.n = 4;
  cfg.m = 10;
  cfg.r0 = 8;
  cfg.images_per_class = 4;
  cfg.val_seen_count = 2;
  cfg.seed = 77;
  return cfg;
}

}  // namespace

TEST(Tokenize, LowercasesAndStripsPunctuation) {
  auto toks = tokenize("The Quick, brown FOX!  \n (jumps)");
  ASSERT_EQ(toks.size(), 5u);
  EXPECT_EQ(toks[0], "the");
  EXPECT_EQ(toks[1], "quick");
  EXPECT_EQ(toks[2], "brown");
  EXPECT_EQ(toks[3], "fox");
  EXPECT_EQ(toks[4], "jumps");
  EXPECT_TRUE(tokenize("  ,, !! ").empty());
}

TEST(EmbedTokens, OrderSkipAndErrors) {
  EmbeddingTable table;
  std::vector<double> a(kWordDim, 1.0), b(kWordDim, 2.0);
  table.add("cat", a);
  table.add("dog", b);
  Tensor m = embed_tokens({"dog", "unknown", "cat"}, table);
  ASSERT_EQ(m.rows(), 2u);  // OOV skipped
  EXPECT_DOUBLE_EQ(m.at(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(m.at(1, 0), 1.0);
  EXPECT_THROW(embed_tokens({"unknown", "words"}, table), DataError);

  table.oov = OovPolicy::Zero;
  Tensor z = embed_tokens({"dog", "unknown"}, table);
  ASSERT_EQ(z.rows(), 2u);
  EXPECT_DOUBLE_EQ(z.at(1, 0), 0.0);
  // all-zero document still rejected under Zero policy
  EXPECT_THROW(embed_tokens({"unknown"}, table), DataError);

  EXPECT_THROW(table.add("cat", a), DataError);
  EXPECT_THROW(table.add("bad", std::vector<double>(7, 0.0)), DataError);
}

TEST(Synthetic, PlantedStructureHolds) {
  auto sd = gen_synthetic(small_cfg());
  // pairwise distinct view subsets, unseen included
  std::set<std::vector<int>> subsets;
  for (auto& [c, sub] : sd.truth.class_views) {
    EXPECT_EQ(sub.size(), 2u);
    EXPECT_TRUE(subsets.insert(sub).second) << "duplicate subset for class " << c;
  }
  // every document contains all of its class's view words
  for (auto& [c, sub] : sd.truth.class_views) {
    const auto& toks = sd.ds.docs.tokens.at(c);
    std::set<std::string> tokset(toks.begin(), toks.end());
    for (int v : sub)
      for (int w = 0; w < 3; ++w)
        EXPECT_TRUE(tokset.count("view" + std::to_string(v) + "word" + std::to_string(w)));
  }
  // realized views are a non-empty subset of the class views
  for (std::size_t i = 0; i < sd.ds.bank.num_images(); ++i) {
    const auto& realized = sd.truth.image_views[i];
    ASSERT_FALSE(realized.empty());
    const auto& sub = sd.truth.class_views.at(sd.ds.bank.labels[i]);
    for (int v : realized) EXPECT_TRUE(std::count(sub.begin(), sub.end(), v));
  }
  // global token is the patch mean (through f32 rounding)
  const auto& f = sd.ds.bank.features;
  for (std::size_t j = 0; j < f.shape[2]; ++j) {
    double s = 0.0;
    for (std::size_t p = 1; p < f.shape[1]; ++p) s += f.at(0, p, j);
    EXPECT_NEAR(f.at(0, 0, j), s / static_cast<double>(f.shape[1] - 1), 1e-6);
  }
}

TEST(Synthetic, SameSeedSameDataDifferentSeedDiffers) {
  auto a = gen_synthetic(small_cfg());
  auto b = gen_synthetic(small_cfg());
  EXPECT_EQ(a.ds.bank.features.data, b.ds.bank.features.data);
  EXPECT_EQ(a.ds.docs.tokens, b.ds.docs.tokens);
  auto cfg = small_cfg();
  cfg.seed = 78;
  auto c = gen_synthetic(cfg);
  EXPECT_NE(a.ds.bank.features.data, c.ds.bank.features.data);
}

TEST(Synthetic, InfeasibleCombinationCountFails) {
  auto cfg = small_cfg();
  cfg.views = 3;
  cfg.views_per_class = 2;  // C(3,2) = 3 < 8 classes
  EXPECT_THROW(gen_synthetic(cfg), DataError);
}

TEST(DatasetIO, RoundTripIsBitIdentical) {
  auto sd = gen_synthetic(small_cfg());
  fs::path dir = temp_dir("roundtrip");
  write_dataset(dir, sd.ds);
  Dataset loaded = load_dataset(dir);
  EXPECT_EQ(loaded.bank.features.shape, sd.ds.bank.features.shape);
  EXPECT_EQ(loaded.bank.features.data, sd.ds.bank.features.data);
  EXPECT_EQ(loaded.bank.labels, sd.ds.bank.labels);
  EXPECT_EQ(loaded.bank.classes, sd.ds.bank.classes);
  EXPECT_EQ(loaded.docs.tokens, sd.ds.docs.tokens);
  EXPECT_EQ(loaded.table.words, sd.ds.table.words);
  EXPECT_EQ(loaded.table.vectors, sd.ds.table.vectors);
  EXPECT_EQ(loaded.splits.seen, sd.ds.splits.seen);
  EXPECT_EQ(loaded.splits.unseen, sd.ds.splits.unseen);
  EXPECT_EQ(loaded.splits.val_seen, sd.ds.splits.val_seen);
  EXPECT_EQ(loaded.splits.test_seen_images, sd.ds.splits.test_seen_images);
  EXPECT_EQ(loaded.splits.test_images, sd.ds.splits.test_images);
  EXPECT_EQ(loaded.image_views, sd.ds.image_views);

  // write the loaded copy again: identical bytes on every file
  fs::path dir2 = temp_dir("roundtrip2");
  write_dataset(dir2, loaded);
  for (const char* name : {"manifest.json", "images.bin", "labels.csv", "embeddings.tsv",
                           "splits.json", "views.json"})
    EXPECT_EQ(slurp(dir / name), slurp(dir2 / name)) << name;
  EXPECT_EQ(slurp(dir / "documents/class_0.txt"), slurp(dir2 / "documents/class_0.txt"));
}

TEST(DatasetIO, CorruptionIsRejected) {
  auto sd = gen_synthetic(small_cfg());
  fs::path dir = temp_dir("corrupt");
  write_dataset(dir, sd.ds);

  // truncated blob
  auto bytes = slurp(dir / "images.bin");
  std::ofstream(dir / "images.bin", std::ios::binary) << bytes.substr(0, bytes.size() - 4);
  EXPECT_THROW(load_feature_bank(dir), DataError);
  std::ofstream(dir / "images.bin", std::ios::binary) << bytes;
  EXPECT_NO_THROW(load_feature_bank(dir));

  // label outside the manifest class universe
  auto labels = slurp(dir / "labels.csv");
  std::ofstream(dir / "labels.csv") << "image_index,class_id\n0,999\n";
  EXPECT_THROW(load_feature_bank(dir), DataError);
  std::ofstream(dir / "labels.csv") << labels;

  // missing document
  fs::remove(dir / "documents/class_1.txt");
  EXPECT_THROW(load_dataset(dir), DataError);
}

TEST(DatasetIO, SplitViolationsAreRejected) {
  auto sd = gen_synthetic(small_cfg());
  Dataset ds = sd.ds;
  ds.splits.unseen.push_back(ds.splits.seen[0]);  // overlap
  EXPECT_THROW(validate_dataset(ds), DataError);

  ds = sd.ds;
  ds.splits.val_seen.push_back(ds.splits.unseen[0]);
  EXPECT_THROW(validate_dataset(ds), DataError);

  ds = sd.ds;
  ds.splits.test_images.pop_back();  // an unseen image left out of the test pool
  EXPECT_THROW(validate_dataset(ds), DataError);
}

TEST(Batching, CoversEveryIndexOnceWithShortTail) {
  Rng rng(3);
  std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6};
  auto batches = batch_iter(idx, 3, rng);
  ASSERT_EQ(batches.size(), 3u);
  EXPECT_EQ(batches[0].size(), 3u);
  EXPECT_EQ(batches[2].size(), 1u);
  std::set<std::size_t> all;
  for (auto& b : batches) all.insert(b.begin(), b.end());
  EXPECT_EQ(all.size(), 7u);
  EXPECT_THROW(batch_iter(idx, 0, rng), DataError);

  // seeded permutation: same rng state, same order
  Rng r1(9), r2(9);
  EXPECT_EQ(batch_iter(idx, 2, r1), batch_iter(idx, 2, r2));
}

TEST(Batching, TrainIndicesExcludeHeldOutAndUnseen) {
  auto sd = gen_synthetic(small_cfg());
  auto idx = train_indices(sd.ds.bank, sd.ds.splits);
  std::set<std::size_t> held(sd.ds.splits.test_seen_images.begin(),
                             sd.ds.splits.test_seen_images.end());
  std::set<int> seen(sd.ds.splits.seen.begin(), sd.ds.splits.seen.end());
  for (auto i : idx) {
    EXPECT_TRUE(seen.count(sd.ds.bank.labels[i]));
    EXPECT_FALSE(held.count(i));
  }
  // 6 seen classes, 4 images each, 1 held out per class
  EXPECT_EQ(idx.size(), 6u * 3u);
}
