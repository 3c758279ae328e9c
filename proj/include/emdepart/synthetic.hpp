#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "emdepart/data.hpp"
#include "emdepart/rng.hpp"
#include "emdepart/tensor.hpp"

namespace emdepart {

// Synthetic zero-shot benchmark. Each class is a distinct subset of latent
// "views"; unseen classes recombine the same views into combinations no seen
// class uses, so transfer requires mapping view words to view prototypes
// rather than memorizing classes.
//
// An image realizes a random subset of its class views: patch features are
// noisy copies of the realized prototypes and the global token is the patch
// mean. The class document contains every view's words plus distractors.
struct SynthConfig {
  int c_seen = 20;
  int c_unseen = 5;
  int views = 8;
  int views_per_class = 3;
  int n = 12;               // patches per image
  int m = 30;               // tokens per document
  int r0 = 24;              // raw feature width
  int images_per_class = 12;
  double noise_sigma = 0.3;
  double view_keep_prob = 0.65;
  int words_per_view = 3;
  int distractor_vocab = 40;
  double test_frac = 0.25;  // held-out fraction of each seen class
  int val_seen_count = 4;   // seen classes reserved as the validation partition
  std::uint64_t seed = 1;
};

struct SynthTruth {
  Tensor view_prototypes;                  // [views, r0]
  std::map<int, std::vector<int>> class_views;
  std::vector<std::vector<int>> image_views;
};

struct SynthData {
  Dataset ds;
  SynthTruth truth;
};

namespace detail {

inline std::vector<double> unit_normal_vec(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double norm = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  if (norm < 1e-12) return unit_normal_vec(rng, dim);
  for (auto& x : v) x /= norm;
  return v;
}

inline std::vector<int> sample_subset(Rng& rng, int universe, int size) {
  std::vector<int> all(universe);
  for (int i = 0; i < universe; ++i) all[i] = i;
  rng.shuffle(all);
  std::vector<int> out(all.begin(), all.begin() + size);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

inline SynthData gen_synthetic(const SynthConfig& cfg) {
  if (cfg.c_seen < 2 || cfg.c_unseen < 1) throw DataError("gen_synthetic: need >= 2 seen and >= 1 unseen classes");
  if (cfg.views < 2 || cfg.views_per_class < 1 || cfg.views_per_class > cfg.views)
    throw DataError("gen_synthetic: invalid views/views_per_class");
  if (cfg.images_per_class < 2) throw DataError("gen_synthetic: need >= 2 images per class");
  if (cfg.m < cfg.views_per_class * cfg.words_per_view + 1)
    throw DataError("gen_synthetic: m too small for " +
                    std::to_string(cfg.views_per_class * cfg.words_per_view) + " view words");
  if (cfg.val_seen_count >= cfg.c_seen) throw DataError("gen_synthetic: val_seen_count must leave train classes");
  if (cfg.n < 1 || cfg.r0 < 2) throw DataError("gen_synthetic: invalid n or r0");

  Rng rng(cfg.seed);
  SynthData out;
  SynthTruth& truth = out.truth;

  truth.view_prototypes = Tensor({static_cast<std::size_t>(cfg.views), static_cast<std::size_t>(cfg.r0)});
  for (int v = 0; v < cfg.views; ++v) {
    auto p = detail::unit_normal_vec(rng, static_cast<std::size_t>(cfg.r0));
    for (int j = 0; j < cfg.r0; ++j) truth.view_prototypes.at(v, j) = p[static_cast<std::size_t>(j)];
  }

  // distinct view subsets for every class, seen before unseen
  int total_classes = cfg.c_seen + cfg.c_unseen;
  std::set<std::vector<int>> used;
  for (int c = 0; c < total_classes; ++c) {
    std::vector<int> sub;
    int tries = 0;
    do {
      sub = detail::sample_subset(rng, cfg.views, cfg.views_per_class);
      if (++tries > 1000)
        throw DataError("gen_synthetic: cannot plant " + std::to_string(total_classes) +
                        " distinct view combinations from C(" + std::to_string(cfg.views) + "," +
                        std::to_string(cfg.views_per_class) + ")");
    } while (used.count(sub));
    used.insert(sub);
    truth.class_views[c] = sub;
  }

  // vocabulary: per-view word clusters plus distractors
  EmbeddingTable& table = out.ds.table;
  std::vector<std::vector<std::string>> view_words(static_cast<std::size_t>(cfg.views));
  for (int v = 0; v < cfg.views; ++v) {
    auto base = detail::unit_normal_vec(rng, kWordDim);
    for (int w = 0; w < cfg.words_per_view; ++w) {
      std::vector<double> vec(kWordDim);
      for (std::size_t j = 0; j < kWordDim; ++j) vec[j] = base[j] + 0.15 * rng.normal();
      std::string word = "view" + std::to_string(v) + "word" + std::to_string(w);
      table.add(word, std::move(vec));
      view_words[static_cast<std::size_t>(v)].push_back(word);
    }
  }
  std::vector<std::string> distractors;
  for (int d = 0; d < cfg.distractor_vocab; ++d) {
    std::string word = "filler" + std::to_string(d);
    table.add(word, detail::unit_normal_vec(rng, kWordDim));
    distractors.push_back(word);
  }

  // documents: all view words of the class, padded with distractors, shuffled
  for (int c = 0; c < total_classes; ++c) {
    std::vector<std::string> toks;
    for (int v : truth.class_views[c])
      for (const auto& w : view_words[static_cast<std::size_t>(v)]) toks.push_back(w);
    while (static_cast<int>(toks.size()) < cfg.m)
      toks.push_back(distractors[rng.index(distractors.size())]);
    rng.shuffle(toks);
    out.ds.docs.tokens[c] = std::move(toks);
  }

  // images: noisy realizations of a random subset of the class views.
  // Features round through f32 so files round-trip bit-identically.
  std::size_t num_images = static_cast<std::size_t>(total_classes) * cfg.images_per_class;
  FeatureBank& bank = out.ds.bank;
  bank.features = Tensor({num_images, static_cast<std::size_t>(cfg.n + 1), static_cast<std::size_t>(cfg.r0)});
  bank.labels.assign(num_images, 0);
  for (int c = 0; c < total_classes; ++c) bank.classes.push_back(c);

  std::size_t img = 0;
  for (int c = 0; c < total_classes; ++c) {
    const auto& subset = truth.class_views[c];
    for (int i = 0; i < cfg.images_per_class; ++i, ++img) {
      std::vector<int> realized;
      for (int v : subset)
        if (rng.uniform() < cfg.view_keep_prob) realized.push_back(v);
      if (realized.empty()) realized.push_back(subset[rng.index(subset.size())]);
      truth.image_views.push_back(realized);
      bank.labels[img] = c;

      for (int p = 0; p < cfg.n; ++p) {
        int v = realized[static_cast<std::size_t>(p) % realized.size()];
        for (int j = 0; j < cfg.r0; ++j) {
          double x = truth.view_prototypes.at(v, j) + cfg.noise_sigma * rng.normal();
          bank.features.at(img, static_cast<std::size_t>(p + 1), j) = static_cast<double>(static_cast<float>(x));
        }
      }
      for (int j = 0; j < cfg.r0; ++j) {
        double s = 0.0;
        for (int p = 0; p < cfg.n; ++p) s += bank.features.at(img, static_cast<std::size_t>(p + 1), j);
        bank.features.at(img, 0, j) = static_cast<double>(static_cast<float>(s / cfg.n));
      }
    }
  }
  out.ds.image_views = truth.image_views;

  // splits: trailing images of each seen class are held out; all unseen are test
  SplitSpec& s = out.ds.splits;
  int test_per_class = std::max(1, static_cast<int>(std::ceil(cfg.test_frac * cfg.images_per_class)));
  if (test_per_class >= cfg.images_per_class) test_per_class = cfg.images_per_class - 1;
  for (int c = 0; c < cfg.c_seen; ++c) {
    s.seen.push_back(c);
    std::size_t base = static_cast<std::size_t>(c) * cfg.images_per_class;
    for (int i = cfg.images_per_class - test_per_class; i < cfg.images_per_class; ++i)
      s.test_seen_images.push_back(base + static_cast<std::size_t>(i));
  }
  for (int c = cfg.c_seen; c < total_classes; ++c) {
    s.unseen.push_back(c);
    std::size_t base = static_cast<std::size_t>(c) * cfg.images_per_class;
    for (int i = 0; i < cfg.images_per_class; ++i) s.test_images.push_back(base + static_cast<std::size_t>(i));
  }
  for (int c = 0; c < cfg.val_seen_count; ++c) s.val_seen.push_back(c);

  validate_dataset(out.ds);
  return out;
}

}  // namespace emdepart
