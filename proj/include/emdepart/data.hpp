#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "emdepart/rng.hpp"
#include "emdepart/tensor.hpp"

namespace emdepart {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- on-disk layout ----
// manifest.json    {"n", "r0", "num_images", "classes"}
// images.bin       little-endian float32, row-major [num_images, n+1, r0],
//                  token row 0 is the global image feature
// labels.csv       header "image_index,class_id"
// documents/class_<id>.txt
// embeddings.tsv   "word f1 ... f300" per line (GloVe text format)
// splits.json      {"seen", "unseen", "val_seen", "test_seen_images", "test_images"}
// views.json       synthetic sidecar: per-image planted view ids

constexpr std::size_t kWordDim = 300;

struct FeatureBank {
  Tensor features;          // [num_images, n+1, r0]
  std::vector<int> labels;  // per image
  std::vector<int> classes; // manifest class universe
  std::size_t num_images() const { return features.shape[0]; }
  std::size_t n_patches() const { return features.shape[1] - 1; }
  std::size_t r0() const { return features.shape[2]; }

  // [n+1, r0] slice for one image
  Tensor image(std::size_t idx) const {
    if (idx >= num_images()) throw DataError("FeatureBank: image index out of range");
    std::size_t rows = features.shape[1], cols = features.shape[2];
    Tensor out({rows, cols});
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) out.at(i, j) = features.at(idx, i, j);
    return out;
  }
};

struct DocumentBank {
  std::map<int, std::vector<std::string>> tokens;  // class id -> document tokens
};

enum class OovPolicy { Skip, Zero };

struct EmbeddingTable {
  std::vector<std::string> words;                       // load order
  std::vector<std::vector<double>> vectors;             // [i] has kWordDim entries
  std::unordered_map<std::string, std::size_t> index;
  OovPolicy oov = OovPolicy::Skip;

  void add(const std::string& word, std::vector<double> vec) {
    if (vec.size() != kWordDim)
      throw DataError("EmbeddingTable: word '" + word + "' has " + std::to_string(vec.size()) +
                      " dims, expected " + std::to_string(kWordDim));
    if (index.count(word)) throw DataError("EmbeddingTable: duplicate word '" + word + "'");
    index.emplace(word, words.size());
    words.push_back(word);
    vectors.push_back(std::move(vec));
  }
};

struct SplitSpec {
  std::vector<int> seen, unseen, val_seen;
  std::vector<std::size_t> test_seen_images, test_images;
};

struct Dataset {
  FeatureBank bank;
  DocumentBank docs;
  EmbeddingTable table;
  SplitSpec splits;
  std::vector<std::vector<int>> image_views;  // empty unless views.json is present
};

// ---- tokenization and embedding ----

inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    // lowercase, strip leading/trailing punctuation
    std::size_t b = 0, e = cur.size();
    while (b < e && std::ispunct(static_cast<unsigned char>(cur[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(cur[e - 1]))) --e;
    if (e > b) {
      std::string w = cur.substr(b, e - b);
      for (auto& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      out.push_back(std::move(w));
    }
    cur.clear();
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c)))
      flush();
    else
      cur.push_back(c);
  }
  flush();
  return out;
}

// Token rows in document order. Skip policy drops out-of-vocabulary tokens;
// Zero keeps a zero row. A document with no usable token is an error.
inline Tensor embed_tokens(const std::vector<std::string>& tokens, const EmbeddingTable& table) {
  std::vector<const std::vector<double>*> rows;
  std::size_t zeros = 0;
  static const std::vector<double> kZeroRow(kWordDim, 0.0);
  for (const auto& tok : tokens) {
    auto it = table.index.find(tok);
    if (it != table.index.end()) {
      rows.push_back(&table.vectors[it->second]);
    } else if (table.oov == OovPolicy::Zero) {
      rows.push_back(&kZeroRow);
      ++zeros;
    }
  }
  if (rows.empty() || rows.size() == zeros)
    throw DataError("embed_tokens: document has no in-vocabulary token (" +
                    std::to_string(tokens.size()) + " raw tokens)");
  Tensor out({rows.size(), kWordDim});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < kWordDim; ++j) out.at(i, j) = (*rows[i])[j];
  return out;
}

// ---- little-endian f32 blobs ----

inline void write_f32_le(std::ostream& os, double v) {
  float f = static_cast<float>(v);
  std::uint32_t bits;
  static_assert(sizeof(bits) == sizeof(f));
  std::memcpy(&bits, &f, 4);
  char b[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
               static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
  os.write(b, 4);
}

inline double read_f32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DataError("truncated f32 stream");
  std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                       (static_cast<std::uint32_t>(b[2]) << 16) |
                       (static_cast<std::uint32_t>(b[3]) << 24);
  float f;
  std::memcpy(&f, &bits, 4);
  return static_cast<double>(f);
}

inline void write_f64_le(std::ostream& os, double v) {
  std::uint64_t bits;
  static_assert(sizeof(bits) == sizeof(v));
  std::memcpy(&bits, &v, 8);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  os.write(b, 8);
}

inline double read_f64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw DataError("truncated f64 stream");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// ---- readers ----

inline json read_json_file(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw DataError("cannot open " + p.string());
  json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw DataError("malformed JSON in " + p.string() + ": " + e.what());
  }
  return j;
}

inline FeatureBank load_feature_bank(const fs::path& dir) {
  json manifest = read_json_file(dir / "manifest.json");
  for (const char* key : {"n", "r0", "num_images", "classes"})
    if (!manifest.contains(key))
      throw DataError("manifest.json: missing key '" + std::string(key) + "'");
  long long n = manifest["n"].get<long long>();
  long long r0 = manifest["r0"].get<long long>();
  long long num = manifest["num_images"].get<long long>();
  if (n <= 0 || r0 <= 0 || num <= 0) throw DataError("manifest.json: n, r0, num_images must be positive");

  FeatureBank bank;
  bank.classes = manifest["classes"].get<std::vector<int>>();
  if (bank.classes.empty()) throw DataError("manifest.json: empty class list");
  std::set<int> class_set(bank.classes.begin(), bank.classes.end());
  if (class_set.size() != bank.classes.size()) throw DataError("manifest.json: duplicate class id");

  fs::path bin = dir / "images.bin";
  std::ifstream f(bin, std::ios::binary);
  if (!f) throw DataError("cannot open " + bin.string());
  f.seekg(0, std::ios::end);
  auto bytes = static_cast<unsigned long long>(f.tellg());
  unsigned long long expect = 4ull * num * (n + 1) * r0;
  if (bytes != expect)
    throw DataError("images.bin: " + std::to_string(bytes) + " bytes, expected " +
                    std::to_string(expect) + " for [" + std::to_string(num) + "," +
                    std::to_string(n + 1) + "," + std::to_string(r0) + "]");
  f.seekg(0);
  bank.features = Tensor({static_cast<std::size_t>(num), static_cast<std::size_t>(n + 1),
                          static_cast<std::size_t>(r0)});
  for (auto& v : bank.features.data) v = read_f32_le(f);
  bank.features.check_finite("images.bin");

  fs::path labels_path = dir / "labels.csv";
  std::ifstream lf(labels_path);
  if (!lf) throw DataError("cannot open " + labels_path.string());
  std::string line;
  if (!std::getline(lf, line) || line.rfind("image_index,class_id", 0) != 0)
    throw DataError("labels.csv: expected header 'image_index,class_id'");
  bank.labels.assign(static_cast<std::size_t>(num), 0);
  std::vector<bool> filled(static_cast<std::size_t>(num), false);
  while (std::getline(lf, line)) {
    if (line.empty()) continue;
    auto comma = line.find(',');
    if (comma == std::string::npos) throw DataError("labels.csv: malformed row '" + line + "'");
    long long idx;
    int cls;
    try {
      idx = std::stoll(line.substr(0, comma));
      cls = std::stoi(line.substr(comma + 1));
    } catch (const std::exception&) {
      throw DataError("labels.csv: malformed row '" + line + "'");
    }
    if (idx < 0 || idx >= num) throw DataError("labels.csv: image index " + std::to_string(idx) + " out of range");
    if (!class_set.count(cls))
      throw DataError("labels.csv: class id " + std::to_string(cls) + " not in manifest classes");
    bank.labels[static_cast<std::size_t>(idx)] = cls;
    filled[static_cast<std::size_t>(idx)] = true;
  }
  for (std::size_t i = 0; i < filled.size(); ++i)
    if (!filled[i]) throw DataError("labels.csv: image " + std::to_string(i) + " has no label");
  return bank;
}

inline DocumentBank load_documents(const fs::path& dir, const std::vector<int>& classes) {
  DocumentBank docs;
  for (int c : classes) {
    fs::path p = dir / "documents" / ("class_" + std::to_string(c) + ".txt");
    std::ifstream f(p);
    if (!f) throw DataError("cannot open " + p.string());
    std::stringstream ss;
    ss << f.rdbuf();
    auto toks = tokenize(ss.str());
    if (toks.empty()) throw DataError("empty document for class " + std::to_string(c));
    docs.tokens[c] = std::move(toks);
  }
  return docs;
}

inline EmbeddingTable load_embeddings(const fs::path& path, OovPolicy oov = OovPolicy::Skip) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path.string());
  EmbeddingTable table;
  table.oov = oov;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string word;
    is >> word;
    std::vector<double> vec;
    vec.reserve(kWordDim);
    double v;
    while (is >> v) vec.push_back(v);
    if (vec.size() != kWordDim)
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " +
                      std::to_string(vec.size()) + " dims for '" + word + "', expected " +
                      std::to_string(kWordDim));
    table.add(word, std::move(vec));
  }
  if (table.words.empty()) throw DataError(path.string() + ": no embeddings");
  return table;
}

inline SplitSpec load_splits(const fs::path& dir) {
  json j = read_json_file(dir / "splits.json");
  for (const char* key : {"seen", "unseen", "val_seen", "test_seen_images", "test_images"})
    if (!j.contains(key)) throw DataError("splits.json: missing key '" + std::string(key) + "'");
  SplitSpec s;
  s.seen = j["seen"].get<std::vector<int>>();
  s.unseen = j["unseen"].get<std::vector<int>>();
  s.val_seen = j["val_seen"].get<std::vector<int>>();
  s.test_seen_images = j["test_seen_images"].get<std::vector<std::size_t>>();
  s.test_images = j["test_images"].get<std::vector<std::size_t>>();
  return s;
}

inline void validate_dataset(const Dataset& ds) {
  const auto& s = ds.splits;
  std::set<int> seen(s.seen.begin(), s.seen.end());
  std::set<int> unseen(s.unseen.begin(), s.unseen.end());
  if (seen.empty() || unseen.empty()) throw DataError("splits: seen and unseen must be non-empty");
  for (int c : s.seen)
    if (unseen.count(c)) throw DataError("splits: class " + std::to_string(c) + " both seen and unseen");
  for (int c : s.val_seen)
    if (!seen.count(c)) throw DataError("splits: val_seen class " + std::to_string(c) + " not seen");
  std::set<int> universe(ds.bank.classes.begin(), ds.bank.classes.end());
  for (int c : s.seen)
    if (!universe.count(c)) throw DataError("splits: seen class " + std::to_string(c) + " not in manifest");
  for (int c : s.unseen)
    if (!universe.count(c)) throw DataError("splits: unseen class " + std::to_string(c) + " not in manifest");

  std::set<std::size_t> test_unseen(s.test_images.begin(), s.test_images.end());
  for (std::size_t i : s.test_seen_images) {
    if (i >= ds.bank.num_images()) throw DataError("splits: test_seen image index out of range");
    if (!seen.count(ds.bank.labels[i]))
      throw DataError("splits: test_seen image " + std::to_string(i) + " has unseen label");
  }
  for (std::size_t i : s.test_images) {
    if (i >= ds.bank.num_images()) throw DataError("splits: test image index out of range");
    if (!unseen.count(ds.bank.labels[i]))
      throw DataError("splits: test image " + std::to_string(i) + " has seen label");
  }
  for (std::size_t i = 0; i < ds.bank.num_images(); ++i)
    if (unseen.count(ds.bank.labels[i]) && !test_unseen.count(i))
      throw DataError("splits: unseen-class image " + std::to_string(i) + " missing from test_images");

  for (int c : ds.bank.classes)
    if (!ds.docs.tokens.count(c)) throw DataError("no document for class " + std::to_string(c));
}

inline Dataset load_dataset(const fs::path& dir, OovPolicy oov = OovPolicy::Skip) {
  Dataset ds;
  ds.bank = load_feature_bank(dir);
  ds.docs = load_documents(dir, ds.bank.classes);
  ds.table = load_embeddings(dir / "embeddings.tsv", oov);
  ds.splits = load_splits(dir);
  if (fs::exists(dir / "views.json"))
    ds.image_views = read_json_file(dir / "views.json").get<std::vector<std::vector<int>>>();
  validate_dataset(ds);
  return ds;
}

// ---- writers (round-trip with the readers above) ----

inline void write_feature_bank(const fs::path& dir, const FeatureBank& bank) {
  fs::create_directories(dir);
  json manifest;
  manifest["n"] = bank.n_patches();
  manifest["r0"] = bank.r0();
  manifest["num_images"] = bank.num_images();
  manifest["classes"] = bank.classes;
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";

  std::ofstream bin(dir / "images.bin", std::ios::binary);
  for (double v : bank.features.data) write_f32_le(bin, v);

  std::ofstream labels(dir / "labels.csv");
  labels << "image_index,class_id\n";
  for (std::size_t i = 0; i < bank.labels.size(); ++i)
    labels << i << "," << bank.labels[i] << "\n";
}

inline void write_documents(const fs::path& dir, const DocumentBank& docs) {
  fs::create_directories(dir / "documents");
  for (const auto& [cls, toks] : docs.tokens) {
    std::ofstream f(dir / "documents" / ("class_" + std::to_string(cls) + ".txt"));
    for (std::size_t i = 0; i < toks.size(); ++i) f << (i ? " " : "") << toks[i];
    f << "\n";
  }
}

inline void write_embeddings(const fs::path& path, const EmbeddingTable& table) {
  std::ofstream f(path);
  for (std::size_t i = 0; i < table.words.size(); ++i) {
    f << table.words[i];
    for (double v : table.vectors[i]) f << " " << format_double(v);
    f << "\n";
  }
}

inline void write_splits(const fs::path& dir, const SplitSpec& s) {
  json j;
  j["seen"] = s.seen;
  j["unseen"] = s.unseen;
  j["val_seen"] = s.val_seen;
  j["test_seen_images"] = s.test_seen_images;
  j["test_images"] = s.test_images;
  std::ofstream(dir / "splits.json") << j.dump(2) << "\n";
}

inline void write_dataset(const fs::path& dir, const Dataset& ds) {
  write_feature_bank(dir, ds.bank);
  write_documents(dir, ds.docs);
  write_embeddings(dir / "embeddings.tsv", ds.table);
  write_splits(dir, ds.splits);
  if (!ds.image_views.empty())
    std::ofstream(dir / "views.json") << json(ds.image_views).dump() << "\n";
}

// ---- batching ----

inline std::vector<std::size_t> train_indices(const FeatureBank& bank, const SplitSpec& splits) {
  std::set<int> seen(splits.seen.begin(), splits.seen.end());
  std::set<std::size_t> held(splits.test_seen_images.begin(), splits.test_seen_images.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < bank.num_images(); ++i)
    if (seen.count(bank.labels[i]) && !held.count(i)) out.push_back(i);
  if (out.empty()) throw DataError("train_indices: no training images");
  return out;
}

// One epoch of batches: a seeded permutation of the indices, chunked. Every
// index appears exactly once; the last batch may be short.
inline std::vector<std::vector<std::size_t>> batch_iter(std::vector<std::size_t> indices,
                                                        std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw DataError("batch_iter: batch_size must be positive");
  if (indices.empty()) throw DataError("batch_iter: empty index set");
  rng.shuffle(indices);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b < indices.size(); b += batch_size) {
    std::size_t e = std::min(indices.size(), b + batch_size);
    batches.emplace_back(indices.begin() + b, indices.begin() + e);
  }
  return batches;
}

}  // namespace emdepart
