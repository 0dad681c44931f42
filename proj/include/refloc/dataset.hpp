#pragma once

// On-disk corpus: one PNG per scene under images/, one JSONL shard per split
// and a manifest.json holding counts and hashes.
//
//   {"id": "s000042", "image": "images/s000042.png", "canvas": [64, 64],
//    "seed": 123, "split": "train", "detection_only": false,
//    "objects": [{"shape": "circle", "color": "red", "size": "small",
//                 "box": [x1, y1, x2, y2]}],
//    "expressions": [{"text": "the red circle", "target_index": 0}]}

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "refloc/error.hpp"
#include "refloc/hash.hpp"
#include "refloc/png_io.hpp"
#include "refloc/rng.hpp"
#include "refloc/scene.hpp"

namespace refloc {

using nlohmann::json;
namespace fs = std::filesystem;

inline constexpr int kDatasetFormatVersion = 1;
inline const std::array<std::string, 3> kSplits{"train", "val", "test"};

struct ExpressionRecord {
  std::string text;
  std::size_t target_index = 0;

  friend bool operator==(const ExpressionRecord&, const ExpressionRecord&) = default;
};

struct DatasetRecord {
  std::string id;
  std::string image;  // relative to the dataset root, or absolute
  Scene scene;
  std::string split = "train";
  bool detection_only = false;
  std::vector<ExpressionRecord> expressions;
};

inline bool is_split(std::string_view s) {
  return std::find(kSplits.begin(), kSplits.end(), s) != kSplits.end();
}

inline void validate(const DatasetRecord& r) {
  if (r.id.empty()) throw ValidationError("record has empty id");
  if (!is_split(r.split)) throw ValidationError("record " + r.id + ": unknown split '" + r.split + "'");
  if (r.scene.canvas.width <= 0 || r.scene.canvas.height <= 0) throw ValidationError("record " + r.id + ": bad canvas");
  if (r.scene.objects.empty()) throw ValidationError("record " + r.id + ": no objects");
  for (const auto& o : r.scene.objects) {
    if (!is_valid(o.box, r.scene.canvas)) throw ValidationError("record " + r.id + ": box " + to_string(o.box) + " invalid for canvas");
  }
  for (const auto& e : r.expressions) {
    if (e.target_index >= r.scene.objects.size()) throw ValidationError("record " + r.id + ": target_index out of range");
    if (e.text.empty()) throw ValidationError("record " + r.id + ": empty expression");
  }
}

inline json to_json(const DatasetRecord& r) {
  json objs = json::array();
  for (const auto& o : r.scene.objects) {
    objs.push_back({{"shape", name(o.shape)},
                    {"color", name(o.color)},
                    {"size", name(o.size)},
                    {"box", {o.box.x1, o.box.y1, o.box.x2, o.box.y2}}});
  }
  json exprs = json::array();
  for (const auto& e : r.expressions) exprs.push_back({{"text", e.text}, {"target_index", e.target_index}});
  return json{{"id", r.id},
              {"image", r.image},
              {"canvas", {r.scene.canvas.width, r.scene.canvas.height}},
              {"seed", r.scene.seed},
              {"split", r.split},
              {"detection_only", r.detection_only},
              {"objects", objs},
              {"expressions", exprs}};
}

template <class E, std::size_t N>
E enum_field(const json& j, const char* key, const std::array<E, N>& values) {
  const auto s = j.at(key).get<std::string>();
  auto v = parse_enum(s, values);
  if (!v) throw ValidationError(std::string("unknown ") + key + " '" + s + "'");
  return *v;
}

inline DatasetRecord record_from_json(const json& j) {
  try {
    DatasetRecord r;
    r.id = j.at("id").get<std::string>();
    r.image = j.at("image").get<std::string>();
    const auto& cv = j.at("canvas");
    if (!cv.is_array() || cv.size() != 2) throw ValidationError("canvas must be [W, H]");
    r.scene.canvas = {cv[0].get<int>(), cv[1].get<int>()};
    r.scene.seed = j.value("seed", std::uint64_t{0});
    r.split = j.at("split").get<std::string>();
    r.detection_only = j.value("detection_only", false);
    for (const auto& o : j.at("objects")) {
      SceneObject obj;
      obj.shape = enum_field(o, "shape", kShapes);
      obj.color = enum_field(o, "color", kColors);
      obj.size = enum_field(o, "size", kSizes);
      const auto& b = o.at("box");
      if (!b.is_array() || b.size() != 4) throw ValidationError("box must have 4 numbers");
      obj.box = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
      r.scene.objects.push_back(obj);
    }
    for (const auto& e : j.at("expressions")) {
      r.expressions.push_back({e.at("text").get<std::string>(), e.at("target_index").get<std::size_t>()});
    }
    validate(r);
    return r;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed dataset record: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Generation

struct GenerateConfig {
  int num_scenes = 5000;
  std::uint64_t seed = 7;
  double val_ratio = 0.1;
  double test_ratio = 0.1;
  /// Fraction of the train split written without expressions.
  double detection_fraction = 0.0;
  /// Writes every scene without expressions.
  bool detection_only = false;
  SceneConfig scene;

  friend bool operator==(const GenerateConfig&, const GenerateConfig&) = default;
};

inline void validate(const GenerateConfig& c) {
  if (c.num_scenes < 1) throw ValidationError("generate: num_scenes must be >= 1");
  if (c.val_ratio < 0 || c.test_ratio < 0 || c.val_ratio + c.test_ratio >= 1) {
    throw ValidationError("generate: split ratios must be >= 0 and leave a non-empty train split");
  }
  if (c.detection_fraction < 0 || c.detection_fraction > 1) throw ValidationError("generate: detection_fraction must be in [0, 1]");
  validate(c.scene);
}

struct SplitSizes {
  int train = 0, val = 0, test = 0;
};

/// floor(n * ratio) for val and test; the remainder goes to train.
inline SplitSizes split_sizes(int n, double val_ratio, double test_ratio) {
  SplitSizes s;
  s.val = static_cast<int>(std::floor(n * val_ratio));
  s.test = static_cast<int>(std::floor(n * test_ratio));
  s.train = n - s.val - s.test;
  return s;
}

/// Scene i of a corpus. Seeds derive from (corpus seed, i); an unplaceable
/// draw is replaced by the next derived seed.
inline Scene corpus_scene(std::uint64_t corpus_seed, int index, const SceneConfig& sc, int* resamples = nullptr) {
  const std::uint64_t base = mix_seed(corpus_seed, static_cast<std::uint64_t>(index));
  for (std::uint64_t k = 0; k < 64; ++k) {
    try {
      return generate_scene(k == 0 ? base : mix_seed(base, k), sc);
    } catch (const SceneGenerationError&) {
      if (resamples) ++*resamples;
    }
  }
  throw SceneGenerationError("scene " + std::to_string(index) + ": placement failed for 64 derived seeds");
}

/// Every object that some template expression singles out.
inline std::vector<ExpressionRecord> scene_expressions(const Scene& s) {
  std::vector<ExpressionRecord> out;
  for (std::size_t t = 0; t < s.objects.size(); ++t) {
    try {
      out.push_back({generate_expression(s, t).text, t});
    } catch (const ExpressionError&) {
    }
  }
  return out;
}

inline std::vector<DatasetRecord> generate_records(const GenerateConfig& c, int* resamples = nullptr) {
  validate(c);
  const SplitSizes sz = split_sizes(c.num_scenes, c.val_ratio, c.test_ratio);
  const int n_det = static_cast<int>(std::floor(sz.train * c.detection_fraction));
  std::vector<DatasetRecord> out;
  for (int i = 0; i < c.num_scenes; ++i) {
    DatasetRecord r;
    char id[32];
    std::snprintf(id, sizeof id, "s%06d", i);
    r.id = id;
    r.image = "images/" + r.id + ".png";
    r.scene = corpus_scene(c.seed, i, c.scene, resamples);
    r.split = i < sz.train ? "train" : (i < sz.train + sz.val ? "val" : "test");
    r.detection_only = c.detection_only || (i < sz.train && i >= sz.train - n_det);
    if (!r.detection_only) r.expressions = scene_expressions(r.scene);
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files

inline std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError(p.string(), "cannot open");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, std::string_view data) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError(p.string(), "cannot open for writing");
  f.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!f) throw IoError(p.string(), "write failed");
}

struct Manifest {
  int format_version = kDatasetFormatVersion;
  json generator;  // generation config, or null for ingested data
  std::map<std::string, std::size_t> counts;
  std::map<std::string, std::string> split_hashes;
  std::string corpus_hash;
};

inline json to_json(const Manifest& m) {
  return json{{"format_version", m.format_version},
              {"generator", m.generator},
              {"counts", m.counts},
              {"split_hashes", m.split_hashes},
              {"corpus_hash", m.corpus_hash}};
}

inline Manifest manifest_from_json(const json& j) {
  try {
    Manifest m;
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != kDatasetFormatVersion) {
      throw ValidationError("unsupported dataset format version " + std::to_string(m.format_version));
    }
    m.generator = j.value("generator", json());
    m.counts = j.at("counts").get<std::map<std::string, std::size_t>>();
    m.split_hashes = j.at("split_hashes").get<std::map<std::string, std::string>>();
    m.corpus_hash = j.at("corpus_hash").get<std::string>();
    return m;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  }
}

inline std::string shard_text(const std::vector<DatasetRecord>& recs, std::string_view split) {
  std::string out;
  for (const auto& r : recs) {
    if (r.split == split) {
      out += to_json(r).dump();
      out += '\n';
    }
  }
  return out;
}

/// Hash of a split: its JSONL shard and, in order, its image bytes.
inline std::string split_hash(std::string_view shard, const std::vector<std::string>& image_bytes) {
  Sha256 h;
  h.field(shard);
  for (const auto& b : image_bytes) h.field(b);
  return h.hex();
}

inline std::string corpus_hash(const std::map<std::string, std::string>& split_hashes) {
  Sha256 h;
  for (const auto& [k, v] : split_hashes) h.field(k).field(v);
  return h.hex();
}

/// Writes images, shards and manifest. Refuses an existing manifest unless
/// `force`.
inline Manifest write_dataset(const fs::path& root, const std::vector<DatasetRecord>& recs, const json& generator,
                              bool force) {
  const fs::path mpath = root / "manifest.json";
  if (fs::exists(mpath) && !force) {
    throw IoError(mpath.string(), "manifest exists; pass --force to overwrite");
  }
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  if (ec) throw IoError((root / "images").string(), "cannot create directory: " + ec.message());
  Manifest m;
  m.generator = generator;
  std::map<std::string, std::vector<std::string>> bytes;
  for (const auto& r : recs) {
    validate(r);
    const fs::path ip = fs::path(r.image).is_absolute() ? fs::path(r.image) : root / r.image;
    write_png(ip.string(), render(r.scene));
    bytes[r.split].push_back(read_file(ip));
  }
  for (const auto& s : kSplits) {
    const std::string text = shard_text(recs, s);
    write_file(root / (s + ".jsonl"), text);
    m.counts[s] = static_cast<std::size_t>(std::count_if(recs.begin(), recs.end(), [&](const auto& r) { return r.split == s; }));
    m.split_hashes[s] = split_hash(text, bytes[s]);
  }
  m.corpus_hash = corpus_hash(m.split_hashes);
  write_file(mpath, to_json(m).dump(2) + "\n");
  return m;
}

struct Dataset {
  fs::path root;
  Manifest manifest;
  std::vector<DatasetRecord> records;

  std::vector<const DatasetRecord*> split(std::string_view s) const {
    std::vector<const DatasetRecord*> out;
    for (const auto& r : records) {
      if (r.split == s) out.push_back(&r);
    }
    return out;
  }

  fs::path image_path(const DatasetRecord& r) const {
    return fs::path(r.image).is_absolute() ? fs::path(r.image) : root / r.image;
  }

  Image load_image(const DatasetRecord& r) const {
    Image img = read_png(image_path(r).string());
    if (img.width != r.scene.canvas.width || img.height != r.scene.canvas.height) {
      throw ValidationError("record " + r.id + ": image size does not match canvas");
    }
    return img;
  }
};

inline std::vector<DatasetRecord> read_shard(const fs::path& p) {
  std::vector<DatasetRecord> out;
  std::istringstream in(read_file(p));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const json::parse_error& e) {
      throw ValidationError(p.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(p.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

/// Loads a dataset and verifies its hashes against the manifest.
inline Dataset load_dataset(const fs::path& root, bool verify = true) {
  Dataset d;
  d.root = root;
  const fs::path mpath = root / "manifest.json";
  if (!fs::exists(mpath)) throw IoError(mpath.string(), "dataset manifest not found");
  try {
    d.manifest = manifest_from_json(json::parse(read_file(mpath)));
  } catch (const json::parse_error& e) {
    throw ValidationError(mpath.string() + ": " + e.what());
  }
  for (const auto& s : kSplits) {
    const fs::path sp = root / (s + ".jsonl");
    if (!fs::exists(sp)) continue;
    auto recs = read_shard(sp);
    std::vector<std::string> bytes;
    for (const auto& r : recs) {
      if (r.split != s) throw ValidationError(sp.string() + ": record " + r.id + " tagged '" + r.split + "'");
      if (verify) bytes.push_back(read_file(d.image_path(r)));
    }
    if (verify) {
      const auto it = d.manifest.split_hashes.find(s);
      if (it == d.manifest.split_hashes.end() || it->second != split_hash(read_file(sp), bytes)) {
        throw ValidationError(sp.string() + ": content does not match manifest hash");
      }
    }
    for (auto& r : recs) d.records.push_back(std::move(r));
  }
  return d;
}

}  // namespace refloc
