#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   8 bytes   magic "RFLCKPT1"
//   u32       format version (1)
//   u64       header length H
//   H bytes   header JSON (model config, vocabulary hash, stage, counters,
//             lineage, parameter table, optimizer flag)
//   for each parameter in header order: rows*cols float32, row-major
//   if has_optimizer: the first moments, then the second moments, same order
//
// The checkpoint id is the SHA-256 of the whole file.

#include <bit>
#include <cstring>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "refloc/dataset.hpp"
#include "refloc/error.hpp"
#include "refloc/hash.hpp"
#include "refloc/model.hpp"
#include "refloc/optim.hpp"

namespace refloc {

inline constexpr char kCheckpointMagic[8] = {'R', 'F', 'L', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class Stage { activation, cycle };

inline std::string_view name(Stage s) { return s == Stage::activation ? "activation" : "cycle"; }

inline Stage parse_stage(std::string_view s) {
  if (s == "activation") return Stage::activation;
  if (s == "cycle") return Stage::cycle;
  throw ValidationError("unknown stage '" + std::string(s) + "'");
}

inline json to_json(const ModelConfig& c) {
  return json{{"d_model", c.d_model},         {"heads", c.heads},
              {"patch", c.patch},             {"image_height", c.image_height},
              {"image_width", c.image_width}, {"text_layers", c.text_layers},
              {"enc_layers", c.enc_layers},   {"dec_layers", c.dec_layers},
              {"num_queries", c.num_queries}, {"ffn_mult", c.ffn_mult},
              {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
              {"max_text_len", c.max_text_len}, {"tie_output", c.tie_output},
              {"init_std", c.init_std},       {"init_seed", c.init_seed}};
}

struct Lineage {
  std::string corpus_hash;
  std::vector<std::string> train_split_hashes;  // every split the weights were fit on
  std::string parent;                           // id of the checkpoint this one continued from
  std::vector<std::string> pseudo_generators;   // ids of checkpoints that produced pseudo labels

  friend bool operator==(const Lineage&, const Lineage&) = default;
};

inline json to_json(const Lineage& l) {
  return json{{"corpus_hash", l.corpus_hash},
              {"train_split_hashes", l.train_split_hashes},
              {"parent", l.parent},
              {"pseudo_generators", l.pseudo_generators}};
}

inline Lineage lineage_from_json(const json& j) {
  Lineage l;
  l.corpus_hash = j.at("corpus_hash").get<std::string>();
  l.train_split_hashes = j.at("train_split_hashes").get<std::vector<std::string>>();
  l.parent = j.at("parent").get<std::string>();
  l.pseudo_generators = j.at("pseudo_generators").get<std::vector<std::string>>();
  return l;
}

struct CheckpointMeta {
  Stage stage = Stage::activation;
  long step = 0;
  int epoch = 0;
  std::string vocab_hash;
  Lineage lineage;
  json run_config;  // free-form copy of the run configuration
};

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  out.append(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U get_le(std::string_view in, std::size_t& pos, const std::string& path) {
  if (pos + sizeof(U) > in.size()) throw IoError(path, "checkpoint truncated");
  unsigned char b[sizeof(U)];
  std::memcpy(b, in.data() + pos, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  pos += sizeof(U);
  U v;
  std::memcpy(&v, b, sizeof(U));
  return v;
}

template <class T>
void put_matrix(std::string& out, const nn::Matrix<T>& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) put_le(out, static_cast<float>(m.data()[i]));
}

template <class T>
void get_matrix(std::string_view in, std::size_t& pos, nn::Matrix<T>& m, const std::string& path) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(get_le<float>(in, pos, path));
}

}  // namespace detail

inline ModelConfig model_config_from_json(const json& j);

template <class T>
std::string serialize_checkpoint(const Model<T>& model, const AdamW<T>* opt, const CheckpointMeta& meta) {
  json params = json::array();
  for (const auto& p : model.params()) {
    params.push_back({{"name", p.name}, {"group", p.group}, {"rows", p.value.rows()}, {"cols", p.value.cols()},
                      {"frozen", p.frozen}});
  }
  json header{{"model", to_json(model.config())},
              {"vocab_hash", meta.vocab_hash},
              {"stage", name(meta.stage)},
              {"step", meta.step},
              {"epoch", meta.epoch},
              {"lineage", to_json(meta.lineage)},
              {"run_config", meta.run_config},
              {"params", params},
              {"has_optimizer", opt != nullptr}};
  if (opt) header["optimizer_step"] = opt->step_count();
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le(out, kCheckpointVersion);
  detail::put_le(out, static_cast<std::uint64_t>(h.size()));
  out += h;
  for (const auto& p : model.params()) detail::put_matrix(out, p.value);
  if (opt) {
    for (const auto& m : opt->first_moments()) detail::put_matrix(out, m);
    for (const auto& v : opt->second_moments()) detail::put_matrix(out, v);
  }
  return out;
}

/// Writes the checkpoint and returns its id.
template <class T>
std::string save_checkpoint(const std::string& path, const Model<T>& model, const AdamW<T>* opt,
                            const CheckpointMeta& meta) {
  const std::string bytes = serialize_checkpoint(model, opt, meta);
  write_file(path, bytes);
  return sha256_hex(bytes);
}

template <class T>
struct LoadedCheckpoint {
  std::string id;
  CheckpointMeta meta;
  Model<T> model;
  std::optional<AdamW<T>> optimizer;
};

template <class T>
LoadedCheckpoint<T> parse_checkpoint(std::string_view bytes, const std::string& path,
                                     const OptimConfig& optim = {}) {
  if (bytes.size() < sizeof kCheckpointMagic || std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw IoError(path, "not a checkpoint (bad magic)");
  }
  std::size_t pos = sizeof kCheckpointMagic;
  const auto version = detail::get_le<std::uint32_t>(bytes, pos, path);
  if (version != kCheckpointVersion) throw IoError(path, "unsupported checkpoint version " + std::to_string(version));
  const auto hlen = detail::get_le<std::uint64_t>(bytes, pos, path);
  if (pos + hlen > bytes.size()) throw IoError(path, "checkpoint truncated");
  json header;
  try {
    header = json::parse(bytes.substr(pos, hlen));
  } catch (const json::exception& e) {
    throw IoError(path, std::string("bad checkpoint header: ") + e.what());
  }
  pos += hlen;
  try {
    CheckpointMeta meta;
    meta.stage = parse_stage(header.at("stage").get<std::string>());
    meta.step = header.at("step").get<long>();
    meta.epoch = header.at("epoch").get<int>();
    meta.vocab_hash = header.at("vocab_hash").get<std::string>();
    meta.lineage = lineage_from_json(header.at("lineage"));
    meta.run_config = header.at("run_config");
    Model<T> model(model_config_from_json(header.at("model")));
    const auto& table = header.at("params");
    if (table.size() != model.params().size()) throw IoError(path, "parameter count does not match model config");
    for (std::size_t i = 0; i < table.size(); ++i) {
      auto& p = model.params()[i];
      if (table[i].at("name").get<std::string>() != p.name || table[i].at("rows").get<long>() != p.value.rows() ||
          table[i].at("cols").get<long>() != p.value.cols()) {
        throw IoError(path, "parameter table mismatch at '" + p.name + "'");
      }
      p.frozen = table[i].at("frozen").get<bool>();
      detail::get_matrix(bytes, pos, p.value, path);
    }
    std::optional<AdamW<T>> opt;
    if (header.at("has_optimizer").get<bool>()) {
      opt.emplace(optim, model.params());
      for (auto& m : opt->first_moments()) detail::get_matrix(bytes, pos, m, path);
      for (auto& v : opt->second_moments()) detail::get_matrix(bytes, pos, v, path);
      opt->set_step_count(header.at("optimizer_step").get<long>());
    }
    if (pos != bytes.size()) throw IoError(path, "trailing bytes after checkpoint payload");
    return {sha256_hex(bytes), std::move(meta), std::move(model), std::move(opt)};
  } catch (const json::exception& e) {
    throw IoError(path, std::string("bad checkpoint header: ") + e.what());
  }
}

template <class T = float>
LoadedCheckpoint<T> load_checkpoint(const std::string& path, const OptimConfig& optim = {}) {
  if (!fs::exists(path)) throw IoError(path, "checkpoint not found");
  const std::string bytes = read_file(path);
  return parse_checkpoint<T>(bytes, path, optim);
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.heads = j.at("heads").get<int>();
  c.patch = j.at("patch").get<int>();
  c.image_height = j.at("image_height").get<int>();
  c.image_width = j.at("image_width").get<int>();
  c.text_layers = j.at("text_layers").get<int>();
  c.enc_layers = j.at("enc_layers").get<int>();
  c.dec_layers = j.at("dec_layers").get<int>();
  c.num_queries = j.at("num_queries").get<int>();
  c.ffn_mult = j.at("ffn_mult").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.max_text_len = j.at("max_text_len").get<int>();
  c.tie_output = j.at("tie_output").get<bool>();
  c.init_std = j.at("init_std").get<double>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  return c;
}

}  // namespace refloc
