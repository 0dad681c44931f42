#pragma once

// Run configuration: one JSON document covering data generation, model,
// both training stages, decoding and evaluation. Every section is optional;
// omitted keys keep their defaults and unknown keys are rejected.

#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "refloc/dataset.hpp"
#include "refloc/decode.hpp"
#include "refloc/hash.hpp"
#include "refloc/model.hpp"
#include "refloc/train.hpp"

namespace refloc {

struct PathsConfig {
  std::string data = "data";  // relative paths resolve against the output root
  std::string runs = "runs";

  friend bool operator==(const PathsConfig&, const PathsConfig&) = default;
};

struct EvalConfig {
  std::string split = "val";
  std::size_t cycle_samples = 200;
  int batch = 64;

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct RunConfig {
  std::uint64_t seed = 7;
  PathsConfig paths;
  GenerateConfig generate;
  ModelConfig model;
  TrainConfig activation;
  TrainConfig cycle;
  /// Cycle stage on gold plus pseudo-labelled pairs, continuing from the
  /// gold cycle checkpoint that generated the labels.
  TrainConfig augment;
  BeamConfig beam;
  EvalConfig eval;
  /// Use pseudo-labelled detection-only scenes when they exist.
  bool pseudo_labels = true;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

/// Reads keys of one JSON object, remembering which were consumed.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError("config: '" + path_ + "' must be an object");
  }

  template <class V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<V>();
    } catch (const json::exception&) {
      throw ValidationError("config: '" + path_ + "." + key + "' has the wrong type");
    }
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string child(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ValidationError("config: unknown key '" + (path_.empty() ? k : path_ + "." + k) + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline json to_json(const SceneConfig& c) {
  return json{{"canvas", {c.canvas.width, c.canvas.height}}, {"min_objects", c.min_objects},
              {"max_objects", c.max_objects}, {"overlap_cap", c.overlap_cap},
              {"occlusion_cap", c.occlusion_cap}, {"max_retries", c.max_retries}};
}

inline void from_json_strict(const json& j, const std::string& path, SceneConfig& c) {
  detail::Section s(j, path);
  std::array<int, 2> canvas{c.canvas.width, c.canvas.height};
  s.get("canvas", canvas);
  c.canvas = {canvas[0], canvas[1]};
  s.get("min_objects", c.min_objects);
  s.get("max_objects", c.max_objects);
  s.get("overlap_cap", c.overlap_cap);
  s.get("occlusion_cap", c.occlusion_cap);
  s.get("max_retries", c.max_retries);
  s.finish();
}

inline json to_json(const GenerateConfig& c) {
  return json{{"num_scenes", c.num_scenes}, {"seed", c.seed}, {"val_ratio", c.val_ratio},
              {"test_ratio", c.test_ratio}, {"detection_fraction", c.detection_fraction},
              {"detection_only", c.detection_only}, {"scene", to_json(c.scene)}};
}

inline void from_json_strict(const json& j, const std::string& path, GenerateConfig& c) {
  detail::Section s(j, path);
  s.get("num_scenes", c.num_scenes);
  s.get("seed", c.seed);
  s.get("val_ratio", c.val_ratio);
  s.get("test_ratio", c.test_ratio);
  s.get("detection_fraction", c.detection_fraction);
  s.get("detection_only", c.detection_only);
  if (const json* sc = s.sub("scene")) from_json_strict(*sc, s.child("scene"), c.scene);
  s.finish();
}

inline void from_json_strict(const json& j, const std::string& path, ModelConfig& c) {
  detail::Section s(j, path);
  s.get("d_model", c.d_model);
  s.get("heads", c.heads);
  s.get("patch", c.patch);
  s.get("image_height", c.image_height);
  s.get("image_width", c.image_width);
  s.get("text_layers", c.text_layers);
  s.get("enc_layers", c.enc_layers);
  s.get("dec_layers", c.dec_layers);
  s.get("num_queries", c.num_queries);
  s.get("ffn_mult", c.ffn_mult);
  s.get("vocab_size", c.vocab_size);
  s.get("max_seq_len", c.max_seq_len);
  s.get("max_text_len", c.max_text_len);
  s.get("tie_output", c.tie_output);
  s.get("init_std", c.init_std);
  s.get("init_seed", c.init_seed);
  s.finish();
}

inline json to_json(const OptimConfig& c) {
  return json{{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps},
              {"weight_decay", c.weight_decay}, {"grad_clip", c.grad_clip}, {"warmup_steps", c.warmup_steps}};
}

inline void from_json_strict(const json& j, const std::string& path, OptimConfig& c) {
  detail::Section s(j, path);
  s.get("lr", c.lr);
  s.get("beta1", c.beta1);
  s.get("beta2", c.beta2);
  s.get("eps", c.eps);
  s.get("weight_decay", c.weight_decay);
  s.get("grad_clip", c.grad_clip);
  s.get("warmup_steps", c.warmup_steps);
  s.finish();
}

inline json to_json(const LossWeights& w) {
  return json{{"lm", w.lm}, {"itc", w.itc}, {"itg", w.itg}, {"itm", w.itm}, {"cyc", w.cyc}};
}

inline void from_json_strict(const json& j, const std::string& path, LossWeights& w) {
  detail::Section s(j, path);
  s.get("lm", w.lm);
  s.get("itc", w.itc);
  s.get("itg", w.itg);
  s.get("itm", w.itm);
  s.get("cyc", w.cyc);
  s.finish();
}

inline json to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"optim", to_json(c.optim)},
              {"seed", c.seed},
              {"freeze", c.freeze},
              {"weights", to_json(c.weights)},
              {"reg_fraction", c.reg_fraction},
              {"pseudo_ratio", c.pseudo_ratio},
              {"cycle_metric_batch", c.cycle_metric_batch},
              {"cycle_backprop", c.cycle_backprop},
              {"itm_pairs", c.itm_pairs},
              {"max_steps", c.max_steps}};
}

inline void from_json_strict(const json& j, const std::string& path, TrainConfig& c) {
  detail::Section s(j, path);
  s.get("epochs", c.epochs);
  s.get("batch_size", c.batch_size);
  if (const json* o = s.sub("optim")) from_json_strict(*o, s.child("optim"), c.optim);
  s.get("seed", c.seed);
  s.get("freeze", c.freeze);
  if (const json* w = s.sub("weights")) from_json_strict(*w, s.child("weights"), c.weights);
  s.get("reg_fraction", c.reg_fraction);
  s.get("pseudo_ratio", c.pseudo_ratio);
  s.get("cycle_metric_batch", c.cycle_metric_batch);
  s.get("cycle_backprop", c.cycle_backprop);
  s.get("itm_pairs", c.itm_pairs);
  s.get("max_steps", c.max_steps);
  s.finish();
  for (const auto& g : c.freeze) {
    const auto& all = parameter_groups();
    if (std::find(all.begin(), all.end(), g) == all.end()) {
      throw ValidationError("config: '" + path + ".freeze' names unknown group '" + g + "'");
    }
  }
}

inline json to_json(const BeamConfig& c) {
  return json{{"beam_width", c.beam_width}, {"max_new_tokens", c.max_new_tokens}, {"length_penalty", c.length_penalty}};
}

inline void from_json_strict(const json& j, const std::string& path, BeamConfig& c) {
  detail::Section s(j, path);
  s.get("beam_width", c.beam_width);
  s.get("max_new_tokens", c.max_new_tokens);
  s.get("length_penalty", c.length_penalty);
  s.finish();
}

inline json to_json(const RunConfig& c) {
  return json{{"seed", c.seed},
              {"paths", {{"data", c.paths.data}, {"runs", c.paths.runs}}},
              {"generate", to_json(c.generate)},
              {"model", to_json(c.model)},
              {"activation", to_json(c.activation)},
              {"cycle", to_json(c.cycle)},
              {"augment", to_json(c.augment)},
              {"beam", to_json(c.beam)},
              {"eval", {{"split", c.eval.split}, {"cycle_samples", c.eval.cycle_samples}, {"batch", c.eval.batch}}},
              {"pseudo_labels", c.pseudo_labels}};
}

inline void validate(const RunConfig& c) {
  validate(c.generate);
  ModelConfig m = c.model;
  if (m.vocab_size == 0) m.vocab_size = 1 << 12;  // filled in from the vocabulary at run time
  validate(m);
  validate(c.activation);
  validate(c.cycle);
  validate(c.augment);
  validate(c.beam);
  if (!is_split(c.eval.split) || c.eval.split == "train") throw ValidationError("config: eval.split must be val or test");
  if (c.eval.batch < 1) throw ValidationError("config: eval.batch must be >= 1");
  if (c.model.image_height != c.generate.scene.canvas.height || c.model.image_width != c.generate.scene.canvas.width) {
    throw ValidationError("config: model image size must equal the scene canvas");
  }
}

/// Applies `j` on top of `base` (defaults or a preset).
inline RunConfig parse_run_config(const json& j, RunConfig base = {}) {
  detail::Section s(j, "");
  s.get("seed", base.seed);
  if (const json* p = s.sub("paths")) {
    detail::Section ps(*p, "paths");
    ps.get("data", base.paths.data);
    ps.get("runs", base.paths.runs);
    ps.finish();
  }
  if (const json* g = s.sub("generate")) from_json_strict(*g, "generate", base.generate);
  if (const json* m = s.sub("model")) from_json_strict(*m, "model", base.model);
  if (const json* a = s.sub("activation")) from_json_strict(*a, "activation", base.activation);
  if (const json* c = s.sub("cycle")) from_json_strict(*c, "cycle", base.cycle);
  if (const json* a = s.sub("augment")) from_json_strict(*a, "augment", base.augment);
  if (const json* b = s.sub("beam")) from_json_strict(*b, "beam", base.beam);
  if (const json* e = s.sub("eval")) {
    detail::Section es(*e, "eval");
    es.get("split", base.eval.split);
    es.get("cycle_samples", base.eval.cycle_samples);
    es.get("batch", base.eval.batch);
    es.finish();
  }
  s.get("pseudo_labels", base.pseudo_labels);
  s.finish();
  validate(base);
  return base;
}

inline RunConfig load_run_config(const std::string& path, RunConfig base = {}) {
  if (!fs::exists(path)) throw IoError(path, "config file not found");
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(path + ": " + e.what());
  }
  return parse_run_config(j, std::move(base));
}

/// SHA-256 of the canonical serialization.
inline std::string fingerprint(const RunConfig& c) { return sha256_hex(to_json(c).dump()); }

/// Replaces every seed with one derived from `seed`.
inline void reseed(RunConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.generate.seed = mix_seed(seed, 1);
  c.model.init_seed = mix_seed(seed, 2);
  c.activation.seed = mix_seed(seed, 3);
  c.cycle.seed = mix_seed(seed, 4);
  c.augment.seed = mix_seed(seed, 5);
}

// ---------------------------------------------------------------------------
// Presets

/// 300 scenes, d=32, 3 epochs per stage: an end-to-end check in about a minute.
inline RunConfig smoke_preset() {
  RunConfig c;
  c.generate.num_scenes = 300;
  c.generate.detection_fraction = 0.2;
  c.model.d_model = 32;
  c.model.heads = 2;
  c.model.num_queries = 4;
  for (TrainConfig* t : {&c.activation, &c.cycle, &c.augment}) {
    t->epochs = 3;
    t->batch_size = 16;
    t->optim.lr = 1e-3;
    t->optim.weight_decay = 0.01;
    t->optim.warmup_steps = 10;
  }
  c.eval.cycle_samples = 30;
  return c;
}

/// 5000 scenes, d=64: the configuration behind the desk-scale accuracy targets.
inline RunConfig desk_preset() {
  RunConfig c;
  c.generate.num_scenes = 5000;
  c.generate.detection_fraction = 0.2;
  c.model.d_model = 64;
  c.model.heads = 2;
  for (TrainConfig* t : {&c.activation, &c.cycle, &c.augment}) {
    t->epochs = 1000;
    t->batch_size = 32;
    t->optim.lr = 1e-3;
    t->optim.weight_decay = 0.01;
    t->optim.warmup_steps = 200;
  }
  c.activation.max_steps = 2000;
  c.cycle.max_steps = 8000;
  c.augment.max_steps = 3000;
  c.eval.cycle_samples = 200;
  return c;
}

inline RunConfig preset(std::string_view name) {
  if (name == "default") return RunConfig{};
  if (name == "smoke") return smoke_preset();
  if (name == "desk") return desk_preset();
  throw ValidationError("unknown preset '" + std::string(name) + "' (expected default, smoke or desk)");
}

}  // namespace refloc
