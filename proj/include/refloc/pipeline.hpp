#pragma once

// File-level pipeline shared by the CLI and the acceptance harness:
// dataset -> activation checkpoint -> pseudo labels -> cycle checkpoint ->
// reports. Each stage reads its inputs from disk and records their hashes.
//
// Run directory layout:
//   <run>/model.ckpt   final checkpoint (with optimizer state)
//   <run>/log.csv      one row per optimizer step
//   <run>/val.report   EvalReport on the configured eval split
//   <pseudo>/labels.jsonl  {"record", "target_index", "expression", "generator"}
//   <pseudo>/report.json   candidate / retained / rejected counts

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>

#include "refloc/config.hpp"

namespace refloc {

inline std::string vocab_hash(const Vocabulary& v) { return sha256_hex(v.serialize()); }

/// A loaded dataset with its decoded images.
struct Corpus {
  Dataset data;
  ImageStore images;

  static Corpus open(const fs::path& root) {
    Corpus c;
    c.data = load_dataset(root);
    c.images = ImageStore::load(c.data);
    return c;
  }

  const std::string& split_hash(const std::string& s) const {
    const auto it = data.manifest.split_hashes.find(s);
    if (it == data.manifest.split_hashes.end()) throw ValidationError("dataset has no split '" + s + "'");
    return it->second;
  }

  const DatasetRecord* find(const std::string& id) const {
    for (const auto& r : data.records) {
      if (r.id == id) return &r;
    }
    return nullptr;
  }
};

using Progress = std::function<void(const std::string&)>;

struct StageResult {
  fs::path checkpoint;
  std::string checkpoint_id;
  TrainLog log;
  EvalReport report;
};

inline Manifest run_generate(const RunConfig& cfg, const fs::path& data_dir, bool force) {
  const auto recs = generate_records(cfg.generate);
  return write_dataset(data_dir, recs, to_json(cfg.generate), force);
}

inline void write_log(const fs::path& path, const TrainLog& log) {
  std::string out = csv_header();
  for (const auto& r : log.steps) out += csv_row(r);
  write_file(path, out);
}

inline StepCallback progress_callback(const Progress& progress, const std::string& stage, long every = 100) {
  if (!progress) return {};
  return [=](const StepRecord& r) {
    if ((r.step + 1) % every != 0) return;
    char buf[200];
    std::snprintf(buf, sizeof buf, "%s step %ld epoch %d lr %.2e lm %.4f itg %.4f itc %.3f itm %.3f cyc %.2f/%.3f",
                  stage.c_str(), r.step + 1, r.epoch, r.lr, r.loss.lm, r.loss.itg, r.loss.itc, r.loss.itm,
                  r.loss.cyc_box, r.loss.cyc_text);
    progress(buf);
  };
}

/// Rejects evaluation on any split the checkpoint was trained on.
inline void check_disjoint(const Lineage& lineage, const std::string& split_hash, const std::string& split) {
  for (const auto& h : lineage.train_split_hashes) {
    if (h == split_hash) {
      throw ValidationError("split '" + split + "' was used to train this checkpoint; evaluate on a held-out split");
    }
  }
}

inline std::vector<const GroundingSample*> pointers(const std::vector<GroundingSample>& v) {
  std::vector<const GroundingSample*> out;
  out.reserve(v.size());
  for (const auto& s : v) out.push_back(&s);
  return out;
}

/// Grades a loaded checkpoint on a split. The report carries the checkpoint
/// id and the fingerprint of the configuration that produced it.
template <class T>
EvalReport evaluate_checkpoint(const LoadedCheckpoint<T>& ck, const Corpus& corpus, const std::string& split,
                               const RunConfig& cfg, std::vector<SampleResult>* per_sample = nullptr) {
  check_disjoint(ck.meta.lineage, corpus.split_hash(split), split);
  const Vocabulary vocab = Vocabulary::standard();
  if (ck.meta.vocab_hash != vocab_hash(vocab)) throw ValidationError("checkpoint vocabulary does not match");
  const auto samples = build_samples(vocab, corpus.data, corpus.images, corpus.data.split(split));
  if (samples.rec.empty()) throw ValidationError("split '" + split + "' has no referring expressions");
  ModelResponder<T> responder(ck.model, vocab, cfg.beam, cfg.eval.batch);
  EvalOptions eo;
  eo.cycle_samples = cfg.eval.cycle_samples;
  EvalReport r = evaluate(responder, vocab, pointers(samples.rec), split, eo, per_sample);
  r.checkpoint = ck.id;
  r.config_fingerprint = ck.meta.run_config.is_object() ? sha256_hex(ck.meta.run_config.dump()) : std::string();
  return r;
}

inline EvalReport evaluate_checkpoint(const fs::path& ckpt, const Corpus& corpus, const std::string& split,
                                      const RunConfig& cfg, std::vector<SampleResult>* per_sample = nullptr) {
  if (!fs::exists(ckpt)) throw IoError(ckpt.string(), "checkpoint not found");
  return evaluate_checkpoint(load_checkpoint<float>(ckpt.string()), corpus, split, cfg, per_sample);
}

inline void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError(p.string(), "cannot create directory: " + ec.message());
}

inline void refuse_existing(const fs::path& p, bool force) {
  if (fs::exists(p) && !force) throw IoError(p.string(), "already exists; pass --force to overwrite");
}

// ---------------------------------------------------------------------------
// Activation

inline StageResult run_activation(const RunConfig& cfg, const Corpus& corpus, const fs::path& run_dir, bool force,
                                  const Progress& progress = {}) {
  refuse_existing(run_dir / "model.ckpt", force);
  ensure_dir(run_dir);
  const Vocabulary vocab = Vocabulary::standard();
  const auto train = build_samples(vocab, corpus.data, corpus.images, corpus.data.split("train"));
  ModelConfig mc = cfg.model;
  mc.vocab_size = static_cast<int>(vocab.size());
  TrainState<float> st(Model<float>(mc), cfg.activation.optim);
  StageResult res;
  res.log = run_activation_stage(st, train.captions, cfg.activation, progress_callback(progress, "activation"));
  write_log(run_dir / "log.csv", res.log);
  CheckpointMeta meta;
  meta.stage = Stage::activation;
  meta.step = st.step;
  meta.epoch = st.epoch;
  meta.vocab_hash = vocab_hash(vocab);
  meta.lineage.corpus_hash = corpus.data.manifest.corpus_hash;
  meta.lineage.train_split_hashes = {corpus.split_hash("train")};
  meta.run_config = to_json(cfg);
  res.checkpoint = run_dir / "model.ckpt";
  res.checkpoint_id = save_checkpoint(res.checkpoint.string(), st.model, &st.opt, meta);
  res.report = evaluate_checkpoint(res.checkpoint, corpus, cfg.eval.split, cfg);
  emit_report(res.report, (run_dir / "val.report").string());
  return res;
}

// ---------------------------------------------------------------------------
// Pseudo labels

struct PseudoLabelRecord {
  std::string record;
  std::size_t target_index = 0;
  std::string expression;
  std::string generator;

  friend bool operator==(const PseudoLabelRecord&, const PseudoLabelRecord&) = default;
};

inline std::string format_pseudo_labels(const std::vector<PseudoLabelRecord>& labels) {
  std::string out;
  for (const auto& l : labels) {
    out += json{{"record", l.record}, {"target_index", l.target_index}, {"expression", l.expression}, {"generator", l.generator}}
               .dump();
    out += '\n';
  }
  return out;
}

inline std::vector<PseudoLabelRecord> read_pseudo_labels(const fs::path& path) {
  if (!fs::exists(path)) throw IoError(path.string(), "pseudo-label file not found");
  std::vector<PseudoLabelRecord> out;
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      out.push_back({j.at("record").get<std::string>(), j.at("target_index").get<std::size_t>(),
                     j.at("expression").get<std::string>(), j.at("generator").get<std::string>()});
    } catch (const json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline json to_json(const PseudoLabelReport& r) {
  return json{{"generator", r.generator_id},
              {"candidates", r.candidates},
              {"retained", r.retained},
              {"rejected_unparseable", r.rejected_unparseable},
              {"rejected_ambiguous", r.rejected_ambiguous},
              {"retention_rate", fixed4(r.retention_rate())}};
}

struct PseudoLabelResult {
  std::vector<PseudoLabelRecord> labels;
  PseudoLabelReport report;
};

/// Decodes expressions for every object of the train split's detection-only
/// records with the generator checkpoint and keeps the oracle-verified ones.
inline PseudoLabelResult run_pseudo_label(const RunConfig& cfg, const Corpus& corpus, const fs::path& generator_ckpt,
                                          const fs::path& out_dir, bool force) {
  if (!fs::exists(generator_ckpt)) {
    throw StageOrderError("pseudo-labelling needs a trained checkpoint at " + generator_ckpt.string() +
                          "; run `refloc train` first");
  }
  refuse_existing(out_dir / "labels.jsonl", force);
  ensure_dir(out_dir);
  const auto ck = load_checkpoint<float>(generator_ckpt.string());
  const Vocabulary vocab = Vocabulary::standard();
  if (ck.meta.vocab_hash != vocab_hash(vocab)) throw ValidationError("checkpoint vocabulary does not match");
  std::vector<const DatasetRecord*> det;
  for (const auto* r : corpus.data.split("train")) {
    if (r->detection_only) det.push_back(r);
  }
  const auto queries = pseudo_label_queries(vocab, corpus.data, corpus.images, det);
  ModelResponder<float> gen(ck.model, vocab, cfg.beam, cfg.eval.batch);
  PseudoLabelResult res;
  const auto samples = generate_pseudo_labels(gen, vocab, queries, ck.id, res.report);
  for (const auto& s : samples) res.labels.push_back({s.record->id, s.target_index, s.expression, s.generator_id});
  write_file(out_dir / "labels.jsonl", format_pseudo_labels(res.labels));
  write_file(out_dir / "report.json", to_json(res.report).dump(2) + "\n");
  return res;
}

/// Rebuilds REC samples from a label file, re-checking every label against
/// the scene oracle.
inline std::vector<GroundingSample> load_pseudo_samples(const Vocabulary& vocab, const Corpus& corpus,
                                                        const std::vector<PseudoLabelRecord>& labels) {
  std::map<std::string, const DatasetRecord*> by_id;
  for (const auto* r : corpus.data.split("train")) by_id[r->id] = r;
  std::vector<GroundingSample> out;
  for (const auto& l : labels) {
    const auto it = by_id.find(l.record);
    if (it == by_id.end()) throw ValidationError("pseudo label refers to unknown train record '" + l.record + "'");
    const auto m = match_expression(it->second->scene, l.expression);
    if (!m || m->size() != 1 || m->front() != l.target_index) {
      throw ValidationError("pseudo label '" + l.expression + "' for " + l.record + " does not resolve to its object");
    }
    GroundingSample s = rec_sample(vocab, *it->second, corpus.images.of(corpus.data, *it->second), l.expression, l.target_index);
    s.provenance = Provenance::pseudo;
    s.generator_id = l.generator;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cycle

/// Continues from `parent_ckpt` (an activation or cycle checkpoint) on gold
/// REC/REG pairs of the train split plus the given pseudo labels.
namespace detail {

inline StageResult cycle_from(const RunConfig& cfg, const TrainConfig& stage, const char* tag, const Corpus& corpus,
                              const fs::path& parent_ckpt, const std::vector<PseudoLabelRecord>* pseudo,
                              const fs::path& run_dir, bool force, const Progress& progress) {
  if (!fs::exists(parent_ckpt)) {
    throw StageOrderError("cycle training needs a parent checkpoint at " + parent_ckpt.string() +
                          "; run `refloc train` first");
  }
  refuse_existing(run_dir / "model.ckpt", force);
  ensure_dir(run_dir);
  auto parent = load_checkpoint<float>(parent_ckpt.string(), stage.optim);
  const Vocabulary vocab = Vocabulary::standard();
  if (parent.meta.vocab_hash != vocab_hash(vocab)) throw ValidationError("checkpoint vocabulary does not match");
  if (parent.meta.lineage.corpus_hash != corpus.data.manifest.corpus_hash) {
    throw ValidationError("checkpoint was trained on a different corpus");
  }
  const auto train = build_samples(vocab, corpus.data, corpus.images, corpus.data.split("train"));
  std::vector<GroundingSample> pseudo_samples;
  Lineage lineage = parent.meta.lineage;
  lineage.parent = parent.id;
  if (pseudo) {
    pseudo_samples = load_pseudo_samples(vocab, corpus, *pseudo);
    for (const auto& l : *pseudo) {
      if (std::find(lineage.pseudo_generators.begin(), lineage.pseudo_generators.end(), l.generator) ==
          lineage.pseudo_generators.end()) {
        lineage.pseudo_generators.push_back(l.generator);
      }
    }
  }
  // A fresh optimizer: the cycle stage has its own schedule.
  TrainState<float> st(std::move(parent.model), stage.optim);
  st.step = parent.meta.step;
  st.epoch = parent.meta.epoch;
  StageResult res;
  res.log = run_cycle_stage(st, vocab, CycleCorpus{&train.rec, &train.reg, &pseudo_samples}, stage,
                            progress_callback(progress, tag));
  write_log(run_dir / "log.csv", res.log);
  CheckpointMeta meta;
  meta.stage = Stage::cycle;
  meta.step = st.step;
  meta.epoch = st.epoch;
  meta.vocab_hash = vocab_hash(vocab);
  meta.lineage = lineage;
  meta.run_config = to_json(cfg);
  res.checkpoint = run_dir / "model.ckpt";
  res.checkpoint_id = save_checkpoint(res.checkpoint.string(), st.model, &st.opt, meta);
  res.report = evaluate_checkpoint(res.checkpoint, corpus, cfg.eval.split, cfg);
  emit_report(res.report, (run_dir / "val.report").string());
  return res;
}

}  // namespace detail

/// Cycle stage with the `cycle` training config, from an activation (or
/// earlier cycle) checkpoint.
inline StageResult run_cycle(const RunConfig& cfg, const Corpus& corpus, const fs::path& parent_ckpt,
                             const std::vector<PseudoLabelRecord>* pseudo, const fs::path& run_dir, bool force,
                             const Progress& progress = {}) {
  return detail::cycle_from(cfg, cfg.cycle, "cycle", corpus, parent_ckpt, pseudo, run_dir, force, progress);
}

/// Cycle stage with the `augment` training config on gold pairs plus
/// `pseudo`, normally from the gold cycle checkpoint that labelled them.
inline StageResult run_augment(const RunConfig& cfg, const Corpus& corpus, const fs::path& parent_ckpt,
                               const std::vector<PseudoLabelRecord>& pseudo, const fs::path& run_dir, bool force,
                               const Progress& progress = {}) {
  return detail::cycle_from(cfg, cfg.augment, "augment", corpus, parent_ckpt, &pseudo, run_dir, force, progress);
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
  std::string condition;
  std::string corpus_hash;
  std::string checkpoint_id;
  double seconds = 0;  // training time of this row's own stages
  EvalReport val, test;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  PseudoLabelReport pseudo;
  StageResult activation, cycle_gold, cycle_pseudo;
};

inline std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::string out = "condition\tcorpus\tcheckpoint\tval_acc_at_05\ttest_acc_at_05\n";
  for (const auto& r : rows) {
    out += r.condition + "\t" + r.corpus_hash.substr(0, 12) + "\t" + r.checkpoint_id.substr(0, 12) + "\t" +
           fixed4(r.val.acc_at_05) + "\t" + fixed4(r.test.acc_at_05) + "\n";
  }
  return out;
}

/// The three-condition ladder on one corpus: activation only, + cycle on
/// gold pairs, + cycle with pseudo-labelled detection scenes. The two cycle
/// rows start from the same activation checkpoint with the same seeds.
inline AblationResult run_ablation(const RunConfig& cfg, const Corpus& corpus, const fs::path& dir, bool force,
                                   const Progress& progress = {}) {
  AblationResult res;
  auto clock = [t0 = std::chrono::steady_clock::now()]() mutable {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - t0).count();
    t0 = now;
    return s;
  };
  auto row = [&](std::string name, const StageResult& sr, double seconds) {
    AblationRow r;
    r.condition = std::move(name);
    r.corpus_hash = corpus.data.manifest.corpus_hash;
    r.checkpoint_id = sr.checkpoint_id;
    r.seconds = seconds;
    r.val = sr.report;
    r.test = evaluate_checkpoint(sr.checkpoint, corpus, "test", cfg);
    emit_report(r.test, (sr.checkpoint.parent_path() / "test.report").string());
    res.rows.push_back(std::move(r));
  };
  if (progress) progress("ablation: activation");
  res.activation = run_activation(cfg, corpus, dir / "activation", force, progress);
  row("activation", res.activation, clock());
  clock();
  if (progress) progress("ablation: cycle on gold pairs");
  res.cycle_gold = run_cycle(cfg, corpus, res.activation.checkpoint, nullptr, dir / "cycle", force, progress);
  row("+cycle", res.cycle_gold, clock());
  clock();
  if (progress) progress("ablation: pseudo labels from the cycle model, then augmented cycle");
  const auto pl = run_pseudo_label(cfg, corpus, res.cycle_gold.checkpoint, dir / "pseudo", force);
  res.pseudo = pl.report;
  res.cycle_pseudo = run_augment(cfg, corpus, res.cycle_gold.checkpoint, pl.labels, dir / "cycle_pseudo", force, progress);
  row("+pseudo", res.cycle_pseudo, clock());
  write_file(dir / "ablation.tsv", format_ablation_table(res.rows));
  return res;
}

}  // namespace refloc
