#pragma once

// Training stages: coordinate activation on captions, pseudo-labelling of
// detection-only scenes, and cycle training on REC/REG pairs.

#include <chrono>
#include <cmath>
#include <functional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "refloc/checkpoint.hpp"
#include "refloc/decode.hpp"
#include "refloc/eval.hpp"
#include "refloc/losses.hpp"
#include "refloc/model.hpp"
#include "refloc/optim.hpp"
#include "refloc/samples.hpp"

namespace refloc {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 32;
  OptimConfig optim;
  std::uint64_t seed = 1;
  std::vector<std::string> freeze;  // parameter groups
  LossWeights weights;
  /// Gold REG samples per step, as a fraction of batch_size (cycle stage).
  double reg_fraction = 0.5;
  /// Pseudo REC samples per gold REC sample in a step (cycle stage).
  double pseudo_ratio = 1.0;
  /// Samples per step for the logged round-trip metrics; 0 disables.
  int cycle_metric_batch = 2;
  /// Also train F on reconstructions of G's expressions (cycle stage).
  bool cycle_backprop = false;
  /// Positive/negative pairs per step for the matching head.
  int itm_pairs = 8;
  /// Stop after this many optimizer steps (0 = run all epochs).
  long max_steps = 0;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void validate(const TrainConfig& c) {
  if (c.epochs < 1) throw ValidationError("train: epochs must be >= 1");
  if (c.batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
  if (c.reg_fraction < 0 || c.pseudo_ratio < 0) throw ValidationError("train: mixing ratios must be >= 0");
  if (c.cycle_metric_batch < 0 || c.itm_pairs < 0 || c.max_steps < 0) throw ValidationError("train: counts must be >= 0");
  validate(c.optim);
  validate(c.weights);
}

struct StepRecord {
  long step = 0;
  int epoch = 0;
  double lr = 0;
  double grad_norm = 0;
  LossBreakdown loss;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  double seconds = 0;
};

inline std::string csv_header() { return "step,epoch,lm,itc,itg,itm,cyc_box,cyc_text,total\n"; }

inline std::string csv_row(const StepRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%ld,%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.step, r.epoch, r.loss.lm, r.loss.itc,
                r.loss.itg, r.loss.itm, r.loss.cyc_box, r.loss.cyc_text, r.loss.total);
  return buf;
}

/// Model, optimizer and counters advanced together by the stages.
template <class T>
struct TrainState {
  Model<T> model;
  AdamW<T> opt;
  long step = 0;
  int epoch = 0;

  TrainState(Model<T> m, const OptimConfig& oc) : model(std::move(m)), opt(oc, model.params()) {}
};

inline void apply_freeze(auto& model, const std::vector<std::string>& groups) {
  for (auto& p : model.params()) p.frozen = false;
  for (const auto& g : groups) model.set_frozen(g, true);
}

/// Contents of one optimizer step.
struct StepInputs {
  std::vector<const GroundingSample*> primary;  // captions or REC samples (lm term)
  std::vector<const GroundingSample*> reg;      // REG samples (itg term)
  std::vector<const GroundingSample*> recon;    // REC reconstructions (cycle_backprop)
  std::optional<CycleTerms> cycle;              // logged metric for this step
  std::size_t itm_pairs = 8;
};

/// One forward/backward/update. Terms with zero weight or no samples are not
/// built, so their absence leaves the update bit-identical.
template <class T>
LossBreakdown train_step(TrainState<T>& st, const StepInputs& in, const LossWeights& w, double lr, double* grad_norm) {
  std::vector<const GroundingSample*> all = in.primary;
  const std::size_t n_primary = in.primary.size();
  const bool use_reg = w.itg > 0 && !in.reg.empty();
  const bool use_recon = w.cyc > 0 && !in.recon.empty();
  if (use_reg) all.insert(all.end(), in.reg.begin(), in.reg.end());
  const std::size_t n_reg = use_reg ? in.reg.size() : 0;
  if (use_recon) all.insert(all.end(), in.recon.begin(), in.recon.end());
  if (all.empty()) throw ValidationError("train_step: empty batch");

  const Batch b = make_batch(all, st.model.config().max_seq_len);
  nn::Graph<T> g;
  const Encoded<T> e = st.model.encode(g, b.images, b.text_ids, b.text_len);
  const nn::Var logits = st.model.decode(g, e.fused, e.fused_valid, e.fused_len, b.dec_in, b.size, b.dec_len);

  auto range_mask = [&](std::size_t begin, std::size_t end) {
    std::vector<std::uint8_t> m(b.dec_target.size(), 0);
    for (std::size_t i = begin; i < end; ++i) {
      for (int t = 0; t < b.dec_len; ++t) {
        const std::size_t k = i * std::size_t(b.dec_len) + t;
        m[k] = b.dec_target[k] != kPad;
      }
    }
    return m;
  };

  std::vector<nn::Var> terms;
  std::vector<T> weights;
  LossTerms lt;
  if (w.lm > 0 && n_primary) {
    nn::Var v = lm_cross_entropy(g, logits, b.dec_target, range_mask(0, n_primary));
    terms.push_back(v);
    weights.push_back(T(w.lm));
    lt.lm = double(g.value(v)(0, 0));
  }
  if (use_reg) {
    nn::Var v = itg_loss(g, logits, b.dec_target, range_mask(n_primary, n_primary + n_reg));
    terms.push_back(v);
    weights.push_back(T(w.itg));
    lt.itg = double(g.value(v)(0, 0));
  }
  if (use_recon) {
    nn::Var v = lm_cross_entropy(g, logits, b.dec_target, range_mask(n_primary + n_reg, all.size()));
    terms.push_back(v);
    weights.push_back(T(w.cyc));
  }
  // Alignment terms over the REC pairs at the front of the batch.
  std::size_t n_rec = 0;
  while (n_rec < n_primary && in.primary[n_rec]->task == TaskKind::rec) ++n_rec;
  if (n_rec > 0 && b.text_len > 0 && (w.itc > 0 || w.itm > 0)) {
    const int P = st.model.config().num_patches(), L = b.text_len;
    const int bs = b.size;
    nn::Var vis = g.select_rows(e.visual, bs * P, 0, int(n_rec) * P);
    nn::Var txt = g.select_rows(e.text, bs * L, 0, int(n_rec) * L);
    std::vector<std::uint8_t> tvalid(e.text_valid.begin(), e.text_valid.begin() + std::ptrdiff_t(n_rec) * L);
    if (w.itc > 0) {
      nn::Var ie = st.model.image_embedding(g, vis, int(n_rec));
      nn::Var te = st.model.text_embedding(g, txt, L, tvalid);
      nn::Var v = itc_loss(g, ie, te, st.model.itc_logit_scale(g));
      terms.push_back(v);
      weights.push_back(T(w.itc));
      lt.itc = double(g.value(v)(0, 0));
    }
    if (w.itm > 0 && n_rec >= 2) {
      // Positives: the first k pairs as given. Negatives: image i with the
      // text of the next sample whose instruction differs.
      const std::size_t pairs = std::min(n_rec, in.itm_pairs);
      std::vector<int> neg_rows;
      std::vector<std::uint8_t> neg_valid;
      std::vector<int> img_rows;
      std::vector<std::size_t> pos_idx;
      for (std::size_t i = 0; i < n_rec && pos_idx.size() < pairs; ++i) {
        std::size_t j = (i + 1) % n_rec;
        while (j != i && all[j]->instruction_ids == all[i]->instruction_ids) j = (j + 1) % n_rec;
        if (j == i) continue;
        pos_idx.push_back(i);
        for (int p = 0; p < P; ++p) img_rows.push_back(int(i) * P + p);
        for (int t = 0; t < L; ++t) {
          neg_rows.push_back(int(j) * L + t);
          neg_valid.push_back(e.text_valid[j * std::size_t(L) + t]);
        }
      }
      if (!pos_idx.empty()) {
        const int np = int(pos_idx.size());
        std::vector<int> pos_rows;
        for (std::size_t i : pos_idx) {
          for (int r = 0; r < e.fused_len; ++r) pos_rows.push_back(int(i) * e.fused_len + r);
        }
        std::vector<std::uint8_t> pos_valid;
        for (std::size_t i : pos_idx) {
          pos_valid.insert(pos_valid.end(), e.fused_valid.begin() + std::ptrdiff_t(i) * e.fused_len,
                           e.fused_valid.begin() + std::ptrdiff_t(i + 1) * e.fused_len);
        }
        std::vector<std::uint8_t> fv_neg;
        nn::Var fused_neg = st.model.fuse(g, g.gather_rows(e.visual, img_rows), g.gather_rows(e.text, neg_rows), np, L,
                                          neg_valid, fv_neg);
        nn::Var pos_logits = st.model.itm_logits(g, g.gather_rows(e.fused, pos_rows), e.fused_len, pos_valid);
        nn::Var neg_logits = st.model.itm_logits(g, fused_neg, e.fused_len, fv_neg);
        nn::Var both = g.interleave({pos_logits, neg_logits}, 1);
        std::vector<int> labels(std::size_t(np), 1);
        labels.resize(std::size_t(2 * np), 0);
        nn::Var v = itm_loss(g, both, labels);
        terms.push_back(v);
        weights.push_back(T(w.itm));
        lt.itm = double(g.value(v)(0, 0));
      }
    }
  }
  if (in.cycle) {
    lt.cyc_box = in.cycle->box_term;
    lt.cyc_text = in.cycle->text_term;
  }
  const LossBreakdown out = full_criterion(lt, w);
  if (terms.empty()) {
    if (grad_norm) *grad_norm = 0;
    return out;
  }
  const nn::Var total = terms.size() == 1 ? terms.front() : g.weighted_sum(terms, weights);
  if (!std::isfinite(double(g.value(total)(0, 0)))) {
    throw DivergenceError("non-finite loss at step " + std::to_string(st.step) + "; try a lower learning rate");
  }
  g.backward(total);
  st.model.zero_grad();
  st.model.accumulate_grads(g);
  const double gn = st.opt.step(st.model.params(), lr);
  if (grad_norm) *grad_norm = gn;
  return out;
}

/// Deterministic epoch order.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
  rng.shuffle(idx);
  return idx;
}

using StepCallback = std::function<void(const StepRecord&)>;

inline long steps_per_epoch(std::size_t n, int per_step) {
  return per_step > 0 ? static_cast<long>((n + std::size_t(per_step) - 1) / std::size_t(per_step)) : 0;
}

/// Coordinate activation: LM loss over caption tokens.
template <class T>
TrainLog run_activation_stage(TrainState<T>& st, const std::vector<GroundingSample>& captions, const TrainConfig& cfg,
                              const StepCallback& on_step = {}) {
  validate(cfg);
  if (captions.empty()) throw ValidationError("activation stage: empty caption corpus");
  apply_freeze(st.model, cfg.freeze);
  const auto t0 = std::chrono::steady_clock::now();
  TrainLog log;
  const long per_epoch = steps_per_epoch(captions.size(), cfg.batch_size);
  long total = per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total = std::min(total, cfg.max_steps);
  LossWeights w;
  w.lm = cfg.weights.lm;
  w.itc = w.itg = w.itm = w.cyc = 0;
  long local = 0;
  for (int ep = 0; ep < cfg.epochs && local < total; ++ep) {
    const auto order = epoch_order(captions.size(), cfg.seed, ep);
    for (std::size_t i0 = 0; i0 < order.size() && local < total; i0 += std::size_t(cfg.batch_size)) {
      StepInputs in;
      for (std::size_t i = i0; i < std::min(order.size(), i0 + std::size_t(cfg.batch_size)); ++i) {
        in.primary.push_back(&captions[order[i]]);
      }
      StepRecord rec;
      rec.step = st.step;
      rec.epoch = st.epoch;
      rec.lr = cosine_lr(cfg.optim.lr, local, total, cfg.optim.warmup_steps);
      rec.loss = train_step(st, in, w, rec.lr, &rec.grad_norm);
      log.steps.push_back(rec);
      if (on_step) on_step(rec);
      ++st.step;
      ++local;
    }
    ++st.epoch;
  }
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return log;
}

// ---------------------------------------------------------------------------
// Pseudo labels

struct PseudoLabelReport {
  std::string generator_id;
  std::size_t candidates = 0;
  std::size_t retained = 0;
  std::size_t rejected_unparseable = 0;  // no expression in the answer or outside the grammar
  std::size_t rejected_ambiguous = 0;    // matches no object, several, or the wrong one
  double retention_rate() const { return candidates ? double(retained) / double(candidates) : 0.0; }
};

/// Decodes G(x) for every object of the detection-only records and keeps
/// the expressions that the scene oracle resolves to exactly the source
/// object. Retained labels become REC samples tagged with `generator_id`.
inline std::vector<GroundingSample> select_pseudo_labels(const Vocabulary& vocab, const std::vector<GroundingSample>& queries,
                                                         const std::vector<std::string>& answers,
                                                         const std::string& generator_id, PseudoLabelReport& report) {
  std::vector<GroundingSample> out;
  report.generator_id = generator_id;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    ++report.candidates;
    const auto& q = queries[i];
    const auto expr = extract_reg_expression(answers[i]);
    const auto m = expr ? match_expression(q.record->scene, *expr) : std::nullopt;
    if (!m) {
      ++report.rejected_unparseable;
      continue;
    }
    if (m->size() != 1 || m->front() != q.target_index) {
      ++report.rejected_ambiguous;
      continue;
    }
    GroundingSample s = rec_sample(vocab, *q.record, *q.image, normalize_text(vocab, *expr), q.target_index);
    s.provenance = Provenance::pseudo;
    s.generator_id = generator_id;
    out.push_back(std::move(s));
    ++report.retained;
  }
  return out;
}

inline std::vector<GroundingSample> pseudo_label_queries(const Vocabulary& vocab, const Dataset& d, const ImageStore& images,
                                                         const std::vector<const DatasetRecord*>& records) {
  std::vector<GroundingSample> q;
  for (const auto* r : records) {
    for (std::size_t t = 0; t < r->scene.objects.size(); ++t) q.push_back(reg_query(vocab, *r, images.of(d, *r), t));
  }
  return q;
}

inline std::vector<GroundingSample> generate_pseudo_labels(Responder& generator, const Vocabulary& vocab,
                                                           const std::vector<GroundingSample>& queries,
                                                           const std::string& generator_id, PseudoLabelReport& report) {
  std::vector<Query> qs;
  for (const auto& s : queries) qs.push_back({s.record, s.image, s.instruction});
  return select_pseudo_labels(vocab, queries, generator.answer(qs), generator_id, report);
}

// ---------------------------------------------------------------------------
// Cycle stage

/// Greedy round trip of one step's metric minibatch; with `recon_out`, also
/// returns REC samples that ask F to recover x from G's expression.
template <class T>
CycleTerms step_cycle_metric(const Model<T>& model, const Vocabulary& vocab, const std::vector<const GroundingSample*>& batch,
                             std::vector<GroundingSample>* recon_out) {
  ModelResponder<T> responder(model, vocab, BeamConfig{1, 24, 0.0, kEos}, 64);
  CycleStats cs = cycle_round_trip(responder, vocab, batch);
  if (recon_out) {
    std::vector<Query> qs;
    for (const auto* s : batch) qs.push_back({s->record, s->image, build_reg_pair(*s->box).question});
    const auto answers = responder.answer(qs);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto expr = extract_reg_expression(answers[i]);
      if (!expr) continue;
      const auto ids = tokenize(vocab, *expr);
      if (ids.unknown || ids.ids.empty()) continue;
      GroundingSample r = rec_sample(vocab, *batch[i]->record, *batch[i]->image, detokenize(vocab, ids.ids), batch[i]->target_index);
      recon_out->push_back(std::move(r));
    }
  }
  CycleTerms t;
  t.box_term = cs.box.mean;
  t.text_term = cs.text.mean;
  t.unparseable = cs.box_unparseable > 0;
  return t;
}

struct CycleCorpus {
  const std::vector<GroundingSample>* gold_rec = nullptr;
  const std::vector<GroundingSample>* gold_reg = nullptr;
  const std::vector<GroundingSample>* pseudo_rec = nullptr;  // may be null or empty
};

/// Each step mixes gold REC, pseudo REC (pseudo_ratio per gold sample) and
/// gold REG samples; an epoch is one pass over the gold REC samples.
template <class T>
TrainLog run_cycle_stage(TrainState<T>& st, const Vocabulary& vocab, const CycleCorpus& corpus, const TrainConfig& cfg,
                         const StepCallback& on_step = {}) {
  validate(cfg);
  if (!corpus.gold_rec || corpus.gold_rec->empty()) throw ValidationError("cycle stage: empty gold REC corpus");
  apply_freeze(st.model, cfg.freeze);
  const auto& gold = *corpus.gold_rec;
  static const std::vector<GroundingSample> kNone;
  const auto& reg = corpus.gold_reg ? *corpus.gold_reg : kNone;
  const auto& pseudo = corpus.pseudo_rec ? *corpus.pseudo_rec : kNone;

  int n_pseudo_step = 0, n_gold_step = cfg.batch_size;
  if (!pseudo.empty() && cfg.pseudo_ratio > 0) {
    n_gold_step = std::max(1, int(std::lround(cfg.batch_size / (1.0 + cfg.pseudo_ratio))));
    n_pseudo_step = cfg.batch_size - n_gold_step;
  }
  const int n_reg_step = reg.empty() ? 0 : int(std::lround(cfg.batch_size * cfg.reg_fraction));

  const auto t0 = std::chrono::steady_clock::now();
  TrainLog log;
  const long per_epoch = steps_per_epoch(gold.size(), n_gold_step);
  long total = per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total = std::min(total, cfg.max_steps);
  // Independent streams so metric sampling never perturbs batch order.
  Rng pseudo_rng(mix_seed(cfg.seed, 0x9e3779b97f4a7c15ULL));
  Rng reg_rng(mix_seed(cfg.seed, 0x243f6a8885a308d3ULL));
  Rng metric_rng(mix_seed(cfg.seed, 0x13198a2e03707344ULL));
  long local = 0;
  for (int ep = 0; ep < cfg.epochs && local < total; ++ep) {
    const auto order = epoch_order(gold.size(), cfg.seed, ep);
    for (std::size_t i0 = 0; i0 < order.size() && local < total; i0 += std::size_t(n_gold_step)) {
      StepInputs in;
      for (std::size_t i = i0; i < std::min(order.size(), i0 + std::size_t(n_gold_step)); ++i) in.primary.push_back(&gold[order[i]]);
      for (int k = 0; k < n_pseudo_step; ++k) in.primary.push_back(&pseudo[pseudo_rng.uniform_int(0, pseudo.size() - 1)]);
      for (int k = 0; k < n_reg_step; ++k) in.reg.push_back(&reg[reg_rng.uniform_int(0, reg.size() - 1)]);
      in.itm_pairs = static_cast<std::size_t>(cfg.itm_pairs);
      std::vector<GroundingSample> recon;
      if (cfg.cycle_metric_batch > 0) {
        std::vector<const GroundingSample*> mb;
        for (int k = 0; k < cfg.cycle_metric_batch; ++k) mb.push_back(&gold[metric_rng.uniform_int(0, gold.size() - 1)]);
        in.cycle = step_cycle_metric(st.model, vocab, mb, cfg.cycle_backprop ? &recon : nullptr);
        for (const auto& r : recon) in.recon.push_back(&r);
      }
      StepRecord rec;
      rec.step = st.step;
      rec.epoch = st.epoch;
      rec.lr = cosine_lr(cfg.optim.lr, local, total, cfg.optim.warmup_steps);
      rec.loss = train_step(st, in, cfg.weights, rec.lr, &rec.grad_norm);
      log.steps.push_back(rec);
      if (on_step) on_step(rec);
      ++st.step;
      ++local;
    }
    ++st.epoch;
  }
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return log;
}

}  // namespace refloc
