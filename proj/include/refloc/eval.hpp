#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "refloc/decode.hpp"
#include "refloc/losses.hpp"
#include "refloc/samples.hpp"

namespace refloc {

/// Fraction of predictions with IoU strictly above `threshold`; missing
/// predictions count as IoU 0.
inline double acc_at_iou(const std::vector<std::optional<BBox>>& pred, const std::vector<BBox>& gt,
                         double threshold = 0.5) {
  if (pred.size() != gt.size()) throw ValidationError("acc_at_iou: length mismatch");
  if (gt.empty()) return 0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) hit += pred[i] && iou(*pred[i], gt[i]) > threshold;
  return static_cast<double>(hit) / static_cast<double>(gt.size());
}

// ---------------------------------------------------------------------------
// Responders: anything that answers (image, question) prompts.

struct Query {
  const DatasetRecord* record = nullptr;
  const Image* image = nullptr;
  std::string question;
};

class Responder {
 public:
  virtual ~Responder() = default;
  virtual std::vector<std::string> answer(const std::vector<Query>& queries) = 0;
};

/// Model answers by greedy decoding (beam search when beam_width > 1).
template <class T>
class ModelResponder : public Responder {
 public:
  ModelResponder(const Model<T>& model, const Vocabulary& vocab, BeamConfig beam = {}, int batch = 64)
      : dec_(model), vocab_(vocab), beam_(beam), batch_(batch) {
    validate(beam_);
  }

  std::vector<std::string> answer(const std::vector<Query>& queries) override {
    std::vector<std::string> out;
    for (std::size_t i0 = 0; i0 < queries.size(); i0 += static_cast<std::size_t>(batch_)) {
      const std::size_t i1 = std::min(queries.size(), i0 + static_cast<std::size_t>(batch_));
      std::vector<const Image*> imgs;
      std::vector<std::vector<TokenId>> text;
      for (std::size_t i = i0; i < i1; ++i) {
        imgs.push_back(queries[i].image);
        text.push_back(tokenize(vocab_, queries[i].question).ids);
      }
      const auto caches = dec_.prepare(imgs, text);
      if (beam_.beam_width == 1) {
        for (auto& ids : greedy_decode_batch(dec_, caches, beam_.max_new_tokens, beam_.eos)) {
          out.push_back(detokenize(vocab_, strip_eos(std::move(ids))));
        }
      } else {
        for (const auto& c : caches) {
          ModelScorer<T> scorer(dec_, c);
          const auto hyps = beam_search(scorer, beam_);
          out.push_back(hyps.empty() ? std::string() : detokenize(vocab_, strip_eos(hyps.front().tokens)));
        }
      }
    }
    return out;
  }

 private:
  IncrementalDecoder<T> dec_;
  const Vocabulary& vocab_;
  BeamConfig beam_;
  int batch_;
};

/// Answers from the scene annotation; used to self-test the harness.
class OracleResponder : public Responder {
 public:
  std::vector<std::string> answer(const std::vector<Query>& queries) override {
    std::vector<std::string> out;
    for (const auto& q : queries) out.push_back(answer_one(q));
    return out;
  }

  static std::string answer_one(const Query& q) {
    const Scene& s = q.record->scene;
    if (auto expr = extract_rec_expression(q.question)) {
      const auto m = match_expression(s, *expr);
      if (!m || m->size() != 1) return "";
      return build_rec_pair(*expr, quantize(s.objects[m->front()].box, s.canvas)).answer;
    }
    const auto pb = parse_box(q.question);
    if (!pb) return "";
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      if (quantize(s.objects[i].box, s.canvas) == pb->box) {
        try {
          return build_reg_pair(pb->box, generate_expression(s, i).text).answer;
        } catch (const ExpressionError&) {
          return "";
        }
      }
    }
    return "";
  }
};

// ---------------------------------------------------------------------------
// Per-sample grounding results

struct SampleResult {
  std::string id;
  std::string expression;
  Qualifier qualifier = Qualifier::none;
  std::string answer;
  bool parsed = false;
  bool repaired = false;
  double iou = 0;
};

inline std::vector<SampleResult> grade_rec(Responder& responder, const std::vector<const GroundingSample*>& samples) {
  std::vector<Query> queries;
  for (const auto* s : samples) queries.push_back({s->record, s->image, s->instruction});
  const auto answers = responder.answer(queries);
  std::vector<SampleResult> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = *samples[i];
    SampleResult r;
    r.id = s.record->id + "#" + std::to_string(s.target_index);
    r.expression = s.expression;
    r.qualifier = qualifier_of(s.expression);
    r.answer = answers[i];
    if (auto pb = parse_box(answers[i])) {
      r.parsed = true;
      r.repaired = pb->repaired();
      r.iou = iou(dequantize(pb->box, s.record->scene.canvas), s.record->scene.objects[s.target_index].box);
    }
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cycle round trips

struct TermStats {
  double mean = 0, median = 0, p95 = 0;
  std::size_t n = 0;
};

inline TermStats term_stats(std::vector<double> v) {
  TermStats s;
  s.n = v.size();
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  double sum = 0;
  for (double x : v) sum += x;
  s.mean = sum / double(v.size());
  const std::size_t n = v.size();
  s.median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  // Nearest-rank percentile.
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * double(n)));
  s.p95 = v[std::max<std::size_t>(rank, 1) - 1];
  return s;
}

struct CycleStats {
  TermStats box, text;
  std::size_t box_unparseable = 0;
  std::vector<double> box_terms, text_terms;
};

/// x -> G(x) -> F(G(x)) per sample for the box term and
/// y -> F(y) -> G(F(y)) for the text term. Samples are REC/REG samples
/// with a known expression.
inline CycleStats cycle_round_trip(Responder& responder, const Vocabulary& vocab,
                                   const std::vector<const GroundingSample*>& samples) {
  CycleStats st;
  const std::size_t n = samples.size();
  if (n == 0) return st;
  // Box direction.
  std::vector<Query> q1;
  for (const auto* s : samples) q1.push_back({s->record, s->image, build_reg_pair(*s->box).question});
  const auto reg_answers = responder.answer(q1);
  std::vector<Query> q2;
  std::vector<std::size_t> idx2;
  for (std::size_t i = 0; i < n; ++i) {
    auto expr = extract_reg_expression(reg_answers[i]);
    if (!expr) continue;
    q2.push_back({samples[i]->record, samples[i]->image, build_rec_pair(*expr).question});
    idx2.push_back(i);
  }
  const auto rec_answers = responder.answer(q2);
  std::vector<std::optional<QuantizedBox>> x_rec(n);
  for (std::size_t k = 0; k < idx2.size(); ++k) {
    if (auto pb = parse_box(rec_answers[k])) x_rec[idx2[k]] = pb->box;
  }
  // Text direction.
  std::vector<Query> q3;
  for (const auto* s : samples) q3.push_back({s->record, s->image, build_rec_pair(s->expression).question});
  const auto f_answers = responder.answer(q3);
  std::vector<Query> q4;
  std::vector<std::size_t> idx4;
  for (std::size_t i = 0; i < n; ++i) {
    auto pb = parse_box(f_answers[i]);
    if (!pb) continue;
    q4.push_back({samples[i]->record, samples[i]->image, build_reg_pair(pb->box).question});
    idx4.push_back(i);
  }
  const auto g_answers = responder.answer(q4);
  std::vector<std::vector<TokenId>> y_rec(n);
  for (std::size_t k = 0; k < idx4.size(); ++k) {
    if (auto e = extract_reg_expression(g_answers[k])) y_rec[idx4[k]] = tokenize(vocab, *e).ids;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = cycle_consistency(*samples[i]->box, x_rec[i], tokenize(vocab, samples[i]->expression).ids, y_rec[i]);
    st.box_terms.push_back(c.box_term);
    st.text_terms.push_back(c.text_term);
    st.box_unparseable += c.unparseable;
  }
  st.box = term_stats(st.box_terms);
  st.text = term_stats(st.text_terms);
  return st;
}

// ---------------------------------------------------------------------------
// Report

struct QualifierStats {
  std::size_t n = 0;
  double acc = 0;
  friend bool operator==(const QualifierStats&, const QualifierStats&) = default;
};

struct EvalReport {
  std::string split;
  std::string checkpoint;
  std::string config_fingerprint;
  std::size_t n_samples = 0;
  double acc_at_05 = 0;
  double mean_iou = 0;
  double parse_failure_rate = 0;
  double repair_rate = 0;
  std::size_t cycle_samples = 0;
  double cycle_box_mean = 0;
  double cycle_text_mean = 0;
  std::map<std::string, QualifierStats> per_qualifier;  // every qualifier name

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

inline EvalReport summarize(const std::vector<SampleResult>& results, const std::string& split) {
  EvalReport r;
  r.split = split;
  r.n_samples = results.size();
  for (auto q : kAllQualifiers) r.per_qualifier[std::string(name(q))] = {};
  std::size_t hit = 0, fail = 0, rep = 0;
  double iou_sum = 0;
  std::map<std::string, std::size_t> qhit;
  for (const auto& s : results) {
    const bool ok = s.parsed && s.iou > 0.5;
    hit += ok;
    fail += !s.parsed;
    rep += s.parsed && s.repaired;
    iou_sum += s.iou;
    const std::string q(name(s.qualifier));
    ++r.per_qualifier[q].n;
    qhit[q] += ok;
  }
  const double n = results.empty() ? 1.0 : double(results.size());
  r.acc_at_05 = double(hit) / n;
  r.mean_iou = iou_sum / n;
  r.parse_failure_rate = double(fail) / n;
  r.repair_rate = double(rep) / n;
  for (auto& [q, st] : r.per_qualifier) st.acc = st.n ? double(qhit[q]) / double(st.n) : 0.0;
  return r;
}

inline std::string fixed4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

/// Stable `key: value` text, reals with four decimals.
inline std::string format_report(const EvalReport& r) {
  std::ostringstream o;
  o << "split: " << r.split << "\n";
  o << "checkpoint: " << r.checkpoint << "\n";
  o << "config_fingerprint: " << r.config_fingerprint << "\n";
  o << "n_samples: " << r.n_samples << "\n";
  o << "acc_at_05: " << fixed4(r.acc_at_05) << "\n";
  o << "mean_iou: " << fixed4(r.mean_iou) << "\n";
  o << "parse_failure_rate: " << fixed4(r.parse_failure_rate) << "\n";
  o << "repair_rate: " << fixed4(r.repair_rate) << "\n";
  o << "cycle_samples: " << r.cycle_samples << "\n";
  o << "cycle_box_mean: " << fixed4(r.cycle_box_mean) << "\n";
  o << "cycle_text_mean: " << fixed4(r.cycle_text_mean) << "\n";
  for (auto q : kAllQualifiers) {
    const std::string k(name(q));
    const auto it = r.per_qualifier.find(k);
    const QualifierStats st = it == r.per_qualifier.end() ? QualifierStats{} : it->second;
    o << "qualifier." << k << ".n: " << st.n << "\n";
    o << "qualifier." << k << ".acc: " << fixed4(st.acc) << "\n";
  }
  return o.str();
}

inline EvalReport parse_report(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto p = line.find(": ");
    if (p == std::string::npos) throw ValidationError("report: malformed line '" + line + "'");
    kv[line.substr(0, p)] = line.substr(p + 2);
  }
  auto get = [&](const std::string& k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw ValidationError("report: missing key '" + k + "'");
    return it->second;
  };
  auto num = [&](const std::string& k) {
    try {
      return std::stod(get(k));
    } catch (const std::logic_error&) {
      throw ValidationError("report: bad number for '" + k + "'");
    }
  };
  auto count = [&](const std::string& k) {
    try {
      return static_cast<std::size_t>(std::stoull(get(k)));
    } catch (const std::logic_error&) {
      throw ValidationError("report: bad count for '" + k + "'");
    }
  };
  EvalReport r;
  r.split = get("split");
  r.checkpoint = get("checkpoint");
  r.config_fingerprint = get("config_fingerprint");
  r.n_samples = count("n_samples");
  r.acc_at_05 = num("acc_at_05");
  r.mean_iou = num("mean_iou");
  r.parse_failure_rate = num("parse_failure_rate");
  r.repair_rate = num("repair_rate");
  r.cycle_samples = count("cycle_samples");
  r.cycle_box_mean = num("cycle_box_mean");
  r.cycle_text_mean = num("cycle_text_mean");
  for (auto q : kAllQualifiers) {
    const std::string k(name(q));
    r.per_qualifier[k] = {count("qualifier." + k + ".n"), num("qualifier." + k + ".acc")};
  }
  return r;
}

/// The report as it reads back from its text form.
inline EvalReport rounded(const EvalReport& r) { return parse_report(format_report(r)); }

inline void emit_report(const EvalReport& r, const std::string& path) { write_file(path, format_report(r)); }

inline EvalReport read_report(const std::string& path) { return parse_report(read_file(path)); }

inline std::string csv_field(std::string s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

/// Per-sample CSV: id,expression,qualifier,parsed,repaired,iou,answer.
inline std::string format_sample_csv(const std::vector<SampleResult>& rs) {
  std::string out = "id,expression,qualifier,parsed,repaired,iou,answer\n";
  for (const auto& r : rs) {
    out += csv_field(r.id) + "," + csv_field(r.expression) + "," + std::string(name(r.qualifier)) + "," +
           (r.parsed ? "1" : "0") + "," + (r.repaired ? "1" : "0") + "," + fixed4(r.iou) + "," + csv_field(r.answer) +
           "\n";
  }
  return out;
}

struct EvalOptions {
  std::size_t cycle_samples = 200;  // 0 disables the round-trip metrics
};

/// Grades every sample and runs the round trips on the first
/// `cycle_samples` of them.
inline EvalReport evaluate(Responder& responder, const Vocabulary& vocab, const std::vector<const GroundingSample*>& samples,
                           const std::string& split, const EvalOptions& opt = {},
                           std::vector<SampleResult>* per_sample = nullptr) {
  auto results = grade_rec(responder, samples);
  EvalReport r = summarize(results, split);
  const std::size_t nc = std::min(opt.cycle_samples, samples.size());
  if (nc) {
    std::vector<const GroundingSample*> sub(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(nc));
    const CycleStats cs = cycle_round_trip(responder, vocab, sub);
    r.cycle_samples = nc;
    r.cycle_box_mean = cs.box.mean;
    r.cycle_text_mean = cs.text.mean;
  }
  if (per_sample) *per_sample = std::move(results);
  return r;
}

}  // namespace refloc
