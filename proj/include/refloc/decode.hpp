#pragma once

// Greedy and beam-search decoding over any next-token scorer.
//
// A Scorer exposes
//   using State = ...;
//   State start();
//   logits(const State&)            -> indexable row of vocabulary logits
//   advance(vector<const State*>, vector<TokenId>) -> vector<State>
// Sequence length counts generated tokens including a terminating EOS.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <optional>
#include <tuple>
#include <vector>

#include "refloc/error.hpp"
#include "refloc/inference.hpp"
#include "refloc/text.hpp"

namespace refloc {

template <class S>
concept Scorer = requires(S s, const typename S::State& st, std::vector<const typename S::State*> in,
                          std::vector<TokenId> tok) {
  { s.start() } -> std::same_as<typename S::State>;
  { s.logits(st).size() } -> std::convertible_to<std::size_t>;
  { s.logits(st)[0] } -> std::convertible_to<double>;
  { s.advance(in, tok) } -> std::same_as<std::vector<typename S::State>>;
};

struct BeamConfig {
  int beam_width = 4;
  int max_new_tokens = 24;
  double length_penalty = 0.0;
  std::optional<TokenId> eos = kEos;

  friend bool operator==(const BeamConfig&, const BeamConfig&) = default;
};

inline void validate(const BeamConfig& c) {
  if (c.beam_width < 1) throw ValidationError("beam_width must be >= 1");
  if (c.max_new_tokens < 1) throw ValidationError("max_new_tokens must be >= 1");
  if (!(c.length_penalty >= 0)) throw ValidationError("length_penalty must be >= 0");
}

struct Hypothesis {
  std::vector<TokenId> tokens;  // includes the EOS if one was emitted
  double log_prob = 0;
  double score = 0;
};

inline double length_normalized(double log_prob, std::size_t len, double alpha) {
  if (alpha == 0 || len == 0) return log_prob;
  return log_prob / std::pow(static_cast<double>(len), alpha);
}

/// Descending score; ties broken by token sequence for a total order.
inline bool ranks_before(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

template <class Row>
std::vector<double> log_softmax(const Row& logits) {
  const std::size_t n = static_cast<std::size_t>(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, static_cast<double>(logits[i]));
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(static_cast<double>(logits[i]) - mx);
  const double lse = mx + std::log(s);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<double>(logits[i]) - lse;
  return out;
}

template <class Row>
TokenId argmax(const Row& logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < static_cast<std::size_t>(logits.size()); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

/// Argmax token per step until EOS (kept in the output) or the limit.
template <Scorer S>
std::vector<TokenId> greedy_decode(S& scorer, int max_new_tokens, std::optional<TokenId> eos = kEos) {
  std::vector<TokenId> out;
  auto state = scorer.start();
  for (int t = 0; t < max_new_tokens; ++t) {
    const TokenId tok = argmax(scorer.logits(state));
    out.push_back(tok);
    if (eos && tok == *eos) break;
    if (t + 1 == max_new_tokens) break;
    std::vector<const typename S::State*> in{&state};
    state = std::move(scorer.advance(in, {tok}).front());
  }
  return out;
}

/// Beam search. Each step keeps the `beam_width` best continuations over
/// all live beams by cumulative log-probability; continuations ending in EOS
/// retire as finished hypotheses. Returns up to `beam_width` hypotheses
/// sorted by logP / len^alpha.
template <Scorer S>
std::vector<Hypothesis> beam_search(S& scorer, const BeamConfig& cfg) {
  validate(cfg);
  using State = typename S::State;
  struct Beam {
    State state;
    Hypothesis hyp;
  };
  std::vector<Beam> live;
  live.push_back({scorer.start(), {}});
  std::vector<Hypothesis> finished;
  const auto width = static_cast<std::size_t>(cfg.beam_width);

  for (int t = 0; t < cfg.max_new_tokens && !live.empty(); ++t) {
    struct Cand {
      double log_prob;
      std::size_t beam;
      TokenId token;
    };
    std::vector<Cand> cands;
    for (std::size_t b = 0; b < live.size(); ++b) {
      const auto lp = log_softmax(scorer.logits(live[b].state));
      for (std::size_t v = 0; v < lp.size(); ++v) {
        cands.push_back({live[b].hyp.log_prob + lp[v], b, static_cast<TokenId>(v)});
      }
    }
    const std::size_t keep = std::min(width, cands.size());
    auto better = [&](const Cand& a, const Cand& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      // Equal scores: compare the resulting sequences.
      const auto& ta = live[a.beam].hyp.tokens;
      const auto& tb = live[b.beam].hyp.tokens;
      if (ta != tb) return ta < tb;
      return a.token < b.token;
    };
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(), better);
    cands.resize(keep);

    const bool last = t + 1 == cfg.max_new_tokens;
    std::vector<const State*> in;
    std::vector<TokenId> toks;
    std::vector<Hypothesis> next_hyp;
    for (const auto& c : cands) {
      Hypothesis h = live[c.beam].hyp;
      h.tokens.push_back(c.token);
      h.log_prob = c.log_prob;
      if ((cfg.eos && c.token == *cfg.eos) || last) {
        h.score = length_normalized(h.log_prob, h.tokens.size(), cfg.length_penalty);
        finished.push_back(std::move(h));
      } else {
        in.push_back(&live[c.beam].state);
        toks.push_back(c.token);
        next_hyp.push_back(std::move(h));
      }
    }
    std::vector<Beam> next;
    if (!in.empty()) {
      auto states = scorer.advance(in, toks);
      for (std::size_t i = 0; i < states.size(); ++i) next.push_back({std::move(states[i]), std::move(next_hyp[i])});
    }
    live = std::move(next);

    // Without a length penalty, extending a live beam never raises its
    // score, so stop once the finished set cannot be displaced.
    if (cfg.length_penalty == 0 && finished.size() >= width && !live.empty()) {
      std::sort(finished.begin(), finished.end(), ranks_before);
      double best_live = -std::numeric_limits<double>::infinity();
      for (const auto& b : live) best_live = std::max(best_live, b.hyp.log_prob);
      if (finished[width - 1].score > best_live) live.clear();
    }
  }
  std::sort(finished.begin(), finished.end(), ranks_before);
  if (finished.size() > width) finished.resize(width);
  return finished;
}

/// Scorer over one sample's encoded features.
template <class T>
class ModelScorer {
 public:
  using State = DecoderState<T>;

  ModelScorer(const IncrementalDecoder<T>& dec, std::shared_ptr<const CrossCache<T>> cross)
      : dec_(dec), cross_(std::move(cross)) {}

  State start() { return dec_.start(cross_); }
  const nn::RowVector<T>& logits(const State& s) const { return s.logits; }
  std::vector<State> advance(const std::vector<const State*>& in, const std::vector<TokenId>& tok) {
    return dec_.advance(in, tok);
  }

 private:
  const IncrementalDecoder<T>& dec_;
  std::shared_ptr<const CrossCache<T>> cross_;
};

/// Greedy decoding of many samples at once; equivalent to greedy_decode
/// on each sample's ModelScorer.
template <class T>
std::vector<std::vector<TokenId>> greedy_decode_batch(const IncrementalDecoder<T>& dec,
                                                      const std::vector<std::shared_ptr<const CrossCache<T>>>& caches,
                                                      int max_new_tokens, std::optional<TokenId> eos = kEos) {
  std::vector<std::vector<TokenId>> out(caches.size());
  if (caches.empty()) return out;
  auto states = dec.start(caches);
  std::vector<std::size_t> active(caches.size());
  for (std::size_t i = 0; i < active.size(); ++i) active[i] = i;
  for (int t = 0; t < max_new_tokens && !active.empty(); ++t) {
    std::vector<const DecoderState<T>*> in;
    std::vector<TokenId> toks;
    std::vector<std::size_t> still;
    for (std::size_t i : active) {
      const TokenId tok = argmax(states[i].logits);
      out[i].push_back(tok);
      if ((eos && tok == *eos) || t + 1 == max_new_tokens) continue;
      in.push_back(&states[i]);
      toks.push_back(tok);
      still.push_back(i);
    }
    if (in.empty()) break;
    auto next = dec.advance(in, toks);
    for (std::size_t j = 0; j < still.size(); ++j) states[still[j]] = std::move(next[j]);
    active = std::move(still);
  }
  return out;
}

/// Drops everything from the first EOS on.
inline std::vector<TokenId> strip_eos(std::vector<TokenId> ids, TokenId eos = kEos) {
  auto it = std::find(ids.begin(), ids.end(), eos);
  ids.erase(it, ids.end());
  return ids;
}

}  // namespace refloc
