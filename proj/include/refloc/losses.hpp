#pragma once

// Training objectives. Graph-level terms build differentiable nodes; the
// *_value helpers evaluate the same formulas on plain matrices.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "refloc/autograd.hpp"
#include "refloc/error.hpp"
#include "refloc/geometry.hpp"
#include "refloc/text.hpp"

namespace refloc {

struct LossWeights {
  double lm = 1.0;
  double itc = 1.0;
  double itg = 1.0;
  double itm = 1.0;
  double cyc = 1.0;

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

inline void validate(const LossWeights& w) {
  for (double v : {w.lm, w.itc, w.itg, w.itm, w.cyc}) {
    if (!(v >= 0) || !std::isfinite(v)) throw ValidationError("loss weights must be finite and >= 0");
  }
}

/// Raw term values; a term that was not computed is nullopt and counts 0.
struct LossTerms {
  std::optional<double> lm, itc, itg, itm;
  std::optional<double> cyc_box, cyc_text;
};

struct LossBreakdown {
  double lm = 0, itc = 0, itg = 0, itm = 0;
  double cyc = 0, cyc_box = 0, cyc_text = 0;
  double total = 0;
  LossWeights weights;
};

/// total = sum of weight * term over present terms, cyc = cyc_box + cyc_text.
inline LossBreakdown full_criterion(const LossTerms& t, const LossWeights& w) {
  validate(w);
  LossBreakdown b;
  b.weights = w;
  b.lm = t.lm.value_or(0);
  b.itc = t.itc.value_or(0);
  b.itg = t.itg.value_or(0);
  b.itm = t.itm.value_or(0);
  b.cyc_box = t.cyc_box.value_or(0);
  b.cyc_text = t.cyc_text.value_or(0);
  b.cyc = b.cyc_box + b.cyc_text;
  b.total = w.lm * b.lm + w.itc * b.itc + w.itg * b.itg + w.itm * b.itm + w.cyc * b.cyc;
  for (double v : {b.lm, b.itc, b.itg, b.itm, b.cyc, b.total}) {
    if (!std::isfinite(v)) throw DivergenceError("non-finite loss term");
  }
  return b;
}

// ---------------------------------------------------------------------------
// Cycle consistency

/// Levenshtein distance with unit costs.
template <class Seq>
std::size_t edit_distance(const Seq& a, const Seq& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<std::size_t> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = j;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

inline constexpr double kUnparseablePenalty = 1000.0;

/// Mean absolute difference of the four quantized coordinates.
inline double box_l1(const QuantizedBox& a, const QuantizedBox& b) {
  return (std::abs(a.x1 - b.x1) + std::abs(a.y1 - b.y1) + std::abs(a.x2 - b.x2) + std::abs(a.y2 - b.y2)) / 4.0;
}

/// Edit distance divided by the longer length (0 for two empty sequences).
inline double normalized_edit_distance(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
  const std::size_t n = std::max(a.size(), b.size());
  if (n == 0) return 0;
  return static_cast<double>(edit_distance(a, b)) / static_cast<double>(n);
}

struct CycleTerms {
  double box_term = 0;
  double text_term = 0;
  bool unparseable = false;
};

/// box_term compares x with its reconstruction F(G(x)); text_term compares
/// y with G(F(y)). A missing reconstruction gets the maximum penalty.
inline CycleTerms cycle_consistency(const QuantizedBox& x, const std::optional<QuantizedBox>& x_rec,
                                    const std::vector<TokenId>& y, const std::vector<TokenId>& y_rec) {
  CycleTerms c;
  if (x_rec) {
    c.box_term = box_l1(x, *x_rec);
  } else {
    c.box_term = kUnparseablePenalty;
    c.unparseable = true;
  }
  c.text_term = normalized_edit_distance(y, y_rec);
  return c;
}

// ---------------------------------------------------------------------------
// Differentiable terms

/// Teacher-forced token cross-entropy averaged over answer positions.
/// `mask` marks the positions that count (question tokens excluded).
template <class T>
nn::Var lm_cross_entropy(nn::Graph<T>& g, nn::Var logits, const std::vector<TokenId>& targets,
                         const std::vector<std::uint8_t>& mask) {
  if (mask.size() != targets.size()) throw std::invalid_argument("lm_cross_entropy: mask size mismatch");
  std::vector<T> w(mask.size());
  bool any = false;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    w[i] = mask[i] ? T(1) : T(0);
    any = any || mask[i];
  }
  if (!any) throw ValidationError("lm_cross_entropy: empty answer mask");
  return g.cross_entropy(logits, targets, std::move(w));
}

/// Same computation over generation targets; kept separate so the
/// alignment term is reported on its own.
template <class T>
nn::Var itg_loss(nn::Graph<T>& g, nn::Var logits, const std::vector<TokenId>& targets,
                 const std::vector<std::uint8_t>& mask) {
  return lm_cross_entropy(g, logits, targets, mask);
}

/// Symmetric in-batch InfoNCE over unit-norm embeddings; `logit_scale` is a
/// 1x1 node holding 1 / temperature.
template <class T>
nn::Var itc_loss(nn::Graph<T>& g, nn::Var image_emb, nn::Var text_emb, nn::Var logit_scale) {
  const auto n = g.value(image_emb).rows();
  if (n == 0) throw ValidationError("itc_loss: empty batch");
  if (g.value(text_emb).rows() != n) throw std::invalid_argument("itc_loss: batch mismatch");
  nn::Var sim = g.mul_scalar(g.matmul_nt(image_emb, text_emb), logit_scale);
  std::vector<std::int32_t> diag(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) diag[i] = static_cast<std::int32_t>(i);
  std::vector<T> ones(diag.size(), T(1));
  nn::Var i2t = g.cross_entropy(sim, diag, ones);
  nn::Var t2i = g.cross_entropy(g.transpose(sim), diag, ones);
  return g.weighted_sum({i2t, t2i}, {T(0.5), T(0.5)});
}

/// Two-way matching cross-entropy; labels are 1 for matched pairs.
template <class T>
nn::Var itm_loss(nn::Graph<T>& g, nn::Var logits, const std::vector<int>& labels) {
  if (g.value(logits).cols() != 2 || static_cast<std::size_t>(g.value(logits).rows()) != labels.size()) {
    throw std::invalid_argument("itm_loss: expected n x 2 logits");
  }
  if (labels.empty()) throw ValidationError("itm_loss: empty batch");
  std::vector<std::int32_t> t(labels.begin(), labels.end());
  for (auto v : t) {
    if (v != 0 && v != 1) throw ValidationError("itm_loss: labels must be 0 or 1");
  }
  return g.cross_entropy(logits, std::move(t), std::vector<T>(labels.size(), T(1)));
}

// ---------------------------------------------------------------------------
// Plain-matrix evaluation

template <class T>
double lm_cross_entropy_value(const nn::Matrix<T>& logits, const std::vector<TokenId>& targets,
                              const std::vector<std::uint8_t>& mask) {
  nn::Graph<T> g(false);
  return static_cast<double>(g.value(lm_cross_entropy(g, g.constant(logits), targets, mask))(0, 0));
}

template <class T>
double itc_loss_value(const nn::Matrix<T>& image_emb, const nn::Matrix<T>& text_emb, double temperature) {
  if (!(temperature > 0)) throw ValidationError("itc_loss: temperature must be positive");
  nn::Graph<T> g(false);
  nn::Matrix<T> s(1, 1);
  s(0, 0) = T(1.0 / temperature);
  return static_cast<double>(g.value(itc_loss(g, g.constant(image_emb), g.constant(text_emb), g.constant(s)))(0, 0));
}

template <class T>
double itm_loss_value(const nn::Matrix<T>& logits, const std::vector<int>& labels) {
  nn::Graph<T> g(false);
  return static_cast<double>(g.value(itm_loss(g, g.constant(logits), labels))(0, 0));
}

}  // namespace refloc
