#pragma once

// Forward-only decoding with per-layer key/value caches. Encoders run
// through an unrecorded Graph; the decoder is stepped one token at a time
// with plain matrix code, batched over independent sequences.

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "refloc/autograd.hpp"
#include "refloc/model.hpp"
#include "refloc/text.hpp"

namespace refloc {

/// Cross-attention keys/values of one sample, shared by all its beams.
template <class T>
struct CrossCache {
  std::vector<nn::Matrix<T>> k, v;  // per decoder layer, fused_len x d
  std::vector<std::uint8_t> valid;  // fused_len flags
};

template <class T>
struct DecoderState {
  std::shared_ptr<const CrossCache<T>> cross;
  std::vector<nn::Matrix<T>> k, v;  // per layer self-attention cache, pos x d
  int pos = 0;                      // tokens consumed so far (including <bos>)
  nn::RowVector<T> logits;          // next-token logits after the last input
  std::vector<TokenId> tokens;      // generated tokens (without <bos>)
};

/// Right-pads token sequences to a common length with <pad>.
inline std::vector<TokenId> pad_batch(const std::vector<std::vector<TokenId>>& seqs, int& len) {
  len = 0;
  for (const auto& s : seqs) len = std::max(len, static_cast<int>(s.size()));
  std::vector<TokenId> out(seqs.size() * static_cast<std::size_t>(len), kPad);
  for (std::size_t b = 0; b < seqs.size(); ++b) std::copy(seqs[b].begin(), seqs[b].end(), out.begin() + b * len);
  return out;
}

template <class T>
class IncrementalDecoder {
 public:
  using Mat = nn::Matrix<T>;
  using Row = nn::RowVector<T>;

  explicit IncrementalDecoder(const Model<T>& model) : model_(model) {}

  const Model<T>& model() const { return model_; }

  /// Encodes (image, instruction) pairs and precomputes cross-attention
  /// keys/values for each sample.
  std::vector<std::shared_ptr<const CrossCache<T>>> prepare(std::span<const Image* const> images,
                                                            const std::vector<std::vector<TokenId>>& instructions) const {
    if (images.size() != instructions.size()) throw std::invalid_argument("prepare: batch size mismatch");
    int len = 0;
    const auto ids = pad_batch(instructions, len);
    nn::Graph<T> g(false);
    const Encoded<T> e = model_.encode(g, images, ids, len);
    return prepare_from_fused(g.value(e.fused), e.fused_len, e.fused_valid, e.batch);
  }

  std::vector<std::shared_ptr<const CrossCache<T>>> prepare_from_fused(const Mat& fused, int fused_len,
                                                                       const std::vector<std::uint8_t>& valid,
                                                                       int batch) const {
    std::vector<std::shared_ptr<const CrossCache<T>>> out;
    const auto& blocks = model_.decoder_blocks();
    std::vector<Mat> keys, values;
    for (const auto& blk : blocks) {
      keys.push_back(affine(fused, blk.cross.k));
      values.push_back(affine(fused, blk.cross.v));
    }
    for (int b = 0; b < batch; ++b) {
      auto c = std::make_shared<CrossCache<T>>();
      for (std::size_t l = 0; l < blocks.size(); ++l) {
        c->k.push_back(keys[l].middleRows(Eigen::Index(b) * fused_len, fused_len));
        c->v.push_back(values[l].middleRows(Eigen::Index(b) * fused_len, fused_len));
      }
      c->valid.assign(valid.begin() + std::size_t(b) * fused_len, valid.begin() + std::size_t(b + 1) * fused_len);
      out.push_back(std::move(c));
    }
    return out;
  }

  /// State after consuming <bos>.
  DecoderState<T> start(std::shared_ptr<const CrossCache<T>> cross) const {
    DecoderState<T> s;
    s.cross = std::move(cross);
    s.k.resize(model_.decoder_blocks().size());
    s.v.resize(model_.decoder_blocks().size());
    std::vector<const DecoderState<T>*> in{&s};
    return std::move(step(in, {kBos}, false).front());
  }

  std::vector<DecoderState<T>> start(const std::vector<std::shared_ptr<const CrossCache<T>>>& caches) const {
    std::vector<DecoderState<T>> init(caches.size());
    std::vector<const DecoderState<T>*> in;
    for (std::size_t i = 0; i < caches.size(); ++i) {
      init[i].cross = caches[i];
      init[i].k.resize(model_.decoder_blocks().size());
      init[i].v.resize(model_.decoder_blocks().size());
      in.push_back(&init[i]);
    }
    return step(in, std::vector<TokenId>(caches.size(), kBos), false);
  }

  /// Feeds one token to each state; returns the successor states.
  std::vector<DecoderState<T>> advance(const std::vector<const DecoderState<T>*>& states,
                                       const std::vector<TokenId>& tokens) const {
    return step(states, tokens, true);
  }

  DecoderState<T> advance(const DecoderState<T>& s, TokenId token) const {
    std::vector<const DecoderState<T>*> in{&s};
    return std::move(step(in, {token}, true).front());
  }

 private:
  Mat affine(const Mat& x, nn::LinearIdx l) const {
    Mat y = x * model_.value(l.w);
    y.rowwise() += model_.value(l.b).row(0);
    return y;
  }

  Mat layer_norm(const Mat& x, nn::LnIdx l) const {
    Mat out;
    nn::kernels::layer_norm<T>(x, model_.value(l.gamma), model_.value(l.beta), T(1e-5), out, nullptr, nullptr);
    return out;
  }

  static void attend_row(const Mat& q, Eigen::Index row, const Mat& keys, const Mat& values,
                         const std::uint8_t* valid, int heads, Mat& out) {
    const Eigen::Index d = q.cols(), dh = d / heads, n = keys.rows();
    const T sc = T(1) / std::sqrt(T(dh));
    Eigen::Matrix<T, 1, Eigen::Dynamic> s(n);
    for (int h = 0; h < heads; ++h) {
      s.noalias() = q.row(row).segment(h * dh, dh) * keys.middleCols(h * dh, dh).transpose();
      s *= sc;
      nn::kernels::softmax_rows_masked(s, valid, false, 0);
      out.row(row).segment(h * dh, dh).noalias() = s * values.middleCols(h * dh, dh);
    }
  }

  std::vector<DecoderState<T>> step(const std::vector<const DecoderState<T>*>& states,
                                    const std::vector<TokenId>& tokens, bool record_token) const {
    const auto& cfg = model_.config();
    const Eigen::Index n = static_cast<Eigen::Index>(states.size()), d = cfg.d_model;
    if (tokens.size() != states.size()) throw std::invalid_argument("decoder step: size mismatch");
    std::vector<DecoderState<T>> next;
    next.reserve(states.size());
    Mat x(n, d);
    const Mat& table = model_.value(model_.token_embedding());
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& s = *states[i];
      if (s.pos >= cfg.max_seq_len) throw ValidationError("decoder sequence longer than max_seq_len");
      if (tokens[i] < 0 || tokens[i] >= table.rows()) throw std::out_of_range("decoder step: token id out of range");
      x.row(i) = table.row(tokens[i]) * model_.embed_scale() + nn::kernels::sinusoidal_positions<T>(1, int(d), s.pos).row(0);
      DecoderState<T> ns;
      ns.cross = s.cross;
      ns.k.resize(s.k.size());
      ns.v.resize(s.v.size());
      ns.pos = s.pos + 1;
      ns.tokens = s.tokens;
      if (record_token) ns.tokens.push_back(tokens[i]);
      next.push_back(std::move(ns));
    }
    const auto& blocks = model_.decoder_blocks();
    Mat att(n, d);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const auto& blk = blocks[l];
      Mat h = layer_norm(x, blk.ln1);
      const Mat q = affine(h, blk.self.q), k = affine(h, blk.self.k), v = affine(h, blk.self.v);
      for (Eigen::Index i = 0; i < n; ++i) {
        const Mat& pk = states[i]->k[l];
        const Mat& pv = states[i]->v[l];
        Mat& nk = next[i].k[l];
        Mat& nv = next[i].v[l];
        nk.resize(pk.rows() + 1, d);
        nv.resize(pv.rows() + 1, d);
        if (pk.rows()) {
          nk.topRows(pk.rows()) = pk;
          nv.topRows(pv.rows()) = pv;
        }
        nk.row(pk.rows()) = k.row(i);
        nv.row(pv.rows()) = v.row(i);
        attend_row(q, i, nk, nv, nullptr, cfg.heads, att);
      }
      x += affine(att, blk.self.o);
      h = layer_norm(x, blk.ln2);
      const Mat cq = affine(h, blk.cross.q);
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto& c = *states[i]->cross;
        attend_row(cq, i, c.k[l], c.v[l], c.valid.data(), cfg.heads, att);
      }
      x += affine(att, blk.cross.o);
      h = layer_norm(x, blk.ln3);
      Mat f;
      nn::kernels::gelu_array(affine(h, blk.ff1), f);
      x += affine(f, blk.ff2);
    }
    const Mat y = layer_norm(x, model_.decoder_final_ln());
    Mat logits = y * model_.value(model_.output_weight()).transpose();
    logits.rowwise() += model_.value(model_.output_bias()).row(0);
    for (Eigen::Index i = 0; i < n; ++i) next[i].logits = logits.row(i);
    return next;
  }

  const Model<T>& model_;
};

}  // namespace refloc
