#pragma once

// Multimodal encoder-decoder: patch image encoder with a two-layer
// projection, a text encoder, a fusion encoder over
// [queries ; visual tokens ; text tokens], and an autoregressive decoder that
// cross-attends to the fused features.

#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "refloc/autograd.hpp"
#include "refloc/error.hpp"
#include "refloc/image.hpp"
#include "refloc/rng.hpp"
#include "refloc/text.hpp"

namespace refloc {

struct ModelConfig {
  int d_model = 128;
  int heads = 4;
  int patch = 8;
  int image_height = 64;
  int image_width = 64;
  int text_layers = 1;
  int enc_layers = 2;
  int dec_layers = 2;
  int num_queries = 10;
  int ffn_mult = 4;
  int vocab_size = 0;
  int max_seq_len = 128;
  int max_text_len = 48;
  bool tie_output = false;
  double init_std = 0.02;
  std::uint64_t init_seed = 1;

  int grid_h() const { return image_height / patch; }
  int grid_w() const { return image_width / patch; }
  int num_patches() const { return grid_h() * grid_w(); }
  int patch_dim() const { return patch * patch * 3; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate(const ModelConfig& c) {
  auto fail = [](const std::string& m) { throw ValidationError("model config: " + m); };
  if (c.d_model <= 0 || c.heads <= 0 || c.d_model % c.heads != 0) fail("d_model must be divisible by heads");
  if (c.d_model % 2 != 0) fail("d_model must be even");
  if (c.patch <= 0 || c.image_height % c.patch != 0 || c.image_width % c.patch != 0) {
    fail("patch must divide image height and width");
  }
  if (c.num_queries < 0) fail("num_queries must be >= 0");
  if (c.text_layers < 0 || c.enc_layers < 0 || c.dec_layers < 1) fail("invalid layer counts");
  if (c.vocab_size < 5) fail("vocab_size too small");
  if (c.max_seq_len < 2 || c.max_text_len < 1) fail("sequence limits too small");
  if (c.ffn_mult < 1) fail("ffn_mult must be >= 1");
  if (!(c.init_std > 0)) fail("init_std must be positive");
}

namespace nn {

struct LnIdx { int gamma = -1, beta = -1; };
struct LinearIdx { int w = -1, b = -1; };
struct AttnIdx { LinearIdx q, k, v, o; };
struct EncoderBlockIdx { LnIdx ln1; AttnIdx attn; LnIdx ln2; LinearIdx ff1, ff2; };
struct DecoderBlockIdx { LnIdx ln1; AttnIdx self; LnIdx ln2; AttnIdx cross; LnIdx ln3; LinearIdx ff1, ff2; };

}  // namespace nn

/// Names of the parameter groups; any subset may be frozen.
inline const std::vector<std::string>& parameter_groups() {
  static const std::vector<std::string> g{"image_proj", "image_pos", "embedding", "text_encoder",
                                          "queries", "fusion", "decoder", "output", "itc", "itm"};
  return g;
}

/// Encoder outputs for a batch of (image, instruction) pairs.
template <class T>
struct Encoded {
  int batch = 0;
  nn::Var visual;  // batch * num_patches rows
  nn::Var text;    // batch * text_len rows
  int text_len = 0;
  std::vector<std::uint8_t> text_valid;
  nn::Var fused;   // batch * fused_len rows
  int fused_len = 0;
  std::vector<std::uint8_t> fused_valid;
};

template <class T>
class Model {
 public:
  using Mat = nn::Matrix<T>;
  using Var = nn::Var;

  explicit Model(const ModelConfig& config) : config_(config) {
    validate(config_);
    build();
  }

  const ModelConfig& config() const { return config_; }
  std::vector<nn::Parameter<T>>& params() { return params_; }
  const std::vector<nn::Parameter<T>>& params() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  std::size_t index_of(const nn::Parameter<T>* p) const {
    return static_cast<std::size_t>(p - params_.data());
  }

  void set_frozen(std::string_view group, bool frozen) {
    bool found = false;
    for (auto& p : params_) {
      if (p.group == group) {
        p.frozen = frozen;
        found = true;
      }
    }
    if (!found) throw ValidationError("unknown parameter group '" + std::string(group) + "'");
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero(p.value.rows(), p.value.cols());
  }

  /// Adds the gradients recorded in `g` into Parameter::grad.
  void accumulate_grads(const nn::Graph<T>& g) {
    for (auto [p, grad] : g.parameter_grads()) params_[index_of(p)].grad += *grad;
  }

  /// Flattens images into patch rows (values shifted to [-0.5, 0.5]).
  Mat patchify(std::span<const Image* const> images) const {
    const int P = config_.num_patches(), ps = config_.patch, gw = config_.grid_w();
    Mat out(static_cast<Eigen::Index>(images.size()) * P, config_.patch_dim());
    for (std::size_t b = 0; b < images.size(); ++b) {
      const Image& img = *images[b];
      if (img.height != config_.image_height || img.width != config_.image_width) {
        throw ValidationError("image shape " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                              " does not match model input");
      }
      for (int p = 0; p < P; ++p) {
        const int py = p / gw, px = p % gw;
        const Eigen::Index row = static_cast<Eigen::Index>(b) * P + p;
        int col = 0;
        for (int dy = 0; dy < ps; ++dy) {
          for (int dx = 0; dx < ps; ++dx) {
            for (int c = 0; c < 3; ++c) out(row, col++) = T(img.at(py * ps + dy, px * ps + dx, c)) - T(0.5);
          }
        }
      }
    }
    return out;
  }

  /// Visual features: P_img applied to patch rows, plus 2-D positions.
  Var encode_image(nn::Graph<T>& g, std::span<const Image* const> images) const {
    Var x = g.constant(patchify(images));
    x = g.gelu(linear(g, x, img_proj1_));
    x = linear(g, x, img_proj2_);
    const int P = config_.num_patches(), gw = config_.grid_w();
    std::vector<int> rows(P), cols(P);
    for (int p = 0; p < P; ++p) {
      rows[p] = p / gw;
      cols[p] = p % gw;
    }
    Var pos = g.add(g.gather_rows(g.param(params_[pos_row_]), rows), g.gather_rows(g.param(params_[pos_col_]), cols));
    return g.add_tiled(x, pos);
  }

  /// Text features for `batch` right-padded sequences of `len` ids each.
  Var encode_text(nn::Graph<T>& g, const std::vector<TokenId>& ids, int batch, int len,
                  std::vector<std::uint8_t>& valid) const {
    if (len > config_.max_text_len) throw ValidationError("instruction longer than max_text_len");
    if (ids.size() != static_cast<std::size_t>(batch) * len) throw std::invalid_argument("encode_text: id count mismatch");
    valid.assign(ids.size(), 0);
    for (std::size_t i = 0; i < ids.size(); ++i) valid[i] = ids[i] != kPad;
    if (len == 0) return g.constant(Mat(0, config_.d_model));
    Var x = g.embedding(g.param(params_[tok_embed_]), ids, embed_scale());
    x = g.add_tiled(x, g.constant(nn::kernels::sinusoidal_positions<T>(len, config_.d_model)));
    nn::AttentionLayout layout{batch, len, len, config_.heads, false, valid};
    for (const auto& blk : text_blocks_) x = encoder_block(g, x, blk, layout);
    return layer_norm(g, x, text_ln_);
  }

  /// Fusion encoder over per-sample [queries ; visual ; text].
  Var fuse(nn::Graph<T>& g, Var visual, Var text, int batch, int text_len,
           const std::vector<std::uint8_t>& text_valid, std::vector<std::uint8_t>& fused_valid) const {
    const int nq = config_.num_queries, P = config_.num_patches();
    const int L = nq + P + text_len;
    if (g.value(visual).cols() != config_.d_model || (text_len > 0 && g.value(text).cols() != config_.d_model)) {
      throw ValidationError("fuse: feature dimension mismatch");
    }
    std::vector<Var> parts;
    if (nq > 0) parts.push_back(g.tile(g.param(params_[queries_]), batch));
    parts.push_back(visual);
    if (text_len > 0) parts.push_back(text);
    Var x = g.interleave(parts, batch);
    fused_valid.assign(static_cast<std::size_t>(batch) * L, 1);
    for (int b = 0; b < batch; ++b) {
      for (int t = 0; t < text_len; ++t) fused_valid[std::size_t(b) * L + nq + P + t] = text_valid[std::size_t(b) * text_len + t];
    }
    nn::AttentionLayout layout{batch, L, L, config_.heads, false, fused_valid};
    for (const auto& blk : fusion_blocks_) x = encoder_block(g, x, blk, layout);
    return layer_norm(g, x, fusion_ln_);
  }

  Encoded<T> encode(nn::Graph<T>& g, std::span<const Image* const> images, const std::vector<TokenId>& text_ids,
                    int text_len) const {
    Encoded<T> e;
    e.batch = static_cast<int>(images.size());
    e.visual = encode_image(g, images);
    e.text_len = text_len;
    e.text = encode_text(g, text_ids, e.batch, text_len, e.text_valid);
    e.fused = fuse(g, e.visual, e.text, e.batch, text_len, e.text_valid, e.fused_valid);
    e.fused_len = config_.num_queries + config_.num_patches() + text_len;
    return e;
  }

  /// Teacher-forced decoder logits (batch * dec_len rows x vocab).
  Var decode(nn::Graph<T>& g, Var fused, const std::vector<std::uint8_t>& fused_valid, int fused_len,
             const std::vector<TokenId>& dec_in, int batch, int dec_len) const {
    if (dec_len > config_.max_seq_len) throw ValidationError("decoder sequence longer than max_seq_len");
    Var y = g.embedding(g.param(params_[tok_embed_]), dec_in, embed_scale());
    y = g.add_tiled(y, g.constant(nn::kernels::sinusoidal_positions<T>(dec_len, config_.d_model)));
    nn::AttentionLayout self_layout{batch, dec_len, dec_len, config_.heads, true, {}};
    nn::AttentionLayout cross_layout{batch, dec_len, fused_len, config_.heads, false, fused_valid};
    for (const auto& blk : dec_blocks_) {
      Var h = layer_norm(g, y, blk.ln1);
      y = g.add(y, attention(g, h, h, blk.self, self_layout));
      h = layer_norm(g, y, blk.ln2);
      y = g.add(y, attention(g, h, fused, blk.cross, cross_layout));
      h = layer_norm(g, y, blk.ln3);
      y = g.add(y, linear(g, g.gelu(linear(g, h, blk.ff1)), blk.ff2));
    }
    y = layer_norm(g, y, dec_ln_);
    Var logits = g.matmul_nt(y, g.param(params_[output_weight()]));
    return g.add_tiled(logits, g.param(params_[out_b_]));
  }

  /// Unimodal embeddings for contrastive alignment (unit rows).
  Var image_embedding(nn::Graph<T>& g, Var visual, int batch) const {
    (void)batch;
    Var pooled = g.masked_mean(visual, config_.num_patches(), {});
    return g.l2_normalize_rows(linear(g, pooled, itc_img_));
  }

  Var text_embedding(nn::Graph<T>& g, Var text, int text_len, const std::vector<std::uint8_t>& valid) const {
    Var pooled = g.masked_mean(text, text_len, valid);
    return g.l2_normalize_rows(linear(g, pooled, itc_txt_));
  }

  /// Learnable inverse temperature exp(s); s starts at ln(1/0.07).
  Var itc_logit_scale(nn::Graph<T>& g) const { return g.exp(g.param(params_[itc_scale_])); }

  /// Two-way match logits from pooled fused features (query rows when
  /// present, otherwise all valid rows).
  Var itm_logits(nn::Graph<T>& g, Var fused, int fused_len, const std::vector<std::uint8_t>& fused_valid) const {
    Var pooled;
    if (config_.num_queries > 0) {
      pooled = g.masked_mean(g.select_rows(fused, fused_len, 0, config_.num_queries), config_.num_queries, {});
    } else {
      pooled = g.masked_mean(fused, fused_len, fused_valid);
    }
    return linear(g, pooled, itm_head_);
  }

  // ---- accessors used by the cached inference path ------------------------

  T embed_scale() const { return std::sqrt(T(config_.d_model)); }
  const Mat& value(int idx) const { return params_[idx].value; }
  const std::vector<nn::DecoderBlockIdx>& decoder_blocks() const { return dec_blocks_; }
  nn::LnIdx decoder_final_ln() const { return dec_ln_; }
  int token_embedding() const { return tok_embed_; }
  int output_weight() const { return config_.tie_output ? tok_embed_ : out_w_; }
  int output_bias() const { return out_b_; }

 private:
  void build() {
    const int d = config_.d_model, V = config_.vocab_size, f = d * config_.ffn_mult;
    Rng rng(config_.init_seed);
    auto add = [&](const std::string& name, const std::string& group, int rows, int cols, int kind) {
      nn::Parameter<T> p;
      p.name = name;
      p.group = group;
      p.value.resize(rows, cols);
      for (Eigen::Index i = 0; i < p.value.size(); ++i) {
        p.value.data()[i] = kind == 0 ? T(rng.normal() * config_.init_std) : T(kind == 1 ? 1 : 0);
      }
      p.grad = Mat::Zero(rows, cols);
      params_.push_back(std::move(p));
      return static_cast<int>(params_.size()) - 1;
    };
    constexpr int kNormal = 0, kOnes = 1, kZeros = 2;
    auto lin = [&](const std::string& name, const std::string& group, int in, int out) {
      return nn::LinearIdx{add(name + ".w", group, in, out, kNormal), add(name + ".b", group, 1, out, kZeros)};
    };
    auto ln = [&](const std::string& name, const std::string& group) {
      return nn::LnIdx{add(name + ".gamma", group, 1, d, kOnes), add(name + ".beta", group, 1, d, kZeros)};
    };
    auto attn = [&](const std::string& name, const std::string& group) {
      return nn::AttnIdx{lin(name + ".q", group, d, d), lin(name + ".k", group, d, d), lin(name + ".v", group, d, d),
                         lin(name + ".o", group, d, d)};
    };
    auto enc_block = [&](const std::string& name, const std::string& group) {
      nn::EncoderBlockIdx b;
      b.ln1 = ln(name + ".ln1", group);
      b.attn = attn(name + ".attn", group);
      b.ln2 = ln(name + ".ln2", group);
      b.ff1 = lin(name + ".ff1", group, d, f);
      b.ff2 = lin(name + ".ff2", group, f, d);
      return b;
    };

    img_proj1_ = lin("image_proj.0", "image_proj", config_.patch_dim(), d);
    img_proj2_ = lin("image_proj.1", "image_proj", d, d);
    pos_row_ = add("image_pos.row", "image_pos", config_.grid_h(), d, kNormal);
    pos_col_ = add("image_pos.col", "image_pos", config_.grid_w(), d, kNormal);
    tok_embed_ = add("embedding.token", "embedding", V, d, kNormal);
    for (int i = 0; i < config_.text_layers; ++i) text_blocks_.push_back(enc_block("text_encoder." + std::to_string(i), "text_encoder"));
    text_ln_ = ln("text_encoder.ln_f", "text_encoder");
    if (config_.num_queries > 0) queries_ = add("queries", "queries", config_.num_queries, d, kNormal);
    for (int i = 0; i < config_.enc_layers; ++i) fusion_blocks_.push_back(enc_block("fusion." + std::to_string(i), "fusion"));
    fusion_ln_ = ln("fusion.ln_f", "fusion");
    for (int i = 0; i < config_.dec_layers; ++i) {
      const std::string n = "decoder." + std::to_string(i);
      nn::DecoderBlockIdx b;
      b.ln1 = ln(n + ".ln1", "decoder");
      b.self = attn(n + ".self", "decoder");
      b.ln2 = ln(n + ".ln2", "decoder");
      b.cross = attn(n + ".cross", "decoder");
      b.ln3 = ln(n + ".ln3", "decoder");
      b.ff1 = lin(n + ".ff1", "decoder", d, f);
      b.ff2 = lin(n + ".ff2", "decoder", f, d);
      dec_blocks_.push_back(b);
    }
    dec_ln_ = ln("decoder.ln_f", "decoder");
    if (!config_.tie_output) out_w_ = add("output.w", "output", V, d, kNormal);
    out_b_ = add("output.b", "output", 1, V, kZeros);
    itc_img_ = lin("itc.image", "itc", d, d);
    itc_txt_ = lin("itc.text", "itc", d, d);
    itc_scale_ = add("itc.logit_scale", "itc", 1, 1, kZeros);
    params_[itc_scale_].value(0, 0) = T(std::log(1.0 / 0.07));
    itm_head_ = lin("itm.head", "itm", d, 2);
  }

  Var linear(nn::Graph<T>& g, Var x, nn::LinearIdx l) const {
    return g.linear(x, g.param(params_[l.w]), g.param(params_[l.b]));
  }

  Var layer_norm(nn::Graph<T>& g, Var x, nn::LnIdx l) const {
    return g.layer_norm(x, g.param(params_[l.gamma]), g.param(params_[l.beta]));
  }

  Var attention(nn::Graph<T>& g, Var h_q, Var h_kv, const nn::AttnIdx& a, const nn::AttentionLayout& layout) const {
    Var q = linear(g, h_q, a.q);
    Var k = linear(g, h_kv, a.k);
    Var v = linear(g, h_kv, a.v);
    return linear(g, g.attention(q, k, v, layout), a.o);
  }

  Var encoder_block(nn::Graph<T>& g, Var x, const nn::EncoderBlockIdx& b, const nn::AttentionLayout& layout) const {
    Var h = layer_norm(g, x, b.ln1);
    x = g.add(x, attention(g, h, h, b.attn, layout));
    h = layer_norm(g, x, b.ln2);
    return g.add(x, linear(g, g.gelu(linear(g, h, b.ff1)), b.ff2));
  }

  ModelConfig config_;
  std::vector<nn::Parameter<T>> params_;
  nn::LinearIdx img_proj1_, img_proj2_, itc_img_, itc_txt_, itm_head_;
  int pos_row_ = -1, pos_col_ = -1, tok_embed_ = -1, queries_ = -1, out_w_ = -1, out_b_ = -1, itc_scale_ = -1;
  std::vector<nn::EncoderBlockIdx> text_blocks_, fusion_blocks_;
  std::vector<nn::DecoderBlockIdx> dec_blocks_;
  nn::LnIdx text_ln_, fusion_ln_, dec_ln_;
};

}  // namespace refloc
