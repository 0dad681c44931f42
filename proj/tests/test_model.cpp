#include <gtest/gtest.h>

#include <map>
#include <set>

#include "refloc/inference.hpp"
#include "refloc/losses.hpp"
#include "refloc/model.hpp"
#include "refloc/scene.hpp"

using namespace refloc;

namespace {

const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::standard();
  return v;
}

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 32;
  c.heads = 4;
  c.vocab_size = static_cast<int>(vocab().size());
  c.enc_layers = 1;
  c.dec_layers = 2;
  c.num_queries = 10;
  c.init_std = 0.1;
  return c;
}

Image random_image(std::uint64_t seed) {
  Rng rng(seed);
  Image img(64, 64);
  for (auto& p : img.pixels) p = static_cast<float>(rng.uniform01());
  return img;
}

std::vector<TokenId> ids_of(const std::string& s) { return tokenize(vocab(), s).ids; }

// Teacher-forced logits for one (image, instruction, decoder input) triple.
template <class T>
nn::Matrix<T> full_logits(const Model<T>& m, const Image& img, const std::vector<TokenId>& instr,
                         const std::vector<TokenId>& dec_in) {
  nn::Graph<T> g(false);
  std::vector<const Image*> ip{&img};
  auto e = m.encode(g, ip, instr, static_cast<int>(instr.size()));
  return g.value(m.decode(g, e.fused, e.fused_valid, e.fused_len, dec_in, 1, static_cast<int>(dec_in.size())));
}

}  // namespace

TEST(ModelConfig, Validation) {
  ModelConfig c = small_config();
  EXPECT_NO_THROW(validate(c));
  c.heads = 5;
  EXPECT_THROW(validate(c), ValidationError);
  c = small_config();
  c.patch = 7;
  EXPECT_THROW(validate(c), ValidationError);
  c = small_config();
  c.num_queries = -1;
  EXPECT_THROW(validate(c), ValidationError);
  c = small_config();
  c.num_queries = 0;
  EXPECT_NO_THROW(validate(c));
}

TEST(Model, EncoderShapes) {
  const Model<float> m(small_config());
  const Image img = random_image(1);
  std::vector<const Image*> ip{&img, &img};
  nn::Graph<float> g(false);
  EXPECT_EQ(g.value(m.encode_image(g, ip)).rows(), 2 * 64);
  EXPECT_EQ(g.value(m.encode_image(g, ip)).cols(), 32);
  std::vector<std::uint8_t> valid;
  std::vector<TokenId> ids = ids_of("where is the red circle");
  EXPECT_EQ(g.value(m.encode_text(g, ids, 1, 5, valid)).rows(), 5);
  std::vector<TokenId> twelve = ids_of("where is the left small red circle in the image ? .");
  ASSERT_EQ(twelve.size(), 12u);
  std::vector<const Image*> one{&img};
  auto e = m.encode(g, one, twelve, 12);
  EXPECT_EQ(e.fused_len, 86);
  EXPECT_EQ(g.value(e.fused).rows(), 86);
  EXPECT_EQ(g.value(e.fused).cols(), 32);
  auto empty = m.encode(g, one, {}, 0);
  EXPECT_EQ(empty.fused_len, 74);
  EXPECT_TRUE(g.value(empty.fused).allFinite());
}

TEST(Model, ShapeContractAcrossConfigs) {
  for (auto [d, h, patch, nq] : std::vector<std::array<int, 4>>{{16, 2, 8, 0}, {24, 3, 16, 4}, {32, 1, 4, 1}}) {
    ModelConfig c = small_config();
    c.d_model = d;
    c.heads = h;
    c.patch = patch;
    c.num_queries = nq;
    const Model<float> m(c);
    const Image img = random_image(2);
    std::vector<const Image*> ip{&img};
    nn::Graph<float> g(false);
    const auto ids = ids_of("the red circle");
    auto e = m.encode(g, ip, ids, 3);
    const int P = (64 / patch) * (64 / patch);
    EXPECT_EQ(g.value(e.visual).rows(), P);
    EXPECT_EQ(g.value(e.text).rows(), 3);
    EXPECT_EQ(e.fused_len, nq + P + 3);
    EXPECT_EQ(g.value(e.fused).cols(), d);
    auto lg = m.decode(g, e.fused, e.fused_valid, e.fused_len, {kBos, 20}, 1, 2);
    EXPECT_EQ(g.value(lg).rows(), 2);
    EXPECT_EQ(g.value(lg).cols(), c.vocab_size);
  }
}

TEST(Model, RejectsBadInputs) {
  const Model<float> m(small_config());
  Image wrong(32, 64);
  std::vector<const Image*> ip{&wrong};
  nn::Graph<float> g(false);
  EXPECT_THROW(m.encode_image(g, ip), ValidationError);
  std::vector<TokenId> long_ids(60, 20);
  std::vector<std::uint8_t> valid;
  EXPECT_THROW(m.encode_text(g, long_ids, 1, 60, valid), ValidationError);
  const Image img = random_image(3);
  std::vector<const Image*> ok{&img};
  auto e = m.encode(g, ok, {}, 0);
  std::vector<TokenId> dec(200, 20);
  EXPECT_THROW(m.decode(g, e.fused, e.fused_valid, e.fused_len, dec, 1, 200), ValidationError);
}

TEST(Model, DeterministicAndFinite) {
  const Model<float> m(small_config());
  const Model<float> m2(small_config());
  const auto instr = ids_of("where is the red circle in the image ?");
  const std::vector<TokenId> dec{kBos, 20, 21};
  for (int t = 0; t < 100; ++t) {
    const Image img = random_image(100 + t);
    const auto a = full_logits(m, img, instr, dec);
    EXPECT_TRUE(a.allFinite());
    if (t < 5) {
      EXPECT_EQ(a, full_logits(m, img, instr, dec));
      EXPECT_EQ(a, full_logits(m2, img, instr, dec));
    }
  }
  const Image img = random_image(7);
  std::vector<const Image*> ip{&img, &img};
  nn::Graph<float> g(false);
  const auto v = g.value(m.encode_image(g, ip));
  EXPECT_EQ(v.topRows(64), v.bottomRows(64));
}

TEST(Model, DecoderIsCausal) {
  const Model<double> m([] {
    auto c = small_config();
    c.init_std = 0.3;
    return c;
  }());
  const Image img = random_image(4);
  const auto instr = ids_of("where is the blue square in the image ?");
  std::vector<TokenId> dec{kBos, 20, 30, 40, 50, 60, 70};
  const auto base = full_logits(m, img, instr, dec);
  for (std::size_t j = 1; j < dec.size(); ++j) {
    auto changed = dec;
    changed[j] = 99;
    const auto other = full_logits(m, img, instr, changed);
    EXPECT_TRUE(base.topRows(j).isApprox(other.topRows(j), 1e-12)) << j;
    EXPECT_FALSE(base.bottomRows(dec.size() - j).isApprox(other.bottomRows(dec.size() - j), 1e-6)) << j;
  }
}

TEST(Model, LogitsNormalize) {
  const Model<float> m(small_config());
  const auto lg = full_logits(m, random_image(5), ids_of("the red circle"), {kBos, 20});
  for (int r = 0; r < lg.rows(); ++r) {
    const double mx = lg.row(r).maxCoeff();
    double z = 0;
    for (int c = 0; c < lg.cols(); ++c) z += std::exp(lg(r, c) - mx);
    double s = 0;
    for (int c = 0; c < lg.cols(); ++c) s += std::exp(lg(r, c) - mx) / z;
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Model, PaddingInvariance) {
  auto c = small_config();
  c.init_std = 0.2;
  const Model<float> m(c);
  const Image a = random_image(6), b = random_image(8);
  auto short_ids = ids_of("where is the red circle in the image ?");
  auto long_ids = ids_of("where is the left small purple triangle in the image ?");
  std::vector<TokenId> dec{kBos, 20, 30, 40};
  const auto alone = full_logits(m, a, short_ids, dec);
  int len = 0;
  const auto padded = pad_batch({short_ids, long_ids}, len);
  ASSERT_GT(len, static_cast<int>(short_ids.size()));
  nn::Graph<float> g(false);
  std::vector<const Image*> ip{&a, &b};
  auto e = m.encode(g, ip, padded, len);
  std::vector<TokenId> dec2 = dec;
  dec2.insert(dec2.end(), dec.begin(), dec.end());
  const auto batched = g.value(m.decode(g, e.fused, e.fused_valid, e.fused_len, dec2, 2, 4));
  EXPECT_LT((batched.topRows(4) - alone).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Model, PaddedFusedRowsAreInert) {
  const Model<double> m([] {
    auto c = small_config();
    c.init_std = 0.3;
    return c;
  }());
  const Image img = random_image(9);
  auto ids = ids_of("where is the red circle");
  ids.push_back(kPad);
  ids.push_back(kPad);
  const int len = static_cast<int>(ids.size());
  std::vector<TokenId> dec{kBos, 20, 30};
  auto run = [&](bool scramble) {
    nn::Graph<double> g(false);
    std::vector<const Image*> ip{&img};
    std::vector<std::uint8_t> tv, fv;
    auto vis = m.encode_image(g, ip);
    auto txt = m.encode_text(g, ids, 1, len, tv);
    if (scramble) {
      nn::Matrix<double> t = g.value(txt);
      t.row(len - 1).swap(t.row(len - 2));
      t.row(len - 1).setConstant(123.0);
      txt = g.constant(t);
    }
    auto fused = m.fuse(g, vis, txt, 1, len, tv, fv);
    const int fl = small_config().num_queries + 64 + len;
    return nn::Matrix<double>(g.value(m.decode(g, fused, fv, fl, dec, 1, 3)));
  };
  EXPECT_TRUE(run(false).isApprox(run(true), 1e-12));
}

TEST(Model, IncrementalMatchesFullDecode) {
  const Model<float> m(small_config());
  const Image img = random_image(10);
  const auto instr = ids_of("where is the green square in the image ?");
  std::vector<TokenId> dec{kBos, 40, 50, 60, 70, 80, 5};
  const auto full = full_logits(m, img, instr, dec);
  IncrementalDecoder<float> inc(m);
  std::vector<const Image*> ip{&img};
  auto caches = inc.prepare(ip, {instr});
  auto st = inc.start(caches[0]);
  float worst = (st.logits - full.row(0)).cwiseAbs().maxCoeff();
  for (std::size_t j = 1; j < dec.size(); ++j) {
    st = inc.advance(st, dec[j]);
    worst = std::max(worst, (st.logits - full.row(j)).cwiseAbs().maxCoeff());
  }
  EXPECT_LT(worst, 1e-5);
  EXPECT_EQ(st.tokens, std::vector<TokenId>(dec.begin() + 1, dec.end()));
}

TEST(Model, BatchedIncrementalMatchesSingle) {
  const Model<float> m(small_config());
  const Image a = random_image(11), b = random_image(12);
  IncrementalDecoder<float> inc(m);
  std::vector<const Image*> ip{&a, &b};
  auto caches = inc.prepare(ip, {ids_of("the red circle"), ids_of("where is the blue square")});
  auto states = inc.start(caches);
  auto s0 = inc.start(caches[0]);
  auto s1 = inc.start(caches[1]);
  for (TokenId t : {20, 30, 40}) {
    std::vector<const DecoderState<float>*> in{&states[0], &states[1]};
    states = inc.advance(in, {t, t});
    s0 = inc.advance(s0, t);
    s1 = inc.advance(s1, t);
    EXPECT_LT((states[0].logits - s0.logits).cwiseAbs().maxCoeff(), 1e-5);
    EXPECT_LT((states[1].logits - s1.logits).cwiseAbs().maxCoeff(), 1e-5);
  }
}

TEST(Model, FreezeGroups) {
  Model<float> m(small_config());
  EXPECT_THROW(m.set_frozen("nonexistent", true), ValidationError);
  for (const auto& grp : parameter_groups()) EXPECT_NO_THROW(m.set_frozen(grp, false));
  m.set_frozen("decoder", true);
  const Image img = random_image(13);
  std::vector<const Image*> ip{&img};
  nn::Graph<float> g;
  auto e = m.encode(g, ip, ids_of("the red circle"), 3);
  auto lg = m.decode(g, e.fused, e.fused_valid, e.fused_len, {kBos, 20}, 1, 2);
  auto loss = lm_cross_entropy(g, lg, {20, kEos}, std::vector<std::uint8_t>{1, 1});
  g.backward(loss);
  std::set<std::string> got;
  for (auto [p, gr] : g.parameter_grads()) got.insert(p->group);
  EXPECT_FALSE(got.count("decoder"));
  EXPECT_TRUE(got.count("output"));
  EXPECT_TRUE(got.count("image_proj"));
}

TEST(Model, TiedOutputSharesEmbedding) {
  auto c = small_config();
  c.tie_output = true;
  const Model<float> tied(c);
  const Model<float> untied(small_config());
  EXPECT_EQ(tied.output_weight(), tied.token_embedding());
  EXPECT_LT(tied.parameter_count(), untied.parameter_count());
}

// Central differences over a sample of entries of every parameter, for the
// combined generation + contrastive + matching objective.
TEST(Model, GradientsMatchFiniteDifferences) {
  ModelConfig mc = small_config();
  mc.d_model = 16;
  mc.heads = 2;
  mc.enc_layers = 1;
  mc.dec_layers = 1;
  mc.text_layers = 1;
  mc.num_queries = 3;
  mc.init_std = 0.3;
  Model<double> model(mc);
  std::vector<Image> imgs;
  std::vector<std::vector<TokenId>> qs, dins;
  for (int i = 0; i < 2; ++i) {
    const Scene s = generate_scene(10 + i, SceneConfig{});
    imgs.push_back(render(s));
    const auto p = build_rec_pair(generate_expression(s, 0).text, quantize(s.objects[0].box, s.canvas));
    qs.push_back(ids_of(p.question));
    std::vector<TokenId> in{kBos};
    const auto a = ids_of(p.answer);
    in.insert(in.end(), a.begin(), a.end());
    dins.push_back(in);
  }
  qs[1].resize(qs[1].size() - 2);
  int ql = 0, dl = 0;
  const auto qids = pad_batch(qs, ql), dids = pad_batch(dins, dl);
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> mask;
  for (int b = 0; b < 2; ++b) {
    for (int t = 0; t < dl; ++t) {
      const auto& a = dins[b];
      const int next = t + 1;
      const TokenId y = next < int(a.size()) ? a[next] : (next == int(a.size()) ? kEos : kPad);
      targets.push_back(y);
      mask.push_back(y != kPad);
    }
  }
  std::vector<const Image*> ip{&imgs[0], &imgs[1]};
  auto loss = [&](bool backward) {
    nn::Graph<double> g(backward);
    auto e = model.encode(g, ip, qids, ql);
    auto lg = model.decode(g, e.fused, e.fused_valid, e.fused_len, dids, 2, dl);
    auto lm = lm_cross_entropy(g, lg, targets, mask);
    auto itc = itc_loss(g, model.image_embedding(g, e.visual, 2), model.text_embedding(g, e.text, e.text_len, e.text_valid),
                        model.itc_logit_scale(g));
    auto itm = itm_loss(g, model.itm_logits(g, e.fused, e.fused_len, e.fused_valid), {1, 0});
    auto tot = g.weighted_sum(std::vector<nn::Var>{lm, itc, itm}, std::vector<double>{1.0, 0.7, 0.4});
    const double v = g.value(tot)(0, 0);
    if (backward) {
      g.backward(tot);
      model.zero_grad();
      model.accumulate_grads(g);
    }
    return v;
  };
  loss(true);
  std::map<std::string, double> worst_by_group;
  const double eps = 1e-4;
  for (auto& p : model.params()) {
    double& worst = worst_by_group[p.group];
    for (int k = 0; k < std::min<Eigen::Index>(5, p.value.size()); ++k) {
      const Eigen::Index idx = (Eigen::Index(k) * 7919) % p.value.size();
      const double old = p.value.data()[idx];
      p.value.data()[idx] = old + eps;
      const double lp = loss(false);
      p.value.data()[idx] = old - eps;
      const double lm = loss(false);
      p.value.data()[idx] = old;
      const double fd = (lp - lm) / (2 * eps), an = p.grad.data()[idx];
      if (std::abs(fd) + std::abs(an) < 1e-8) continue;
      worst = std::max(worst, std::abs(fd - an) / (std::abs(fd) + std::abs(an)));
    }
  }
  EXPECT_EQ(worst_by_group.size(), parameter_groups().size());
  for (auto [grp, w] : worst_by_group) EXPECT_LT(w, 1e-3) << grp;
}
