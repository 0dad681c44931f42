#include <gtest/gtest.h>

#include <filesystem>

#include "refloc/eval.hpp"

using namespace refloc;

namespace {

const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::standard();
  return v;
}

struct Corpus {
  Dataset d;
  ImageStore store;
  SampleSets sets;
};

std::unique_ptr<Corpus> small_corpus(int n = 60) {
  auto c = std::make_unique<Corpus>();
  GenerateConfig gc;
  gc.num_scenes = n;
  gc.seed = 3;
  c->d.records = generate_records(gc);
  for (const auto& r : c->d.records) c->store.images.push_back(render(r.scene));
  std::vector<const DatasetRecord*> all;
  for (const auto& r : c->d.records) all.push_back(&r);
  c->sets = build_samples(vocab(), c->d, c->store, all);
  return c;
}

std::vector<const GroundingSample*> ptrs(const std::vector<GroundingSample>& v) {
  std::vector<const GroundingSample*> out;
  for (const auto& s : v) out.push_back(&s);
  return out;
}

// Replies with a fixed answer for each prompt kind.
class FixedResponder : public Responder {
 public:
  std::string reg_answer, rec_answer;
  std::vector<std::string> answer(const std::vector<Query>& qs) override {
    std::vector<std::string> out;
    for (const auto& q : qs) out.push_back(extract_rec_expression(q.question) ? rec_answer : reg_answer);
    return out;
  }
};

}  // namespace

TEST(AccAtIou, StrictThresholdCount) {
  const BBox gt{0, 0, 10, 10};
  const std::vector<std::optional<BBox>> pred{BBox{0, 0, 10, 6}, BBox{0, 0, 10, 4.9}, BBox{0, 0, 10, 5.1}};
  EXPECT_NEAR(iou(*pred[0], gt), 0.6, 1e-12);
  EXPECT_NEAR(acc_at_iou(pred, {gt, gt, gt}), 2.0 / 3.0, 1e-12);
  EXPECT_EQ(acc_at_iou({BBox{0, 0, 10, 5}}, {gt}), 0.0);
}

TEST(AccAtIou, BoundaryCases) {
  const std::vector<BBox> gt{{0, 0, 10, 10}, {5, 5, 20, 30}};
  EXPECT_EQ(acc_at_iou({std::nullopt, std::nullopt}, gt), 0.0);
  EXPECT_EQ(acc_at_iou({gt[0], gt[1]}, gt), 1.0);
  EXPECT_THROW(acc_at_iou({gt[0]}, gt), ValidationError);
}

TEST(AccAtIou, MonotoneInThreshold) {
  Rng rng(4);
  std::vector<std::optional<BBox>> pred;
  std::vector<BBox> gt;
  for (int i = 0; i < 300; ++i) {
    const double x = rng.uniform01() * 30, y = rng.uniform01() * 30;
    gt.push_back({x, y, x + 20, y + 20});
    if (i % 10 == 0) {
      pred.push_back(std::nullopt);
    } else {
      const double dx = rng.normal() * 5, dy = rng.normal() * 5;
      pred.push_back(BBox{std::max(0.0, x + dx), std::max(0.0, y + dy), x + dx + 20, y + dy + 20});
    }
  }
  double prev = 1.0;
  for (double t = 0.0; t <= 1.0; t += 0.05) {
    const double a = acc_at_iou(pred, gt, t);
    EXPECT_LE(a, prev);
    prev = a;
  }
}

TEST(Oracle, AnswersGradePerfectly) {
  auto c = small_corpus();
  OracleResponder oracle;
  const auto res = grade_rec(oracle, ptrs(c->sets.rec));
  ASSERT_FALSE(res.empty());
  for (const auto& r : res) {
    EXPECT_TRUE(r.parsed);
    EXPECT_GT(r.iou, 0.95);
  }
  const auto st = cycle_round_trip(oracle, vocab(), ptrs(c->sets.rec));
  EXPECT_EQ(st.box.mean, 0.0);
  EXPECT_EQ(st.text.mean, 0.0);
  EXPECT_EQ(st.box_unparseable, 0u);
  EXPECT_EQ(st.box.n, c->sets.rec.size());
}

TEST(CycleRoundTrip, WorkedExampleContributesSeven) {
  DatasetRecord r;
  r.id = "x";
  r.scene.canvas = {640, 480};
  SceneObject o;
  o.box = {78.1, 175.7, 251.5, 431.0};
  r.scene.objects.push_back(o);
  GroundingSample s;
  s.record = &r;
  s.box = quantize(o.box, r.scene.canvas);
  ASSERT_EQ(*s.box, (QuantizedBox{122, 366, 393, 898}));
  s.expression = "the red circle";
  FixedResponder fr;
  fr.reg_answer = "the red circle in the region of [122, 366, 393, 898].";
  fr.rec_answer = "In the region of [150, 366, 393, 898].";
  const auto st = cycle_round_trip(fr, vocab(), {&s});
  ASSERT_EQ(st.box_terms.size(), 1u);
  EXPECT_DOUBLE_EQ(st.box_terms[0], 7.0);
  EXPECT_DOUBLE_EQ(st.text_terms[0], 0.0);
}

TEST(CycleRoundTrip, UnparseableCounted) {
  auto c = small_corpus(20);
  FixedResponder fr;
  fr.reg_answer = "nothing useful";
  fr.rec_answer = "no box";
  const auto st = cycle_round_trip(fr, vocab(), ptrs(c->sets.rec));
  EXPECT_EQ(st.box_unparseable, c->sets.rec.size());
  EXPECT_EQ(st.box.mean, kUnparseablePenalty);
  EXPECT_EQ(st.text.mean, 1.0);
}

TEST(TermStats, NearestRank) {
  std::vector<double> v;
  for (int i = 1; i <= 20; ++i) v.push_back(i);
  const auto s = term_stats(v);
  EXPECT_DOUBLE_EQ(s.mean, 10.5);
  EXPECT_DOUBLE_EQ(s.median, 10.5);
  EXPECT_DOUBLE_EQ(s.p95, 19.0);
  EXPECT_DOUBLE_EQ(term_stats({3.0}).p95, 3.0);
  EXPECT_EQ(term_stats({}).n, 0u);
}

TEST(Summary, RatesAndQualifiersAggregate) {
  Rng rng(5);
  std::vector<SampleResult> rs;
  for (int i = 0; i < 500; ++i) {
    SampleResult r;
    r.qualifier = kAllQualifiers[rng.uniform_int(0, kAllQualifiers.size() - 1)];
    r.parsed = rng.uniform01() > 0.2;
    r.repaired = r.parsed && rng.uniform01() > 0.7;
    r.iou = r.parsed ? rng.uniform01() : 0.0;
    rs.push_back(r);
  }
  const auto rep = summarize(rs, "test");
  std::size_t clean = 0;
  for (const auto& r : rs) clean += r.parsed && !r.repaired;
  EXPECT_NEAR(rep.parse_failure_rate + rep.repair_rate + double(clean) / rs.size(), 1.0, 1e-9);
  double weighted = 0;
  std::size_t total = 0;
  for (const auto& [q, st] : rep.per_qualifier) {
    weighted += st.acc * double(st.n);
    total += st.n;
  }
  EXPECT_EQ(total, rs.size());
  EXPECT_NEAR(weighted / double(total), rep.acc_at_05, 1e-9);
  EXPECT_EQ(rep.per_qualifier.size(), kAllQualifiers.size());
}

TEST(Report, FourDecimalFormatting) {
  std::vector<SampleResult> rs(3);
  rs[0].parsed = rs[1].parsed = rs[2].parsed = true;
  rs[0].iou = 0.6;
  rs[1].iou = 0.49;
  rs[2].iou = 0.51;
  const std::string text = format_report(summarize(rs, "test"));
  EXPECT_NE(text.find("acc_at_05: 0.6667\n"), std::string::npos) << text;
  EXPECT_NE(text.find("split: test\n"), std::string::npos);
  EXPECT_NE(text.find("qualifier.middle.acc: 0.0000\n"), std::string::npos);
}

TEST(Report, WriteReadRoundTripAndByteIdentical) {
  auto c = small_corpus();
  OracleResponder oracle;
  EvalOptions opt;
  opt.cycle_samples = 10;
  EvalReport a = evaluate(oracle, vocab(), ptrs(c->sets.rec), "test", opt);
  a.checkpoint = "abc";
  a.config_fingerprint = "def";
  EvalReport b = evaluate(oracle, vocab(), ptrs(c->sets.rec), "test", opt);
  b.checkpoint = "abc";
  b.config_fingerprint = "def";
  const auto dir = std::filesystem::temp_directory_path() / "refloc_eval_test";
  std::filesystem::create_directories(dir);
  emit_report(a, (dir / "a.txt").string());
  emit_report(b, (dir / "b.txt").string());
  EXPECT_EQ(read_file(dir / "a.txt"), read_file(dir / "b.txt"));
  EXPECT_EQ(read_report((dir / "a.txt").string()), rounded(a));
  EXPECT_EQ(rounded(rounded(a)), rounded(a));
  std::filesystem::remove_all(dir);
  EXPECT_THROW(emit_report(a, "/nonexistent/dir/report.txt"), IoError);
  EXPECT_THROW(parse_report("split test\n"), ValidationError);
  EXPECT_THROW(parse_report("split: test\n"), ValidationError);
}

TEST(Report, SampleCsvQuotes) {
  SampleResult r;
  r.id = "s1#0";
  r.expression = "the red circle";
  r.answer = "In the region of [1, 2, 3, 4].";
  r.parsed = true;
  r.iou = 0.75;
  const std::string csv = format_sample_csv({r});
  EXPECT_EQ(csv, "id,expression,qualifier,parsed,repaired,iou,answer\n"
                 "s1#0,the red circle,none,1,0,0.7500,\"In the region of [1, 2, 3, 4].\"\n");
}

TEST(Evaluate, DeterministicForModelResponder) {
  auto c = small_corpus(30);
  ModelConfig mc;
  mc.d_model = 32;
  mc.heads = 2;
  mc.enc_layers = 1;
  mc.dec_layers = 1;
  mc.vocab_size = int(vocab().size());
  const Model<float> m(mc);
  EvalOptions opt;
  opt.cycle_samples = 8;
  ModelResponder<float> r1(m, vocab(), BeamConfig{1, 16, 0, kEos});
  ModelResponder<float> r2(m, vocab(), BeamConfig{1, 16, 0, kEos}, 7);
  const auto a = evaluate(r1, vocab(), ptrs(c->sets.rec), "test", opt);
  const auto b = evaluate(r2, vocab(), ptrs(c->sets.rec), "test", opt);
  EXPECT_EQ(format_report(a), format_report(b));
  ModelResponder<float> beam(m, vocab(), BeamConfig{3, 16, 0, kEos});
  const auto bb = evaluate(beam, vocab(), ptrs(c->sets.rec), "test", opt);
  EXPECT_EQ(bb.n_samples, a.n_samples);
}
