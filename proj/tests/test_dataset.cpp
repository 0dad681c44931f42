#include <filesystem>

#include <gtest/gtest.h>

#include "refloc/dataset.hpp"
#include "refloc/samples.hpp"

using namespace refloc;

namespace {

fs::path temp_root(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("refloc_test_dataset_" + name);
  fs::remove_all(p);
  return p;
}

GenerateConfig small(int n, double det = 0.0) {
  GenerateConfig c;
  c.num_scenes = n;
  c.seed = 11;
  c.detection_fraction = det;
  return c;
}

}  // namespace

TEST(Generate, DeterministicInSeed) {
  const auto a = generate_records(small(40));
  const auto b = generate_records(small(40));
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(to_json(a[i]), to_json(b[i]));
  auto c = small(40);
  c.seed = 12;
  EXPECT_NE(to_json(generate_records(c)[0]), to_json(a[0]));
}

TEST(Generate, SplitSizesAndOrder) {
  const auto s = split_sizes(5000, 0.1, 0.1);
  EXPECT_EQ(s.train, 4000);
  EXPECT_EQ(s.val, 500);
  EXPECT_EQ(s.test, 500);
  const auto s2 = split_sizes(7, 0.1, 0.15);
  EXPECT_EQ(s2.val + s2.test + s2.train, 7);
  EXPECT_EQ(s2.val, 0);
  EXPECT_EQ(s2.test, 1);
  const auto recs = generate_records(small(50));
  int counts[3] = {0, 0, 0};
  for (const auto& r : recs) counts[r.split == "train" ? 0 : r.split == "val" ? 1 : 2]++;
  EXPECT_EQ(counts[0], 40);
  EXPECT_EQ(counts[1], 5);
  EXPECT_EQ(counts[2], 5);
}

TEST(Generate, DetectionOnlyTailOfTrain) {
  const auto recs = generate_records(small(50, 0.25));
  int det = 0;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto& r = recs[i];
    if (r.detection_only) {
      ++det;
      EXPECT_EQ(r.split, "train");
      EXPECT_GE(i, 30u);
      EXPECT_TRUE(r.expressions.empty());
    }
  }
  EXPECT_EQ(det, 10);
  auto c = small(10);
  c.detection_only = true;
  for (const auto& r : generate_records(c)) EXPECT_TRUE(r.detection_only && r.expressions.empty());
}

TEST(Generate, ExpressionsResolveToTheirTarget) {
  for (const auto& r : generate_records(small(200))) {
    for (const auto& e : r.expressions) {
      const auto m = match_expression(r.scene, e.text);
      ASSERT_TRUE(m.has_value()) << e.text;
      ASSERT_EQ(m->size(), 1u) << e.text;
      EXPECT_EQ(m->front(), e.target_index);
    }
  }
}

TEST(Generate, RejectsBadConfig) {
  auto c = small(10);
  c.num_scenes = 0;
  EXPECT_THROW(generate_records(c), ValidationError);
  c = small(10);
  c.val_ratio = 0.6;
  c.test_ratio = 0.4;
  EXPECT_THROW(generate_records(c), ValidationError);
  c = small(10);
  c.detection_fraction = 1.5;
  EXPECT_THROW(generate_records(c), ValidationError);
}

TEST(Records, JsonRoundTripAndRejects) {
  const auto recs = generate_records(small(20));
  for (const auto& r : recs) EXPECT_EQ(to_json(record_from_json(to_json(r))), to_json(r));
  json j = to_json(recs[0]);
  j["objects"][0]["shape"] = "hexagon";
  EXPECT_THROW(record_from_json(j), ValidationError);
  j = to_json(recs[0]);
  j["split"] = "dev";
  EXPECT_THROW(record_from_json(j), ValidationError);
  j = to_json(recs[0]);
  j["objects"][0]["box"] = {0, 0, 100, 10};
  EXPECT_THROW(record_from_json(j), ValidationError);
  j = to_json(recs[0]);
  j["expressions"] = {{{"text", "the red circle"}, {"target_index", 99}}};
  EXPECT_THROW(record_from_json(j), ValidationError);
  j = to_json(recs[0]);
  j.erase("canvas");
  EXPECT_THROW(record_from_json(j), ValidationError);
}

TEST(Files, WriteLoadRoundTrip) {
  const fs::path root = temp_root("roundtrip");
  const auto recs = generate_records(small(30, 0.2));
  const Manifest m = write_dataset(root, recs, json{{"seed", 11}}, false);
  EXPECT_EQ(m.counts.at("train"), 24u);
  EXPECT_EQ(m.split_hashes.size(), 3u);
  const Dataset d = load_dataset(root);
  ASSERT_EQ(d.records.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) EXPECT_EQ(to_json(d.records[i]), to_json(recs[i]));
  EXPECT_EQ(d.manifest.corpus_hash, m.corpus_hash);
  EXPECT_EQ(d.split("val").size(), 3u);
  // PNG storage is lossless.
  for (const auto& r : d.records) {
    const Image img = d.load_image(r);
    EXPECT_EQ(img.pixels, render(r.scene).pixels) << r.id;
  }
  // Rewriting the same corpus reproduces every hash.
  const Manifest m2 = write_dataset(root, recs, json{{"seed", 11}}, true);
  EXPECT_EQ(m2.split_hashes, m.split_hashes);
  fs::remove_all(root);
}

TEST(Files, RefusesOverwriteWithoutForce) {
  const fs::path root = temp_root("force");
  const auto recs = generate_records(small(5));
  write_dataset(root, recs, json(), false);
  EXPECT_THROW(write_dataset(root, recs, json(), false), IoError);
  EXPECT_NO_THROW(write_dataset(root, recs, json(), true));
  fs::remove_all(root);
}

TEST(Files, DetectsTampering) {
  const fs::path root = temp_root("tamper");
  const auto recs = generate_records(small(10));
  write_dataset(root, recs, json(), false);
  // Overwrite one training image with another scene's image.
  fs::copy_file(root / recs[1].image, root / recs[0].image, fs::copy_options::overwrite_existing);
  EXPECT_THROW(load_dataset(root), ValidationError);
  EXPECT_NO_THROW(load_dataset(root, false));
  write_dataset(root, recs, json(), true);
  {
    std::string shard = read_file(root / "test.jsonl");
    shard[shard.find("\"seed\":") + 7] = '9';
    write_file(root / "test.jsonl", shard);
  }
  EXPECT_THROW(load_dataset(root), ValidationError);
  fs::remove_all(root);
}

TEST(Files, MissingManifestIsIoError) {
  const fs::path root = temp_root("missing");
  EXPECT_THROW(load_dataset(root), IoError);
  fs::create_directories(root);
  write_file(root / "manifest.json", "{not json");
  EXPECT_THROW(load_dataset(root), ValidationError);
  fs::remove_all(root);
}

TEST(Samples, BuiltFromRecords) {
  const Vocabulary v = Vocabulary::standard();
  Dataset d;
  d.records = generate_records(small(30, 0.5));
  ImageStore st;
  for (const auto& r : d.records) st.images.push_back(render(r.scene));
  const auto train = d.split("train");
  const auto s = build_samples(v, d, st, train);
  std::size_t n_expr = 0;
  for (const auto* r : train) n_expr += r->expressions.size();
  EXPECT_EQ(s.captions.size(), train.size());
  EXPECT_EQ(s.rec.size(), n_expr);
  EXPECT_EQ(s.reg.size(), n_expr);
  for (const auto& x : s.rec) {
    EXPECT_EQ(x.task, TaskKind::rec);
    ASSERT_TRUE(x.box.has_value());
    EXPECT_EQ(*x.box, quantize(x.record->scene.objects[x.target_index].box, x.record->scene.canvas));
    EXPECT_EQ(x.provenance, Provenance::gold);
  }
}
