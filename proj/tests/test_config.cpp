#include <filesystem>

#include <gtest/gtest.h>

#include "refloc/config.hpp"

using namespace refloc;

namespace {

RunConfig parse(const std::string& text, RunConfig base = {}) { return parse_run_config(json::parse(text), base); }

}  // namespace

TEST(RunConfig, RoundTripsThroughJson) {
  for (const RunConfig& c : {RunConfig{}, smoke_preset(), desk_preset()}) {
    const json j = to_json(c);
    EXPECT_EQ(parse_run_config(j), c);
    EXPECT_EQ(to_json(parse_run_config(j)), j);
  }
}

TEST(RunConfig, RoundTripsFuzzedValues) {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    RunConfig c;
    c.seed = rng.next();
    c.generate.num_scenes = int(rng.uniform_int(1, 100000));
    c.generate.val_ratio = rng.uniform01() * 0.4;
    c.generate.detection_fraction = rng.uniform01();
    c.generate.scene.max_objects = int(rng.uniform_int(1, 8));
    c.model.d_model = 2 * int(rng.uniform_int(1, 64));
    c.model.heads = 1;
    c.model.init_std = 0.001 + rng.uniform01();
    c.activation.optim.lr = 1e-6 + rng.uniform01();
    c.cycle.pseudo_ratio = rng.uniform01() * 4;
    c.cycle.cycle_backprop = rng.uniform01() < 0.5;
    c.cycle.freeze = rng.uniform01() < 0.5 ? std::vector<std::string>{"image_proj"} : std::vector<std::string>{};
    c.beam.beam_width = int(rng.uniform_int(1, 8));
    c.beam.length_penalty = rng.uniform01();
    c.eval.split = rng.uniform01() < 0.5 ? "val" : "test";
    c.pseudo_labels = rng.uniform01() < 0.5;
    ASSERT_EQ(parse_run_config(json::parse(to_json(c).dump())), c) << i;
  }
}

TEST(RunConfig, PartialDocumentsKeepDefaults) {
  const RunConfig c = parse(R"({"model": {"d_model": 64}, "cycle": {"optim": {"lr": 0.001}}})");
  RunConfig want;
  want.model.d_model = 64;
  want.cycle.optim.lr = 0.001;
  EXPECT_EQ(c, want);
  EXPECT_EQ(parse("{}"), RunConfig{});
  // Overrides apply on top of a preset.
  const RunConfig s = parse(R"({"generate": {"num_scenes": 50}})", smoke_preset());
  EXPECT_EQ(s.generate.num_scenes, 50);
  EXPECT_EQ(s.model.d_model, 32);
}

TEST(RunConfig, DefaultsFollowTheStatedHyperparameters) {
  const RunConfig c;
  EXPECT_EQ(c.activation.epochs, 20);
  EXPECT_DOUBLE_EQ(c.activation.optim.lr, 2e-5);
  EXPECT_EQ(c.beam.beam_width, 4);
  EXPECT_DOUBLE_EQ(c.beam.length_penalty, 0.0);
  EXPECT_DOUBLE_EQ(c.cycle.pseudo_ratio, 1.0);
  EXPECT_EQ(c.generate.num_scenes, 5000);
  const RunConfig s = smoke_preset();
  EXPECT_EQ(s.generate.num_scenes, 300);
  EXPECT_EQ(s.model.d_model, 32);
  EXPECT_EQ(s.activation.epochs, 3);
  EXPECT_EQ(s.cycle.epochs, 3);
  EXPECT_EQ(preset("desk"), desk_preset());
  EXPECT_THROW(preset("huge"), ValidationError);
}

TEST(RunConfig, RejectsUnknownKeys) {
  EXPECT_THROW(parse(R"({"sead": 1})"), ValidationError);
  EXPECT_THROW(parse(R"({"model": {"dmodel": 64}})"), ValidationError);
  EXPECT_THROW(parse(R"({"cycle": {"optim": {"learning_rate": 1}}})"), ValidationError);
  EXPECT_THROW(parse(R"({"generate": {"scene": {"colour": 1}}})"), ValidationError);
  try {
    parse(R"({"activation": {"weights": {"lm": 1, "xyz": 2}}})");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("activation.weights.xyz"), std::string::npos) << e.what();
  }
}

TEST(RunConfig, RejectsBadValues) {
  EXPECT_THROW(parse(R"({"seed": "seven"})"), ValidationError);
  EXPECT_THROW(parse(R"({"model": []})"), ValidationError);
  EXPECT_THROW(parse(R"({"model": {"d_model": 30, "heads": 4}})"), ValidationError);
  EXPECT_THROW(parse(R"({"activation": {"epochs": 0}})"), ValidationError);
  EXPECT_THROW(parse(R"({"cycle": {"optim": {"lr": 0}}})"), ValidationError);
  EXPECT_THROW(parse(R"({"cycle": {"weights": {"itc": -1}}})"), ValidationError);
  EXPECT_THROW(parse(R"({"cycle": {"freeze": ["nope"]}})"), ValidationError);
  EXPECT_THROW(parse(R"({"beam": {"beam_width": 0}})"), ValidationError);
  EXPECT_THROW(parse(R"({"eval": {"split": "train"}})"), ValidationError);
  EXPECT_THROW(parse(R"({"generate": {"scene": {"canvas": [32, 32]}}})"), ValidationError);
  EXPECT_THROW(parse(R"({"generate": {"val_ratio": 0.5, "test_ratio": 0.5}})"), ValidationError);
}

TEST(RunConfig, FileLoading) {
  const fs::path dir = fs::temp_directory_path() / "refloc_test_config";
  fs::remove_all(dir);
  fs::create_directories(dir);
  EXPECT_THROW(load_run_config((dir / "none.json").string()), IoError);
  write_file(dir / "bad.json", "{\"seed\": ");
  EXPECT_THROW(load_run_config((dir / "bad.json").string()), ValidationError);
  write_file(dir / "ok.json", to_json(desk_preset()).dump(2));
  EXPECT_EQ(load_run_config((dir / "ok.json").string()), desk_preset());
  fs::remove_all(dir);
}

TEST(RunConfig, FingerprintTracksContent) {
  RunConfig a, b;
  EXPECT_EQ(fingerprint(a), fingerprint(b));
  EXPECT_EQ(fingerprint(a).size(), 64u);
  b.cycle.reg_fraction = 0.25;
  EXPECT_NE(fingerprint(a), fingerprint(b));
  EXPECT_EQ(fingerprint(parse_run_config(to_json(b))), fingerprint(b));
}

TEST(RunConfig, ReseedDerivesEverySeed) {
  RunConfig a, b;
  reseed(a, 99);
  reseed(b, 99);
  EXPECT_EQ(a, b);
  RunConfig c;
  reseed(c, 100);
  EXPECT_NE(a.generate.seed, c.generate.seed);
  EXPECT_NE(a.model.init_seed, c.model.init_seed);
  EXPECT_NE(a.activation.seed, a.cycle.seed);
}
