#include <gtest/gtest.h>

#include <set>

#include "refloc/scene.hpp"

namespace {

using namespace refloc;

SceneObject object(Shape s, Color c, BBox b) {
  SceneObject o;
  o.shape = s;
  o.color = c;
  o.box = b;
  o.size = size_class_for_area(b.area());
  return o;
}

Scene scene_of(std::vector<SceneObject> objs) {
  Scene s;
  s.canvas = {64, 64};
  s.objects = std::move(objs);
  return s;
}

}  // namespace

TEST(GenerateScene, DeterministicInSeed) {
  const SceneConfig cfg;
  for (std::uint64_t seed : {0ull, 1ull, 99ull, 123456789ull}) {
    EXPECT_EQ(generate_scene(seed, cfg), generate_scene(seed, cfg));
  }
  EXPECT_NE(generate_scene(1, cfg), generate_scene(2, cfg));
}

TEST(GenerateScene, MaxObjectsOneGivesOneObject) {
  SceneConfig cfg;
  cfg.max_objects = 1;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    EXPECT_EQ(generate_scene(seed, cfg).objects.size(), 1u);
  }
}

TEST(GenerateScene, SatisfiesInvariants) {
  const SceneConfig cfg;
  int ok = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    try {
      const Scene s = generate_scene(seed, cfg);
      EXPECT_NO_THROW(validate(s, cfg.overlap_cap));
      EXPECT_GE(static_cast<int>(s.objects.size()), cfg.min_objects);
      EXPECT_LE(static_cast<int>(s.objects.size()), cfg.max_objects);
      ++ok;
    } catch (const SceneGenerationError&) {
    }
  }
  EXPECT_GT(ok, 950);
}

TEST(GenerateScene, EveryShapeAndColorAppears) {
  SceneConfig cfg;
  std::set<Shape> shapes;
  std::set<Color> colors;
  std::set<SizeClass> sizes;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    try {
      for (const auto& o : generate_scene(seed, cfg).objects) {
        shapes.insert(o.shape);
        colors.insert(o.color);
        sizes.insert(o.size);
      }
    } catch (const SceneGenerationError&) {
    }
  }
  EXPECT_EQ(shapes.size(), kShapes.size());
  EXPECT_EQ(colors.size(), kColors.size());
  EXPECT_EQ(sizes.size(), kSizes.size());
}

TEST(GenerateScene, OverDenseConfigFails) {
  SceneConfig cfg;
  cfg.min_objects = cfg.max_objects = 8;
  cfg.overlap_cap = 0.0;
  cfg.occlusion_cap = 0.0;
  cfg.canvas = {32, 32};
  cfg.max_retries = 5;
  int failures = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    try {
      generate_scene(seed, cfg);
    } catch (const SceneGenerationError&) {
      ++failures;
    }
  }
  EXPECT_GT(failures, 0);
}

TEST(SceneConfig, RejectsInvalid) {
  SceneConfig c;
  c.canvas = {31, 64};
  EXPECT_THROW(validate(c), ValidationError);
  c = {};
  c.max_objects = 9;
  EXPECT_THROW(validate(c), ValidationError);
  c = {};
  c.max_objects = 0;
  EXPECT_THROW(validate(c), ValidationError);
  c = {};
  c.overlap_cap = 1.5;
  EXPECT_THROW(validate(c), ValidationError);
}

TEST(Render, EmptySceneRegionsAreBackground) {
  const Scene s = scene_of({object(Shape::square, Color::red, {10, 10, 20, 20})});
  const Image img = render(s);
  EXPECT_EQ(img.at(0, 0, 0), kBackground.r);
  EXPECT_EQ(img.at(63, 63, 2), kBackground.b);
  EXPECT_EQ(img.at(15, 15, 0), rgb(Color::red).r);
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      const bool in = x >= 10 && x < 20 && y >= 10 && y < 20;
      if (!in) {
        EXPECT_EQ(img.at(y, x, 1), kBackground.g);
      }
    }
  }
}

TEST(Render, BitIdenticalAcrossCalls) {
  const Scene s = generate_scene(5, {});
  EXPECT_EQ(render(s), render(s));
}

TEST(Render, PaintedPixelsStayInsideBoxes) {
  // Single-object scenes so every painted pixel has an unambiguous owner.
  SceneConfig cfg;
  cfg.max_objects = 1;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const Scene s = generate_scene(seed, cfg);
    const Image img = render(s);
    int x1 = 1 << 20, y1 = 1 << 20, x2 = -1, y2 = -1;
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        if (img.at(y, x, 0) != kBackground.r || img.at(y, x, 1) != kBackground.g ||
            img.at(y, x, 2) != kBackground.b) {
          x1 = std::min(x1, x);
          y1 = std::min(y1, y);
          x2 = std::max(x2, x + 1);
          y2 = std::max(y2, y + 1);
        }
      }
    }
    const BBox& b = s.objects[0].box;
    ASSERT_GE(x2, 0) << "nothing painted for seed " << seed;
    EXPECT_GE(x1, b.x1 - 1);
    EXPECT_GE(y1, b.y1 - 1);
    EXPECT_LE(x2, b.x2 + 1);
    EXPECT_LE(y2, b.y2 + 1);
  }
}

TEST(Expression, SingleObjectIsBareColorShape) {
  const Scene s = scene_of({object(Shape::triangle, Color::blue, {4, 4, 20, 20})});
  EXPECT_EQ(generate_expression(s, 0).text, "the blue triangle");
}

TEST(Expression, LeftSelectsSmallerXCenter) {
  const Scene s = scene_of({object(Shape::circle, Color::red, {40, 5, 56, 21}),
                            object(Shape::circle, Color::red, {5, 30, 21, 46})});
  const auto e = generate_expression(s, 1);
  EXPECT_EQ(e.text, "the left red circle");
  EXPECT_EQ(*match_expression(s, "the left red circle"), std::vector<std::size_t>{1});
  EXPECT_EQ(*match_expression(s, "the right red circle"), std::vector<std::size_t>{0});
}

TEST(Expression, UniqueColorOmitsQualifier) {
  const Scene s = scene_of({object(Shape::circle, Color::red, {40, 5, 56, 21}),
                            object(Shape::circle, Color::green, {5, 30, 21, 46})});
  EXPECT_EQ(generate_expression(s, 0).text, "the red circle");
  EXPECT_EQ(generate_expression(s, 1).text, "the green circle");
}

TEST(Expression, SizeBeforeQualifier) {
  const Scene s = scene_of({object(Shape::square, Color::red, {0, 0, 10, 10}),
                            object(Shape::square, Color::red, {30, 30, 55, 55})});
  EXPECT_EQ(generate_expression(s, 0).text, "the small red square");
}

TEST(Expression, IdenticalCoincidentObjectsFail) {
  const Scene s = scene_of({object(Shape::square, Color::red, {0, 0, 10, 10}),
                            object(Shape::square, Color::red, {0, 0, 10, 10})});
  EXPECT_THROW(generate_expression(s, 0), ExpressionError);
  EXPECT_THROW(generate_expression(s, 5), ValidationError);
}

TEST(Match, UnderConstrainedReturnsAll) {
  const Scene s = scene_of({object(Shape::circle, Color::red, {40, 5, 56, 21}),
                            object(Shape::circle, Color::green, {5, 30, 21, 46}),
                            object(Shape::square, Color::green, {5, 5, 15, 15})});
  EXPECT_EQ(*match_expression(s, "the circle"), (std::vector<std::size_t>{0, 1}));
}

TEST(Match, LargestSquareIsAreaArgmax) {
  const Scene s = scene_of({object(Shape::square, Color::red, {0, 0, 10, 10}),
                            object(Shape::square, Color::blue, {20, 20, 44, 44}),
                            object(Shape::square, Color::green, {45, 0, 61, 16}),
                            object(Shape::circle, Color::green, {0, 36, 28, 64})});
  EXPECT_EQ(*match_expression(s, "the largest square"), std::vector<std::size_t>{1});
  EXPECT_EQ(*match_expression(s, "the smallest square"), std::vector<std::size_t>{0});
}

TEST(Match, MiddleNeedsOddCountAndStrictMedian) {
  const Scene s = scene_of({object(Shape::square, Color::red, {0, 0, 10, 10}),
                            object(Shape::square, Color::red, {25, 30, 35, 40}),
                            object(Shape::square, Color::red, {50, 0, 60, 10})});
  EXPECT_EQ(*match_expression(s, "the middle square"), std::vector<std::size_t>{1});
  EXPECT_TRUE(match_expression(s, "the middle circle")->empty());
}

TEST(Match, OutOfGrammarIsNullopt) {
  const Scene s = scene_of({object(Shape::square, Color::red, {0, 0, 10, 10})});
  EXPECT_FALSE(match_expression(s, "a red square").has_value());
  EXPECT_FALSE(match_expression(s, "the red").has_value());
  EXPECT_FALSE(match_expression(s, "the square please").has_value());
  EXPECT_FALSE(match_expression(s, "").has_value());
  EXPECT_TRUE(match_expression(s, "The  Red   SQUARE").has_value());
}

TEST(Expression, OracleConsistencyOverCorpus) {
  const SceneConfig cfg;
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; checked < 10000; ++seed) {
    Scene s;
    try {
      s = generate_scene(seed, cfg);
    } catch (const SceneGenerationError&) {
      continue;
    }
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      RefExpression e;
      try {
        e = generate_expression(s, i);
      } catch (const ExpressionError&) {
        continue;
      }
      const auto m = match_expression(s, e.text);
      ASSERT_TRUE(m.has_value()) << e.text;
      ASSERT_EQ(*m, std::vector<std::size_t>{i}) << e.text << " seed " << seed;
      ++checked;
    }
  }
}

TEST(Expression, SpatialQualifiersAreTruthful) {
  const SceneConfig cfg;
  std::set<Qualifier> seen;
  for (std::uint64_t seed = 0; seed < 3000; ++seed) {
    Scene s;
    try {
      s = generate_scene(seed, cfg);
    } catch (const SceneGenerationError&) {
      continue;
    }
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      RefExpression e;
      try {
        e = generate_expression(s, i);
      } catch (const ExpressionError&) {
        continue;
      }
      if (e.qualifier == Qualifier::none) continue;
      seen.insert(e.qualifier);
      auto q = *parse_expression(e.text);
      q.qualifier = Qualifier::none;
      const auto peers = match(s, q);
      const BBox& t = s.objects[i].box;
      for (std::size_t j : peers) {
        if (j == i) continue;
        const BBox& o = s.objects[j].box;
        switch (e.qualifier) {
          case Qualifier::left: EXPECT_LT(t.center_x(), o.center_x()); break;
          case Qualifier::right: EXPECT_GT(t.center_x(), o.center_x()); break;
          case Qualifier::top: EXPECT_LT(t.center_y(), o.center_y()); break;
          case Qualifier::bottom: EXPECT_GT(t.center_y(), o.center_y()); break;
          case Qualifier::largest: EXPECT_GT(t.area(), o.area()); break;
          case Qualifier::smallest: EXPECT_LT(t.area(), o.area()); break;
          case Qualifier::middle: EXPECT_NE(t.center_x(), o.center_x()); break;
          case Qualifier::none: break;
        }
      }
      if (e.qualifier == Qualifier::middle) {
        std::size_t less = 0, more = 0;
        for (std::size_t j : peers) {
          if (s.objects[j].box.center_x() < t.center_x()) ++less;
          if (s.objects[j].box.center_x() > t.center_x()) ++more;
        }
        EXPECT_EQ(less, more);
      }
    }
  }
  EXPECT_GE(seen.size(), 4u);
}
