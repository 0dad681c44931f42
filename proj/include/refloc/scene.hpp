#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "refloc/error.hpp"
#include "refloc/geometry.hpp"
#include "refloc/image.hpp"
#include "refloc/rng.hpp"

namespace refloc {

enum class Shape : std::uint8_t { circle, square, triangle };
enum class Color : std::uint8_t { red, green, blue, yellow, purple };
enum class SizeClass : std::uint8_t { small, medium, large };

/// Spatial or size-ordinal disambiguator applied after attribute filtering.
enum class Qualifier : std::uint8_t { none, left, right, top, bottom, largest, smallest, middle };

inline constexpr std::array<Shape, 3> kShapes{Shape::circle, Shape::square, Shape::triangle};
inline constexpr std::array<Color, 5> kColors{Color::red, Color::green, Color::blue,
                                              Color::yellow, Color::purple};
inline constexpr std::array<SizeClass, 3> kSizes{SizeClass::small, SizeClass::medium,
                                                 SizeClass::large};
inline constexpr std::array<Qualifier, 7> kQualifiers{
    Qualifier::left,    Qualifier::right,    Qualifier::top,   Qualifier::bottom,
    Qualifier::largest, Qualifier::smallest, Qualifier::middle};
inline constexpr std::array<Qualifier, 8> kAllQualifiers{
    Qualifier::none,   Qualifier::left,    Qualifier::right,    Qualifier::top,
    Qualifier::bottom, Qualifier::largest, Qualifier::smallest, Qualifier::middle};

inline std::string_view name(Shape s) {
  constexpr std::array<std::string_view, 3> n{"circle", "square", "triangle"};
  return n[static_cast<std::size_t>(s)];
}
inline std::string_view name(Color c) {
  constexpr std::array<std::string_view, 5> n{"red", "green", "blue", "yellow", "purple"};
  return n[static_cast<std::size_t>(c)];
}
inline std::string_view name(SizeClass s) {
  constexpr std::array<std::string_view, 3> n{"small", "medium", "large"};
  return n[static_cast<std::size_t>(s)];
}
inline std::string_view name(Qualifier q) {
  constexpr std::array<std::string_view, 8> n{"none",    "left",     "right",  "top", "bottom",
                                              "largest", "smallest", "middle"};
  return n[static_cast<std::size_t>(q)];
}

template <class Enum, std::size_t N>
std::optional<Enum> parse_enum(std::string_view word, const std::array<Enum, N>& values) {
  for (Enum v : values) {
    if (name(v) == word) return v;
  }
  return std::nullopt;
}

/// Side length limits (pixels) of each size band. Boxes are square, so the
/// area bands [min^2, max^2] are disjoint and ordered small < medium < large.
struct SizeBand {
  int min_side;
  int max_side;
};

inline constexpr std::array<SizeBand, 3> kSizeBands{SizeBand{8, 11}, SizeBand{14, 19},
                                                    SizeBand{22, 28}};

inline SizeClass size_class_for_area(double area) {
  if (area <= kSizeBands[0].max_side * kSizeBands[0].max_side) return SizeClass::small;
  if (area <= kSizeBands[1].max_side * kSizeBands[1].max_side) return SizeClass::medium;
  return SizeClass::large;
}

struct SceneObject {
  Shape shape = Shape::circle;
  Color color = Color::red;
  SizeClass size = SizeClass::small;
  BBox box;

  /// Class label used in detection captions, e.g. "red circle".
  std::string class_name() const {
    return std::string(name(color)) + " " + std::string(name(shape));
  }

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct Scene {
  Canvas canvas;
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;

  friend bool operator==(const Scene&, const Scene&) = default;
};

struct SceneConfig {
  Canvas canvas{64, 64};
  int min_objects = 1;
  int max_objects = 5;
  /// Pairwise IoU cap between object boxes.
  double overlap_cap = 0.3;
  /// Cap on intersection / area of the smaller box, so no object is hidden.
  double occlusion_cap = 0.25;
  int max_retries = 200;

  friend bool operator==(const SceneConfig&, const SceneConfig&) = default;
};

class SceneGenerationError : public Error {
 public:
  explicit SceneGenerationError(const std::string& what) : Error(ExitCode::failure, what) {}
};

inline void validate(const SceneConfig& c) {
  if (c.canvas.width < 32 || c.canvas.height < 32) {
    throw ValidationError("scene config: canvas must be at least 32x32");
  }
  if (c.max_objects < 1 || c.max_objects > 8) {
    throw ValidationError("scene config: max_objects must be in [1, 8]");
  }
  if (c.min_objects < 1 || c.min_objects > c.max_objects) {
    throw ValidationError("scene config: min_objects must be in [1, max_objects]");
  }
  if (!(c.overlap_cap >= 0 && c.overlap_cap <= 1) || !(c.occlusion_cap >= 0 && c.occlusion_cap <= 1)) {
    throw ValidationError("scene config: overlap caps must be in [0, 1]");
  }
  if (c.max_retries < 1) throw ValidationError("scene config: max_retries must be positive");
  const int largest = kSizeBands[2].max_side;
  if (c.canvas.width < largest || c.canvas.height < largest) {
    throw ValidationError("scene config: canvas smaller than the large size band");
  }
}

inline bool overlaps_too_much(const BBox& a, const BBox& b, const SceneConfig& c) {
  if (iou(a, b) > c.overlap_cap) return true;
  const double smaller = std::min(a.area(), b.area());
  return smaller > 0 && intersection_area(a, b) / smaller > c.occlusion_cap;
}

/// Deterministic in (seed, config). Throws SceneGenerationError when an
/// object cannot be placed within max_retries.
inline Scene generate_scene(std::uint64_t seed, const SceneConfig& config) {
  validate(config);
  Rng rng(seed);
  Scene scene;
  scene.canvas = config.canvas;
  scene.seed = seed;
  const auto count = static_cast<int>(rng.uniform_int(config.min_objects, config.max_objects));
  for (int i = 0; i < count; ++i) {
    SceneObject obj;
    obj.shape = kShapes[rng.uniform_int(0, kShapes.size() - 1)];
    obj.color = kColors[rng.uniform_int(0, kColors.size() - 1)];
    obj.size = kSizes[rng.uniform_int(0, kSizes.size() - 1)];
    const SizeBand band = kSizeBands[static_cast<std::size_t>(obj.size)];
    bool placed = false;
    for (int attempt = 0; attempt < config.max_retries && !placed; ++attempt) {
      const auto side = static_cast<int>(rng.uniform_int(band.min_side, band.max_side));
      const auto x = static_cast<int>(rng.uniform_int(0, config.canvas.width - side));
      const auto y = static_cast<int>(rng.uniform_int(0, config.canvas.height - side));
      const BBox box{double(x), double(y), double(x + side), double(y + side)};
      placed = std::none_of(scene.objects.begin(), scene.objects.end(), [&](const SceneObject& o) {
        return overlaps_too_much(o.box, box, config);
      });
      if (placed) obj.box = box;
    }
    if (!placed) {
      throw SceneGenerationError("generate_scene: could not place object " + std::to_string(i) +
                                 " for seed " + std::to_string(seed));
    }
    scene.objects.push_back(obj);
  }
  return scene;
}

inline void validate(const Scene& scene, double overlap_cap = 1.0) {
  if (scene.objects.empty()) throw ValidationError("scene has no objects");
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& o = scene.objects[i];
    if (!is_valid(o.box, scene.canvas)) throw ValidationError("object box outside canvas");
    if (size_class_for_area(o.box.area()) != o.size) {
      throw ValidationError("object size class inconsistent with box area");
    }
    for (std::size_t j = i + 1; j < scene.objects.size(); ++j) {
      if (iou(o.box, scene.objects[j].box) > overlap_cap) {
        throw ValidationError("object overlap exceeds cap");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Rendering

struct Rgb {
  float r, g, b;
};

// Channel values are multiples of 1/255 so 8-bit PNG storage is lossless.
inline constexpr Rgb kBackground{26 / 255.f, 26 / 255.f, 26 / 255.f};

inline Rgb rgb(Color c) {
  switch (c) {
    case Color::red: return {230 / 255.f, 30 / 255.f, 30 / 255.f};
    case Color::green: return {30 / 255.f, 200 / 255.f, 50 / 255.f};
    case Color::blue: return {40 / 255.f, 80 / 255.f, 240 / 255.f};
    case Color::yellow: return {240 / 255.f, 225 / 255.f, 30 / 255.f};
    case Color::purple: return {160 / 255.f, 40 / 255.f, 190 / 255.f};
  }
  return kBackground;
}

/// Whether the pixel whose center is (px, py) belongs to the object.
inline bool covers(const SceneObject& o, double px, double py) {
  const BBox& b = o.box;
  if (px < b.x1 || px > b.x2 || py < b.y1 || py > b.y2) return false;
  switch (o.shape) {
    case Shape::square: return true;
    case Shape::circle: {
      const double r = 0.5 * b.width();
      const double dx = px - b.center_x(), dy = py - b.center_y();
      return dx * dx + dy * dy <= r * r;
    }
    case Shape::triangle: {
      // Apex at top center, base along the bottom edge.
      const double t = (py - b.y1) / b.height();
      const double half = 0.5 * b.width() * t;
      return std::abs(px - b.center_x()) <= half;
    }
  }
  return false;
}

/// Objects are painted in list order, later ones on top.
inline Image render(const Scene& scene) {
  Image img(scene.canvas.height, scene.canvas.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      Rgb c = kBackground;
      for (const auto& o : scene.objects) {
        if (covers(o, x + 0.5, y + 0.5)) c = rgb(o.color);
      }
      img.at(y, x, 0) = c.r;
      img.at(y, x, 1) = c.g;
      img.at(y, x, 2) = c.b;
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Referring expressions
//
// Grammar:  "the" [qualifier] [size] [color] shape
// Attributes filter the scene; the qualifier then selects among the filtered
// objects by x-center (left/right/middle), y-center (top/bottom) or area
// (largest/smallest). Extremes must be strict to select anything unique.

struct ExpressionQuery {
  Qualifier qualifier = Qualifier::none;
  std::optional<SizeClass> size;
  std::optional<Color> color;
  Shape shape = Shape::circle;

  friend bool operator==(const ExpressionQuery&, const ExpressionQuery&) = default;
};

struct RefExpression {
  std::string text;
  std::size_t target_index = 0;
  Qualifier qualifier = Qualifier::none;
};

inline std::string to_text(const ExpressionQuery& q) {
  std::string s = "the";
  if (q.qualifier != Qualifier::none) s += " " + std::string(name(q.qualifier));
  if (q.size) s += " " + std::string(name(*q.size));
  if (q.color) s += " " + std::string(name(*q.color));
  s += " " + std::string(name(q.shape));
  return s;
}

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    if (ch == ' ' || ch == '\t' || ch == '\n') {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

/// Parses text under the template grammar; nullopt for out-of-grammar text.
inline std::optional<ExpressionQuery> parse_expression(std::string_view text) {
  const auto words = split_words(text);
  if (words.size() < 2 || words.front() != "the") return std::nullopt;
  ExpressionQuery q;
  std::size_t i = 1;
  if (auto qual = parse_enum(words[i], kQualifiers)) {
    q.qualifier = *qual;
    ++i;
  }
  if (i < words.size()) {
    if (auto sz = parse_enum(words[i], kSizes)) {
      q.size = *sz;
      ++i;
    }
  }
  if (i < words.size()) {
    if (auto col = parse_enum(words[i], kColors)) {
      q.color = *col;
      ++i;
    }
  }
  if (i + 1 != words.size()) return std::nullopt;
  auto shape = parse_enum(words[i], kShapes);
  if (!shape) return std::nullopt;
  q.shape = *shape;
  return q;
}

inline std::vector<std::size_t> match(const Scene& scene, const ExpressionQuery& q) {
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& o = scene.objects[i];
    if (o.shape != q.shape) continue;
    if (q.color && o.color != *q.color) continue;
    if (q.size && o.size != *q.size) continue;
    cand.push_back(i);
  }
  if (q.qualifier == Qualifier::none || cand.empty()) return cand;

  auto key = [&](std::size_t i) {
    const BBox& b = scene.objects[i].box;
    switch (q.qualifier) {
      case Qualifier::left:
      case Qualifier::middle: return b.center_x();
      case Qualifier::right: return -b.center_x();
      case Qualifier::top: return b.center_y();
      case Qualifier::bottom: return -b.center_y();
      case Qualifier::smallest: return b.area();
      case Qualifier::largest: return -b.area();
      case Qualifier::none: break;
    }
    return 0.0;
  };

  if (q.qualifier == Qualifier::middle) {
    // Median by x-center of an odd-sized set (at least three objects).
    if (cand.size() < 3 || cand.size() % 2 == 0) return {};
    std::vector<std::size_t> sorted = cand;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
    const std::size_t mid = sorted.size() / 2;
    const double k = key(sorted[mid]);
    // Ties with a neighbour make the median position ambiguous.
    if (key(sorted[mid - 1]) < k && k < key(sorted[mid + 1])) return {sorted[mid]};
    return {};
  }

  double best = key(cand.front());
  for (std::size_t i : cand) best = std::min(best, key(i));
  std::vector<std::size_t> out;
  for (std::size_t i : cand) {
    if (key(i) == best) out.push_back(i);
  }
  return out;
}

/// All objects consistent with `text`, or nullopt if the text is outside the
/// template grammar.
inline std::optional<std::vector<std::size_t>> match_expression(const Scene& scene,
                                                                std::string_view text) {
  auto q = parse_expression(text);
  if (!q) return std::nullopt;
  return match(scene, *q);
}

class ExpressionError : public Error {
 public:
  explicit ExpressionError(const std::string& what) : Error(ExitCode::failure, what) {}
};

/// Shortest template expression that singles out the target: color + shape,
/// then adding size, then one qualifier, then qualifier + size.
inline RefExpression generate_expression(const Scene& scene, std::size_t target) {
  if (target >= scene.objects.size()) {
    throw ValidationError("generate_expression: target index out of range");
  }
  const SceneObject& t = scene.objects[target];
  std::vector<ExpressionQuery> candidates;
  ExpressionQuery base;
  base.shape = t.shape;
  base.color = t.color;
  candidates.push_back(base);
  ExpressionQuery sized = base;
  sized.size = t.size;
  candidates.push_back(sized);
  for (Qualifier q : kQualifiers) {
    ExpressionQuery c = base;
    c.qualifier = q;
    candidates.push_back(c);
  }
  for (Qualifier q : kQualifiers) {
    ExpressionQuery c = sized;
    c.qualifier = q;
    candidates.push_back(c);
  }
  for (const auto& c : candidates) {
    const auto m = match(scene, c);
    if (m.size() == 1 && m.front() == target) {
      return {to_text(c), target, c.qualifier};
    }
  }
  throw ExpressionError("generate_expression: no template disambiguates object " +
                        std::to_string(target));
}

/// Qualifier category of an expression ("none" when absent or unparseable).
inline Qualifier qualifier_of(std::string_view text) {
  auto q = parse_expression(text);
  return q ? q->qualifier : Qualifier::none;
}

}  // namespace refloc
