#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

#include "refloc/error.hpp"

namespace refloc {

/// Upper bound of the relative coordinate scale: box corners are expressed
/// as integers in [0, kCoordScale] relative to the image extent.
inline constexpr int kCoordScale = 1000;

struct Canvas {
  int width = 64;
  int height = 64;

  friend bool operator==(const Canvas&, const Canvas&) = default;
};

/// Axis-aligned box in absolute pixels; (x1, y1) is the upper-left corner.
struct BBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }

  friend bool operator==(const BBox&, const BBox&) = default;
};

/// Box in linguistic coordinates: each corner normalized to [0, 1000].
struct QuantizedBox {
  int x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  friend bool operator==(const QuantizedBox&, const QuantizedBox&) = default;
};

inline std::string to_string(const BBox& b) {
  std::ostringstream os;
  os << "BBox(" << b.x1 << ", " << b.y1 << ", " << b.x2 << ", " << b.y2 << ")";
  return os.str();
}

inline bool is_valid(const Canvas& c) { return c.width >= 1 && c.height >= 1; }

inline bool is_valid(const BBox& b, const Canvas& c) {
  const bool finite = std::isfinite(b.x1) && std::isfinite(b.y1) &&
                      std::isfinite(b.x2) && std::isfinite(b.y2);
  return finite && is_valid(c) && b.x1 <= b.x2 && b.y1 <= b.y2 && b.x1 >= 0 &&
         b.y1 >= 0 && b.x2 <= c.width && b.y2 <= c.height;
}

inline bool is_valid(const QuantizedBox& q) {
  auto in_range = [](int v) { return v >= 0 && v <= kCoordScale; };
  return in_range(q.x1) && in_range(q.y1) && in_range(q.x2) &&
         in_range(q.y2) && q.x1 <= q.x2 && q.y1 <= q.y2;
}

/// round(v / extent * 1000) with halves rounded away from zero.
inline int quantize_coord(double v, int extent) {
  return static_cast<int>(std::round(v / extent * kCoordScale));
}

inline double dequantize_coord(int q, int extent) {
  return static_cast<double>(q) / kCoordScale * extent;
}

/// Maps a pixel box to relative integer coordinates. Throws ValidationError
/// for boxes that violate the canvas invariants (malformed annotation).
inline QuantizedBox quantize(const BBox& box, const Canvas& canvas) {
  if (!is_valid(box, canvas)) {
    throw ValidationError("quantize: invalid box " + to_string(box) +
                          " for canvas " + std::to_string(canvas.width) + "x" +
                          std::to_string(canvas.height));
  }
  return {quantize_coord(box.x1, canvas.width),
          quantize_coord(box.y1, canvas.height),
          quantize_coord(box.x2, canvas.width),
          quantize_coord(box.y2, canvas.height)};
}

inline BBox dequantize(const QuantizedBox& q, const Canvas& canvas) {
  if (!is_valid(q) || !is_valid(canvas)) {
    throw ValidationError("dequantize: invalid quantized box");
  }
  return {dequantize_coord(q.x1, canvas.width),
          dequantize_coord(q.y1, canvas.height),
          dequantize_coord(q.x2, canvas.width),
          dequantize_coord(q.y2, canvas.height)};
}

inline double intersection_area(const BBox& a, const BBox& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

/// Intersection over union. A zero-area union yields 0.
inline double iou(const BBox& a, const BBox& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0) return 0.0;
  return inter / uni;
}

}  // namespace refloc
