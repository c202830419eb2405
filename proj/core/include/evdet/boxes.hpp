#pragma once

#include <cstdint>

namespace evdet {

// Axis-aligned box in pixel coordinates, corners as (x_min, y_min, x_max, y_max).
struct Box {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  bool operator==(const Box&) const = default;
};

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;   // in [0, 1]
  std::int64_t t = 0;   // evaluation timestamp, microseconds
};

struct GroundTruthBox {
  Box box;
  int class_id = 0;
  int track_id = 0;
};

// Intersection-over-union. Degenerate (non-positive area) boxes are an
// argument error; disjoint boxes give 0, identical boxes give 1.
double iou(const Box& a, const Box& b);

// Strict weak order for ranking detections: score descending, ties broken by
// the corner tuple and then the class id so equal scores rank identically on
// every run.
bool detection_score_order(const Detection& a, const Detection& b);

}  // namespace evdet
