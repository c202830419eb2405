#include "evdet/boxes.hpp"

#include <algorithm>
#include <stdexcept>
#include <tuple>

namespace evdet {

double iou(const Box& a, const Box& b) {
  if (!(a.area() > 0.0) || !(b.area() > 0.0))
    throw std::invalid_argument("iou: boxes must have positive area");
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

bool detection_score_order(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  const auto ka = std::make_tuple(a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max, a.class_id);
  const auto kb = std::make_tuple(b.box.x_min, b.box.y_min, b.box.x_max, b.box.y_max, b.class_id);
  return ka < kb;
}

}  // namespace evdet
