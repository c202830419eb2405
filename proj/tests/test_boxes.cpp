#include <doctest.h>

#include <algorithm>
#include <vector>

#include "evdet/boxes.hpp"

using namespace evdet;

TEST_CASE("iou of identical boxes is 1") {
  const Box b{1.0, 2.0, 5.0, 7.0};
  CHECK(iou(b, b) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("iou of disjoint boxes is 0") {
  CHECK(iou(Box{0, 0, 1, 1}, Box{2, 2, 3, 3}) == 0.0);
  CHECK(iou(Box{0, 0, 1, 1}, Box{1, 0, 2, 1}) == 0.0);  // touching edges
}

TEST_CASE("iou hand value") {
  // 2x2 boxes overlapping in a 1x2 strip: inter 2, union 8 - 2 = 6
  CHECK(iou(Box{0, 0, 2, 2}, Box{1, 0, 3, 2}) == doctest::Approx(2.0 / 6.0).epsilon(1e-12));
}

TEST_CASE("iou is symmetric") {
  const Box a{0, 0, 4, 3}, b{1, 1, 6, 2};
  CHECK(iou(a, b) == iou(b, a));
}

TEST_CASE("degenerate boxes are rejected") {
  CHECK_THROWS_AS(iou(Box{0, 0, 0, 1}, Box{0, 0, 1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(iou(Box{0, 0, 1, 1}, Box{2, 2, 2, 2}), std::invalid_argument);
}

TEST_CASE("detection ranking is a deterministic total order") {
  std::vector<Detection> dets{
      {{0, 0, 1, 1}, 1, 0.5, 0},
      {{0, 0, 1, 1}, 0, 0.5, 0},  // same box and score, lower class first
      {{2, 0, 3, 1}, 0, 0.9, 0},
      {{0, 1, 1, 2}, 0, 0.5, 0},
  };
  std::sort(dets.begin(), dets.end(), detection_score_order);
  CHECK(dets[0].score == 0.9);
  // ties: the corner tuple orders before the class id
  CHECK(dets[1].class_id == 0);
  CHECK(dets[1].box.y_min == 0.0);
  CHECK(dets[2].class_id == 1);
  CHECK(dets[2].box.y_min == 0.0);
  CHECK(dets[3].box.y_min == 1.0);
}
