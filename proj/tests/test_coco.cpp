#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "evdet/boxes.hpp"
#include "evdet/coco.hpp"
#include "evdet/rng.hpp"

using namespace evdet;

namespace {

Detection det(double x0, double y0, double x1, double y1, int cls, double score) {
  return {{x0, y0, x1, y1}, cls, score, 0};
}

GroundTruthBox gt(double x0, double y0, double x1, double y1, int cls, int track = 0) {
  return {{x0, y0, x1, y1}, cls, track};
}

// Oracle: recomputes the average precision from scratch. Every detection of
// the class is labeled by a fresh greedy per-image match, then for each of
// the 101 recall levels the best precision over ALL ranking prefixes whose
// recall reaches the level is taken by brute force. No envelope, no binary
// search, no shared cumulative pass.
std::optional<double> ap_oracle(std::span<const EvalImage> images, int class_id,
                                double iou_threshold, const AreaRange& range) {
  struct Labeled {
    double score;
    int image;
    int rank;
    int kind;  // 0 fp, 1 tp, 2 matched-to-ignored
  };
  std::vector<Labeled> all;
  std::size_t n_gt = 0;

  for (int img = 0; img < static_cast<int>(images.size()); ++img) {
    std::vector<GroundTruthBox> gts;
    for (const GroundTruthBox& g : images[img].gts)
      if (g.class_id == class_id) gts.push_back(g);
    for (const GroundTruthBox& g : gts)
      if (range.contains(g.box.area())) ++n_gt;

    std::vector<Detection> dets;
    for (const Detection& d : images[img].dets)
      if (d.class_id == class_id) dets.push_back(d);
    std::sort(dets.begin(), dets.end(), detection_score_order);

    std::vector<bool> used(gts.size(), false);
    for (int rank = 0; rank < static_cast<int>(dets.size()); ++rank) {
      int best = -1;
      double best_v = 0.0;
      for (int gi = 0; gi < static_cast<int>(gts.size()); ++gi) {
        if (used[gi]) continue;
        const double v = iou(dets[rank].box, gts[gi].box);
        if (v >= iou_threshold && v > best_v) {
          best = gi;
          best_v = v;
        }
      }
      int kind = 0;
      if (best >= 0) {
        used[best] = true;
        kind = range.contains(gts[best].box.area()) ? 1 : 2;
      }
      all.push_back({dets[rank].score, img, rank, kind});
    }
  }

  if (n_gt == 0) return std::nullopt;

  std::sort(all.begin(), all.end(), [](const Labeled& a, const Labeled& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return a.rank < b.rank;
  });

  double ap = 0.0;
  for (int level = 0; level <= 100; ++level) {
    const double r = static_cast<double>(level) / 100.0;
    double best_precision = 0.0;
    std::size_t tp = 0, fp = 0;
    for (const Labeled& l : all) {
      if (l.kind == 1) ++tp;
      if (l.kind == 0) ++fp;
      if (tp + fp == 0) continue;
      const double recall = static_cast<double>(tp) / static_cast<double>(n_gt);
      if (recall >= r)
        best_precision =
            std::max(best_precision, static_cast<double>(tp) / static_cast<double>(tp + fp));
    }
    ap += best_precision;
  }
  return ap / 101.0;
}

}  // namespace

TEST_CASE("average precision matches the prefix-rematch oracle") {
  Rng rng(2024);
  const AreaRange* ranges[4] = {&kAreaAll, &kAreaSmall, &kAreaMedium, &kAreaLarge};
  const double thresholds[3] = {0.5, 0.75, 0.3};

  for (int iter = 0; iter < 500; ++iter) {
    std::vector<EvalImage> images(1 + rng.uniform_int(0, 2));
    for (EvalImage& img : images) {
      const int n_gt = static_cast<int>(rng.uniform_int(0, 5));
      for (int i = 0; i < n_gt; ++i) {
        const double s = static_cast<double>(rng.uniform_int(1, 3));
        const double scale = s * s + (s > 2 ? 5.0 : 0.0);  // spans all area strata
        const double x0 = rng.uniform(0.0, 24.0);
        const double y0 = rng.uniform(0.0, 24.0);
        img.gts.push_back(gt(x0, y0, x0 + scale * rng.uniform(3.0, 13.0),
                             y0 + scale * rng.uniform(3.0, 13.0),
                             static_cast<int>(rng.uniform_int(0, 1)), i));
      }
      const int n_det = static_cast<int>(rng.uniform_int(0, 7));
      for (int i = 0; i < n_det; ++i) {
        // Half the detections jitter a ground truth; half are free boxes.
        Box b;
        if (!img.gts.empty() && rng.uniform_int(0, 1) == 0) {
          const Box& base = img.gts[static_cast<std::size_t>(
                                        rng.uniform_int(0, static_cast<std::int64_t>(
                                                               img.gts.size()) - 1))]
                                .box;
          const double jx = rng.uniform(-3.0, 3.0);
          const double jy = rng.uniform(-3.0, 3.0);
          b = {base.x_min + jx, base.y_min + jy, base.x_max + jx * 0.5, base.y_max + jy * 0.5};
        } else {
          const double x0 = rng.uniform(0.0, 24.0);
          const double y0 = rng.uniform(0.0, 24.0);
          b = {x0, y0, x0 + rng.uniform(3.0, 13.0), y0 + rng.uniform(3.0, 13.0)};
        }
        img.dets.push_back({b, static_cast<int>(rng.uniform_int(0, 1)),
                            0.125 * static_cast<double>(rng.uniform_int(1, 8)), 0});
      }
    }

    const int cls = static_cast<int>(rng.uniform_int(0, 1));
    const double thr = thresholds[rng.uniform_int(0, 2)];
    const AreaRange& range = *ranges[rng.uniform_int(0, 3)];

    const auto got = average_precision(images, cls, thr, range);
    const auto want = ap_oracle(images, cls, thr, range);
    REQUIRE(got.has_value() == want.has_value());
    if (got) REQUIRE(std::abs(*got - *want) <= 1e-9);
  }
}

TEST_CASE("perfect detections give full average precision") {
  std::vector<EvalImage> images(2);
  images[0].gts = {gt(0, 0, 10, 10, 0), gt(20, 20, 32, 28, 1)};
  images[1].gts = {gt(5, 5, 17, 13, 0)};
  for (EvalImage& img : images)
    for (const GroundTruthBox& g : img.gts)
      img.dets.push_back({g.box, g.class_id, 0.9, 0});

  CHECK(*average_precision(images, 0, 0.5, kAreaAll) == doctest::Approx(1.0));
  CHECK(*average_precision(images, 1, 0.95, kAreaAll) == doctest::Approx(1.0));

  const EvalBundle bundle = coco_map(images);
  CHECK(*bundle.map == doctest::Approx(1.0));
  CHECK(*bundle.ap50 == doctest::Approx(1.0));
  CHECK(*bundle.ap75 == doctest::Approx(1.0));
  REQUIRE(bundle.per_class.size() == 2);
  CHECK(bundle.per_class.at(0) == doctest::Approx(1.0));
  CHECK(bundle.per_class.at(1) == doctest::Approx(1.0));
}

TEST_CASE("no detections give zero average precision") {
  std::vector<EvalImage> images(1);
  images[0].gts = {gt(0, 0, 10, 10, 0)};
  CHECK(*average_precision(images, 0, 0.5, kAreaAll) == 0.0);
}

TEST_CASE("no ground truth leaves the average precision undefined") {
  std::vector<EvalImage> images(1);
  images[0].dets = {det(0, 0, 10, 10, 0, 0.9)};
  CHECK(!average_precision(images, 0, 0.5, kAreaAll).has_value());

  // Class 1 has ground truth, class 0 does not; only class 1 is evaluated.
  images[0].gts = {gt(0, 0, 10, 10, 1)};
  const EvalBundle bundle = coco_map(images);
  REQUIRE(bundle.per_class.size() == 1);
  CHECK(bundle.per_class.count(1) == 1);
}

TEST_CASE("a known four-detection ranking gives the hand-computed value") {
  // Three ground truths, four detections in score order:
  // hit, miss, hit, miss -> precisions 1, 1/2, 2/3, 2/4 at recalls
  // 1/3, 1/3, 2/3, 2/3.
  std::vector<EvalImage> images(1);
  images[0].gts = {gt(0, 0, 10, 10, 0), gt(20, 0, 30, 10, 0), gt(40, 0, 50, 10, 0)};
  images[0].dets = {
      det(0, 0, 10, 10, 0, 0.9),    // tp
      det(60, 0, 70, 10, 0, 0.8),   // fp
      det(20, 0, 30, 10, 0, 0.7),   // tp
      det(80, 0, 90, 10, 0, 0.6),   // fp
  };
  const double want = (34.0 * 1.0 + 33.0 * (2.0 / 3.0)) / 101.0;
  CHECK(*average_precision(images, 0, 0.5, kAreaAll) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("the iou threshold brackets a partial overlap") {
  // Detection shifted to overlap the ground truth at iou 0.6.
  std::vector<EvalImage> images(1);
  images[0].gts = {gt(0, 0, 10, 10, 0)};
  images[0].dets = {det(0, 2.5, 10, 12.5, 0, 0.9)};
  const double v = iou(images[0].dets[0].box, images[0].gts[0].box);
  CHECK(v == doctest::Approx(0.6).epsilon(1e-12));

  CHECK(*average_precision(images, 0, 0.50, kAreaAll) == doctest::Approx(1.0));
  CHECK(*average_precision(images, 0, 0.60, kAreaAll) == doctest::Approx(1.0));  // inclusive
  CHECK(*average_precision(images, 0, 0.75, kAreaAll) == 0.0);
}

TEST_CASE("average precision is invariant to order-preserving score scaling") {
  Rng rng(5);
  std::vector<EvalImage> images(1);
  for (int i = 0; i < 5; ++i) {
    const double x0 = 12.0 * i;
    images[0].gts.push_back(gt(x0, 0, x0 + 10, 10, 0, i));
  }
  for (int i = 0; i < 8; ++i) {
    const double x0 = rng.uniform(0.0, 55.0);
    images[0].dets.push_back(det(x0, 0, x0 + 10, 10, 0, rng.uniform(0.1, 0.9)));
  }
  const double base = *average_precision(images, 0, 0.5, kAreaAll);
  for (Detection& d : images[0].dets) d.score *= 0.5;
  CHECK(*average_precision(images, 0, 0.5, kAreaAll) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("a match to an out-of-range ground truth is neither hit nor miss") {
  // One small and one large ground truth; the higher-scored detection covers
  // the large one. Under the small-area range that match must drop out of
  // the precision denominator instead of counting as a miss.
  std::vector<EvalImage> images(1);
  images[0].gts = {gt(0, 0, 100, 100, 0), gt(200, 0, 210, 10, 0, 1)};
  images[0].dets = {det(0, 0, 100, 100, 0, 0.9), det(200, 0, 210, 10, 0, 0.8)};

  CHECK(*average_precision(images, 0, 0.5, kAreaSmall) == doctest::Approx(1.0));
  CHECK(*average_precision(images, 0, 0.5, kAreaLarge) == doctest::Approx(1.0));
  CHECK(*average_precision(images, 0, 0.5, kAreaAll) == doctest::Approx(1.0));
}

TEST_CASE("area strata are half-open at the boundaries") {
  CHECK(kAreaSmall.contains(0.0));
  CHECK(kAreaSmall.contains(1023.999));
  CHECK(!kAreaSmall.contains(1024.0));
  CHECK(kAreaMedium.contains(1024.0));
  CHECK(!kAreaMedium.contains(9216.0));
  CHECK(kAreaLarge.contains(9216.0));
  CHECK(kAreaLarge.contains(1e9));
  CHECK(!kAreaAll.contains(-1.0));
}

TEST_CASE("undefined strata stay undefined in the bundle") {
  // Only small ground truth anywhere: medium and large have no reference.
  std::vector<EvalImage> images(1);
  images[0].gts = {gt(0, 0, 10, 10, 0)};
  images[0].dets = {det(0, 0, 10, 10, 0, 0.9)};
  const EvalBundle bundle = coco_map(images);
  CHECK(bundle.ap_s.has_value());
  CHECK(!bundle.ap_m.has_value());
  CHECK(!bundle.ap_l.has_value());
  CHECK(*bundle.ap_s == doctest::Approx(1.0));

  const EvalBundle empty = coco_map({});
  CHECK(!empty.map.has_value());
  CHECK(empty.per_class.empty());
}

TEST_CASE("bad iou thresholds are rejected") {
  std::vector<EvalImage> images(1);
  images[0].gts = {gt(0, 0, 10, 10, 0)};
  CHECK_THROWS_AS(average_precision(images, 0, 0.0, kAreaAll), std::invalid_argument);
  CHECK_THROWS_AS(average_precision(images, 0, 1.1, kAreaAll), std::invalid_argument);
  CHECK_NOTHROW(average_precision(images, 0, 1.0, kAreaAll));
}
