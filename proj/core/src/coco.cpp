#include "evdet/coco.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "evdet/dataset.hpp"
#include "evdet/tune.hpp"

namespace evdet {

namespace {

struct RankedDet {
  double score = 0.0;
  int image = 0;
  int rank = 0;  // position in the per-image sorted order
  bool tp = false;
  bool ignored = false;
};

}  // namespace

std::optional<double> average_precision(std::span<const EvalImage> images, int class_id,
                                        double iou_threshold, const AreaRange& range) {
  if (!(iou_threshold > 0.0) || !(iou_threshold <= 1.0))
    throw std::invalid_argument("average_precision: iou_threshold must be in (0, 1]");

  std::size_t n_gt = 0;
  std::vector<RankedDet> ranked;
  for (int img = 0; img < static_cast<int>(images.size()); ++img) {
    std::vector<const GroundTruthBox*> gts;
    for (const GroundTruthBox& g : images[img].gts)
      if (g.class_id == class_id) gts.push_back(&g);
    for (const GroundTruthBox* g : gts)
      if (range.contains(g->box.area())) ++n_gt;

    std::vector<Detection> dets;
    for (const Detection& d : images[img].dets)
      if (d.class_id == class_id) dets.push_back(d);
    std::sort(dets.begin(), dets.end(), detection_score_order);

    std::vector<char> matched(gts.size(), 0);
    for (int rank = 0; rank < static_cast<int>(dets.size()); ++rank) {
      const Detection& d = dets[rank];
      int best = -1;
      double best_iou = 0.0;
      for (int gi = 0; gi < static_cast<int>(gts.size()); ++gi) {
        if (matched[gi]) continue;
        const double v = iou(d.box, gts[gi]->box);
        if (v >= iou_threshold && v > best_iou) {
          best = gi;
          best_iou = v;
        }
      }
      RankedDet r{d.score, img, rank, false, false};
      if (best >= 0) {
        matched[best] = 1;
        if (range.contains(gts[best]->box.area()))
          r.tp = true;
        else
          r.ignored = true;
      }
      ranked.push_back(r);
    }
  }

  if (n_gt == 0) return std::nullopt;

  std::sort(ranked.begin(), ranked.end(), [](const RankedDet& a, const RankedDet& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return a.rank < b.rank;
  });

  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (const RankedDet& r : ranked) {
    if (r.ignored) continue;
    if (r.tp)
      ++tp;
    else
      ++fp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }
  if (precision.empty()) return 0.0;

  // Monotone envelope: precision at a recall level is the max over >= recalls.
  for (std::size_t j = precision.size() - 1; j-- > 0;)
    precision[j] = std::max(precision[j], precision[j + 1]);

  double ap = 0.0;
  for (int i = 0; i <= 100; ++i) {
    const double r = static_cast<double>(i) / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) ap += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return ap / 101.0;
}

EvalBundle coco_map(std::span<const EvalImage> images) {
  std::set<int> classes;
  for (const EvalImage& img : images)
    for (const GroundTruthBox& g : img.gts) classes.insert(g.class_id);

  EvalBundle bundle;
  if (classes.empty()) return bundle;

  double map_sum = 0.0, ap50_sum = 0.0, ap75_sum = 0.0;
  std::size_t map_n = 0;
  struct StratumAcc {
    double sum = 0.0;
    std::size_t n = 0;
  };
  StratumAcc small, medium, large;

  for (int c : classes) {
    double class_sum = 0.0;
    for (double thr : kIouThresholds) {
      const double ap = average_precision(images, c, thr, kAreaAll).value();
      class_sum += ap;
      map_sum += ap;
      ++map_n;
      if (thr == 0.50) ap50_sum += ap;
      if (thr == 0.75) ap75_sum += ap;
      if (const auto v = average_precision(images, c, thr, kAreaSmall)) {
        small.sum += *v;
        ++small.n;
      }
      if (const auto v = average_precision(images, c, thr, kAreaMedium)) {
        medium.sum += *v;
        ++medium.n;
      }
      if (const auto v = average_precision(images, c, thr, kAreaLarge)) {
        large.sum += *v;
        ++large.n;
      }
    }
    bundle.per_class[c] = class_sum / static_cast<double>(kIouThresholds.size());
  }

  const double n_classes = static_cast<double>(classes.size());
  bundle.map = map_sum / static_cast<double>(map_n);
  bundle.ap50 = ap50_sum / n_classes;
  bundle.ap75 = ap75_sum / n_classes;
  if (small.n > 0) bundle.ap_s = small.sum / static_cast<double>(small.n);
  if (medium.n > 0) bundle.ap_m = medium.sum / static_cast<double>(medium.n);
  if (large.n > 0) bundle.ap_l = large.sum / static_cast<double>(large.n);
  return bundle;
}

std::vector<GroundTruthBox> labels_at(const SceneSequence& scene, std::int64_t t, GtMode mode) {
  if (mode == GtMode::exact) return gt_at(scene.config, t);

  const auto& frames = scene.frames;
  if (frames.empty()) throw std::invalid_argument("labels_at: scene has no frames");
  if (t < frames.front().t || t > frames.back().t)
    throw std::invalid_argument("labels_at: instant outside the annotated range");
  // Last frame at or before t; annotations live only at frame instants.
  std::size_t k = 0;
  while (k + 1 < frames.size() && frames[k + 1].t <= t) ++k;
  if (frames[k].t == t) return gt_at(scene.config, t);
  const auto a = gt_at(scene.config, frames[k].t);
  const auto b = gt_at(scene.config, frames[k + 1].t);
  const double s = static_cast<double>(t - frames[k].t) /
                   static_cast<double>(frames[k + 1].t - frames[k].t);
  return interpolate_labels(a, b, s);
}

std::vector<double> offsets_for_frequencies(std::span<const double> freqs_hz,
                                            std::int64_t delta_t_us) {
  if (delta_t_us <= 0) throw std::invalid_argument("offsets_for_frequencies: bad interval");
  std::vector<double> offsets;
  offsets.reserve(freqs_hz.size());
  for (double hz : freqs_hz) {
    if (!(hz > 0.0)) throw std::invalid_argument("offsets_for_frequencies: bad frequency");
    const double offset = 1.0 - 1e6 / (hz * static_cast<double>(delta_t_us));
    if (offset < -1e-9)
      throw std::invalid_argument("offsets_for_frequencies: frequency below the frame rate");
    offsets.push_back(std::max(0.0, offset));
  }
  for (std::size_t i = 1; i < offsets.size(); ++i)
    if (offsets[i] <= offsets[i - 1])
      throw std::invalid_argument("offsets_for_frequencies: frequencies must increase");
  return offsets;
}

FrequencySweep frequency_sweep(const ToyModel& model, const SceneSequence& scene,
                               std::span<const double> offsets, GtMode gt_mode,
                               DetectMode detect_mode, double eval_nms_iou) {
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    if (offsets[i] < 0.0 || offsets[i] > 1.0)
      throw std::invalid_argument("frequency_sweep: offsets must lie in [0, 1]");
    if (i > 0 && offsets[i] <= offsets[i - 1])
      throw std::invalid_argument("frequency_sweep: offsets must increase strictly");
  }
  if (scene.frames.size() < 3)
    throw std::invalid_argument("frequency_sweep: scene needs at least three frames");

  const std::int64_t delta = scene.frames[1].t - scene.frames[0].t;
  const VoxelSpec spec{model.config().time_bins, scene.config.sensor_h, scene.config.sensor_w};

  FrequencySweep sweep;
  sweep.delta_t_us = delta;
  sweep.gt_mode = gt_mode;
  for (const double o : offsets) {
    const std::int64_t len =
        std::max<std::int64_t>(1, std::llround((1.0 - o) * static_cast<double>(delta)));
    const std::int64_t shift = std::llround(o * static_cast<double>(delta));

    std::vector<EvalImage> images;
    images.reserve(scene.frames.size() - 2);
    for (std::size_t k = 1; k + 1 < scene.frames.size(); ++k) {
      const std::int64_t t = scene.frames[k].t + shift;
      const Window window{t - len, t};
      const EventTensor tensor = voxelize(scene.events, window, spec);
      const Frame* frame = nullptr;
      if (detect_mode == DetectMode::fused)
        frame = &frame_at_or_before(scene.frames, window.t1);
      EvalImage img;
      img.dets = nms(detect(model, tensor, frame, detect_mode, t), eval_nms_iou);
      img.gts = labels_at(scene, t, gt_mode);
      images.push_back(std::move(img));
    }
    sweep.points.push_back({o, 1e6 / static_cast<double>(len), coco_map(images)});
  }
  return sweep;
}

}  // namespace evdet
