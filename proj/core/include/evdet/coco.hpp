#pragma once

#include <array>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "evdet/detector.hpp"
#include "evdet/synth.hpp"

namespace evdet {

// Detections and ground truth for one evaluation instant. The precision-
// recall curve is built over all images of a run jointly.
struct EvalImage {
  std::vector<Detection> dets;
  std::vector<GroundTruthBox> gts;
};

// Half-open area interval [lo, hi) in squared pixels. Ground truth outside
// the range is ignored: it never counts toward recall, and detections
// matched to it are neither true nor false positives.
struct AreaRange {
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();

  bool contains(double area) const { return area >= lo && area < hi; }
};

inline constexpr AreaRange kAreaAll{};
inline constexpr AreaRange kAreaSmall{0.0, 32.0 * 32.0};
inline constexpr AreaRange kAreaMedium{32.0 * 32.0, 96.0 * 96.0};
inline constexpr AreaRange kAreaLarge{96.0 * 96.0, std::numeric_limits<double>::infinity()};

inline constexpr std::array<double, 10> kIouThresholds = {0.50, 0.55, 0.60, 0.65, 0.70,
                                                          0.75, 0.80, 0.85, 0.90, 0.95};

// Average precision for one class at one IoU threshold over one area range.
// Detections are matched per image in score-descending order (deterministic
// tie-breaks) to the unmatched ground-truth box of the same class with the
// highest IoU >= threshold, ties to the lowest box index. The curve uses
// 101-point interpolation on the recall grid 0.00:0.01:1.00. Returns nullopt
// when the range holds no ground truth of the class.
std::optional<double> average_precision(std::span<const EvalImage> images, int class_id,
                                        double iou_threshold, const AreaRange& range);

// Aggregated metrics. A field is nullopt when its stratum has no ground
// truth anywhere. per_class holds only classes with at least one box.
struct EvalBundle {
  std::optional<double> map;   // mean over IoU thresholds and classes
  std::optional<double> ap50;
  std::optional<double> ap75;
  std::optional<double> ap_s;
  std::optional<double> ap_m;
  std::optional<double> ap_l;
  std::map<int, double> per_class;  // mean over IoU thresholds, all areas
};

EvalBundle coco_map(std::span<const EvalImage> images);

enum class GtMode { exact, interpolated };

// Ground truth at an arbitrary instant. Exact mode queries the scene
// analytically; interpolated mode lerps between the two surrounding frame
// annotations matched by track id, which drops objects absent at either end.
std::vector<GroundTruthBox> labels_at(const SceneSequence& scene, std::int64_t t, GtMode mode);

struct SweepPoint {
  double offset = 0.0;        // fraction of the frame interval past the frame
  double frequency_hz = 0.0;  // 1e6 / window length in microseconds
  EvalBundle bundle;
};

struct FrequencySweep {
  std::int64_t delta_t_us = 0;  // frame interval
  GtMode gt_mode = GtMode::exact;
  std::vector<SweepPoint> points;  // offset ascending
};

// Converts requested effective frequencies (Hz) to sweep offsets for a frame
// interval of delta_t_us: offset = 1 - (1e6 / hz) / delta_t. Frequencies must
// be >= the frame rate and strictly increasing.
std::vector<double> offsets_for_frequencies(std::span<const double> freqs_hz,
                                            std::int64_t delta_t_us);

// Evaluates the model across sub-frame offsets. For each offset o and each
// interior frame k, detections come from the event window ending at
// frame_k.t + o * delta_t with length (1 - o) * delta_t (floored at 1 us),
// post-processed with NMS, and are scored against labels_at that instant.
// Offsets must lie in [0, 1] and increase strictly.
FrequencySweep frequency_sweep(const ToyModel& model, const SceneSequence& scene,
                               std::span<const double> offsets, GtMode gt_mode,
                               DetectMode detect_mode, double eval_nms_iou = 0.65);

}  // namespace evdet
