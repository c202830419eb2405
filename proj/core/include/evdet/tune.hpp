#pragma once

#include <span>
#include <vector>

#include "evdet/dataset.hpp"
#include "evdet/detector.hpp"

namespace evdet {

// Calibration and self-training knobs. The confidence thresholds are
// per-class (class 0 and class 1), inclusive at the boundary.
struct TuneConfig {
  double tau_class0 = 0.6;
  double tau_class1 = 0.6;
  double tau_iou = 0.6;      // tracklet linking threshold
  int min_track_len = 6;     // tracks shorter than this are pruned
  double pseudo_weight = 1.0;
  double nms_iou = 0.5;
  int rounds = 1;
  int max_gap = 0;           // consecutive unmatched windows a track survives
};

struct TrackletEntry {
  int window_index = 0;
  Detection det;
};

struct Tracklet {
  int track_id = 0;
  std::vector<TrackletEntry> entries;  // window_index ascending
};

// Per sub-window pseudo labels, scores stripped.
struct PseudoLabelSet {
  std::vector<std::vector<GroundTruthBox>> per_window;
};

struct RoundStats {
  int round = 0;
  std::size_t label_count = 0;  // labels emitted into the training scope
  double mean_score = 0.0;      // mean detector score of those labels
};

// Runs detection over each sub-window: the window is voxelized and paired
// with the most recent frame at or before its start. Event-only mode ignores
// the frames.
std::vector<std::vector<Detection>> bootstrap(const ToyModel& model,
                                              const std::vector<Frame>& frames,
                                              std::span<const Window> windows,
                                              const EventStream& stream, DetectMode mode);

// Union of forward and backward detections per sub-window. Backward index j
// corresponds to forward index (count - 1 - j) because the reversed stream
// runs through the same window positions in opposite order.
std::vector<std::vector<Detection>> bidirectional_merge(
    const std::vector<std::vector<Detection>>& forward,
    const std::vector<std::vector<Detection>>& backward);

// Classwise greedy non-maximum suppression. Candidates are ordered by score
// descending with deterministic tie-breaks (box corner tuple, then class id);
// a kept box suppresses same-class boxes with IoU > threshold.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold);

// Keeps detections with score >= the threshold of their class.
std::vector<Detection> confidence_filter(std::vector<Detection> dets, const TuneConfig& config);

// Greedy IoU linking across consecutive sub-windows: per window, candidate
// pairs (active track, detection) of the same class with IoU >= tau_iou are
// taken in IoU-descending order (deterministic tie-breaks). Unmatched
// detections start new tracks; tracks unmatched for more than max_gap
// consecutive windows retire.
std::vector<Tracklet> link_tracklets(const std::vector<std::vector<Detection>>& per_window,
                                     double tau_iou, int max_gap = 0);

// Drops tracklets shorter than min_track_len and emits the surviving
// detections as per-window labels with scores stripped. track_id is the
// tracklet id.
PseudoLabelSet prune_and_emit(std::span<const Tracklet> tracklets, const TuneConfig& config,
                              std::size_t window_count);

// Combined objective: sum of ground-truth losses plus pseudo_weight times the
// sum of pseudo-label losses.
double tune_loss(std::span<const LossBreakdown> gt_losses,
                 std::span<const LossBreakdown> pseudo_losses, double pseudo_weight);

// Generates the calibrated pseudo labels for one labeled window: forward and
// reversed bootstrap, merge, NMS, confidence filter, linking, pruning.
// reverse_flips_polarity controls the polarity convention of the reversed
// stream.
PseudoLabelSet pseudo_labels_for_window(const ToyModel& model, const SceneSequence& scene,
                                        const Window& window, const FrequencyPlan& plan,
                                        const TuneConfig& config, DetectMode mode,
                                        bool reverse_flips_polarity, RoundStats* stats);

// Cyclic self-training: each round regenerates pseudo labels with the current
// model, then runs one epoch where every sample trains on its ground truth
// (last sub-window) plus the weighted pseudo labels of sub-windows
// 0..ratio-2. Gate noise draws come from rng; pseudo_weight == 0 skips the
// pseudo passes entirely so the round degenerates to plain sparse training.
// Per-round statistics are appended to stats_out when provided.
ToyModel self_train(ToyModel model, const TrainDataset& dataset, const TuneConfig& config,
                    DetectMode mode, double lr, Rng& rng,
                    std::vector<RoundStats>* stats_out = nullptr,
                    bool reverse_flips_polarity = true);

}  // namespace evdet
