#pragma once

#include <vector>

#include "evdet/detector.hpp"
#include "evdet/events.hpp"
#include "evdet/synth.hpp"

namespace evdet {

// One labeled interval: the full base-frequency window ending at a label
// timestamp, the most recent frame at or before the window start, and the
// ground truth at the window end.
struct LabeledWindow {
  Window window;
  const Frame* input_frame = nullptr;
  std::vector<GroundTruthBox> gts;
};

struct TrainDataset {
  const SceneSequence* scene = nullptr;
  FrequencyPlan plan;
  VoxelSpec spec;
  std::vector<LabeledWindow> samples;
};

// Builds one sample per consecutive frame pair: window [t_k, t_k+1) paired
// with the frame at t_k and labels at t_k+1. The scene must outlive the
// dataset. Frame spacing must match the plan's base frequency.
TrainDataset build_dataset(const SceneSequence& scene, const FrequencyPlan& plan, int time_bins);

// Most recent frame at or before t; frames are sorted by timestamp.
const Frame& frame_at_or_before(const std::vector<Frame>& frames, std::int64_t t);

enum class TrainRegime {
  sparse,  // last sub-window events with ground truth labels
  dual,    // full window plus one random sub-window per sample
};

// One epoch of SGD over the dataset, one step per sample, in order.
// TrainRegime::sparse voxelizes the last sub-window of each sample;
// TrainRegime::dual voxelizes the full window and a random sub-window drawn
// from sampling_rng. Gate noise comes from training_rng. Returns the mean
// loss over the epoch's steps.
LossBreakdown train_epoch(ToyModel& model, const TrainDataset& dataset, TrainRegime regime,
                          DetectMode mode, double lr, Rng& training_rng, Rng& sampling_rng);

}  // namespace evdet
