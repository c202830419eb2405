#include "evdet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace evdet {

const Frame& frame_at_or_before(const std::vector<Frame>& frames, std::int64_t t) {
  if (frames.empty()) throw std::invalid_argument("frame_at_or_before: no frames");
  const auto it = std::upper_bound(frames.begin(), frames.end(), t,
                                   [](std::int64_t v, const Frame& f) { return v < f.t; });
  if (it == frames.begin())
    throw std::invalid_argument("frame_at_or_before: no frame at or before timestamp");
  return *(it - 1);
}

TrainDataset build_dataset(const SceneSequence& scene, const FrequencyPlan& plan,
                           int time_bins) {
  const std::int64_t period = std::llround(1e6 / plan.base_hz);
  if (scene.frames.size() < 2)
    throw std::invalid_argument("build_dataset: scene needs at least two frames");
  if (scene.frames[1].t - scene.frames[0].t != period)
    throw std::invalid_argument("build_dataset: frame spacing does not match plan base_hz");

  TrainDataset ds;
  ds.scene = &scene;
  ds.plan = plan;
  ds.spec = {time_bins, scene.config.sensor_h, scene.config.sensor_w};
  for (std::size_t k = 0; k + 1 < scene.frames.size(); ++k) {
    LabeledWindow sample;
    sample.window = {scene.frames[k].t, scene.frames[k + 1].t};
    sample.input_frame = &scene.frames[k];
    sample.gts = gt_at(scene.config, scene.frames[k + 1].t);
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

LossBreakdown train_epoch(ToyModel& model, const TrainDataset& dataset, TrainRegime regime,
                          DetectMode mode, double lr, Rng& training_rng, Rng& sampling_rng) {
  if (dataset.samples.empty()) throw std::invalid_argument("train_epoch: empty dataset");
  LossBreakdown mean;
  for (const LabeledWindow& lw : dataset.samples) {
    const auto windows = slice_frequencies(lw.window, dataset.plan);
    TrainSample sample;
    sample.frame = lw.input_frame;
    sample.gts = lw.gts;
    if (regime == TrainRegime::sparse) {
      sample.tensor_a = voxelize(dataset.scene->events, last_subwindow(windows), dataset.spec);
    } else {
      sample.tensor_a = voxelize(dataset.scene->events, lw.window, dataset.spec);
      sample.tensor_b =
          voxelize(dataset.scene->events, sample_subwindow(windows, sampling_rng), dataset.spec);
    }
    const LossBreakdown loss = train_step(model, {&sample, 1}, lr, training_rng, mode);
    mean.iou_loss += loss.iou_loss;
    mean.cls_loss += loss.cls_loss;
    mean.reg_loss += loss.reg_loss;
    mean.fuse_reg += loss.fuse_reg;
    mean.total += loss.total;
  }
  const double inv = 1.0 / static_cast<double>(dataset.samples.size());
  mean.iou_loss *= inv;
  mean.cls_loss *= inv;
  mean.reg_loss *= inv;
  mean.fuse_reg *= inv;
  mean.total *= inv;
  return mean;
}

}  // namespace evdet
