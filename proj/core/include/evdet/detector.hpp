#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "evdet/boxes.hpp"
#include "evdet/events.hpp"
#include "evdet/fusion.hpp"
#include "evdet/synth.hpp"

namespace evdet {

// Two-branch convolutional detector at desk scale. Each branch runs two
// stride-2 3x3 stages (stage1_channels -> stage2_channels); the branches are
// gated and fused at both scales, the scale-0 map is average-pooled onto the
// scale-1 grid, and a 3x3 head predicts per-cell objectness, class logits and
// box offsets on the stride-4 grid.
struct ToyModelConfig {
  int input_height = 0;  // divisible by 4
  int input_width = 0;
  int time_bins = 1;     // event tensor T; event branch input has 2 * T channels
  int num_classes = 2;
  int stage1_channels = 8;
  int stage2_channels = 16;
  double lambda_reg = 0.01;
  bool noise_per_map = false;
  double score_threshold = 0.01;  // decode emission threshold

  bool operator==(const ToyModelConfig&) const = default;
};

inline constexpr int kHeadStride = 4;

enum class DetectMode { fused, event_only };

struct LossBreakdown {
  double iou_loss = 0.0;
  double cls_loss = 0.0;
  double reg_loss = 0.0;
  double fuse_reg = 0.0;
  double total = 0.0;
};

// Raw head outputs on the detection grid.
struct HeadOutputs {
  FeatureMap obj;  // (1, gh, gw) logits
  FeatureMap cls;  // (num_classes, gh, gw) logits
  FeatureMap box;  // (4, gh, gw) offsets: tx, ty, tw, th
};

class ToyModel {
 public:
  struct TensorInfo {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t count = 0;
  };

  ToyModel(const ToyModelConfig& config, Rng& init_rng);
  // Uninitialized-parameter constructor for checkpoint loading.
  ToyModel(const ToyModelConfig& config, std::vector<double> params);

  const ToyModelConfig& config() const { return config_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  const std::vector<TensorInfo>& layout() const { return layout_; }
  std::size_t param_count() const { return params_.size(); }

  int grid_height() const { return config_.input_height / kHeadStride; }
  int grid_width() const { return config_.input_width / kHeadStride; }

  GateParams gate_params(int scale) const;
  void set_gate_params(int scale, const GateParams& params);

 private:
  ToyModelConfig config_;
  std::vector<double> params_;
  std::vector<TensorInfo> layout_;
};

// One training sample: the frame paired with the event window(s) and the
// ground truth at the window end. tensor_b is the optional second-frequency
// tensor; when present the two fused paths are summed before the head.
struct TrainSample {
  const Frame* frame = nullptr;
  EventTensor tensor_a;
  std::optional<EventTensor> tensor_b;
  std::vector<GroundTruthBox> gts;
};

// Pre-drawn gate noise for one forward pass, in gate call order. Keeping the
// draws explicit makes a forward pass a pure function of (params, inputs,
// noise), which the finite-difference checks rely on.
struct StepNoise {
  std::vector<std::vector<double>> per_gate;
};

StepNoise draw_step_noise(const ToyModel& model, bool dual_frequency, DetectMode mode,
                          bool training, Rng& rng);

// Loss of one sample. When grad_out is non-null it receives d(total)/d(params)
// accumulated in place (buffer must be param-sized). Training mode applies
// gate noise from `noise`; eval mode ignores it.
LossBreakdown sample_loss(const ToyModel& model, const TrainSample& sample,
                          const StepNoise* noise, DetectMode mode, bool training,
                          std::vector<double>* grad_out);

// Standalone loss on raw head outputs, plus its backward flavor. fuse_reg is
// added to the total as-is.
LossBreakdown detection_loss(const HeadOutputs& preds, std::span<const GroundTruthBox> gts,
                             double fuse_reg = 0.0);
LossBreakdown detection_loss_grad(const HeadOutputs& preds, std::span<const GroundTruthBox> gts,
                                  double fuse_reg, HeadOutputs& d_preds);

// Grid decode at threshold config.score_threshold: per cell, the best class
// by logit (ties to the lowest id), score = sigmoid(obj) * sigmoid(cls).
// Box centers go through a sigmoid, sizes through an exp, both scaled by the
// stride. `t` stamps the emitted detections.
std::vector<Detection> detect(const ToyModel& model, const EventTensor& tensor,
                              const Frame* frame, DetectMode mode, std::int64_t t);

// One SGD step over the batch (mean gradient). Returns the mean loss at the
// pre-update parameters. Training noise is drawn per sample from rng; sigma
// is projected back to >= 0 after the update.
LossBreakdown train_step(ToyModel& model, std::span<const TrainSample> batch, double lr,
                         Rng& rng, DetectMode mode);

}  // namespace evdet
