#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "evdet/boxes.hpp"
#include "evdet/events.hpp"

namespace evdet {

// Piecewise-linear center trajectory; positions clamp to the first/last knot
// outside the knot range.
struct TrajectoryKnot {
  std::int64_t t = 0;
  double x = 0.0;
  double y = 0.0;
};

struct ObjectSpec {
  int class_id = 0;
  double width = 0.0;   // box size, pixels
  double height = 0.0;
  double intensity = 1.0;  // log-intensity contrast against the background
  std::int64_t spawn_t = 0;    // alive over [spawn_t, despawn_t)
  std::int64_t despawn_t = 0;
  std::vector<TrajectoryKnot> trajectory;
};

struct SceneConfig {
  std::string name = "scene";
  int sensor_w = 0;
  int sensor_h = 0;
  std::int64_t duration = 0;  // microseconds
  double frame_hz = 0.0;
  double contrast_threshold = 0.0;  // C
  double background_intensity = 0.0;
  double noise_rate = 0.0;  // events per pixel per second
  std::uint64_t seed = 0;
  std::int64_t micro_step = 100;  // intensity integration step, microseconds
  std::vector<ObjectSpec> objects;
};

// Log-intensity image sampled at one timestamp, row-major H x W.
struct Frame {
  std::int64_t t = 0;
  std::vector<float> pixels;
};

struct SceneSequence {
  SceneConfig config;
  EventStream events;
  std::vector<Frame> frames;
};

void validate(const SceneConfig& config);

// Object center at time t.
void trajectory_at(const ObjectSpec& obj, std::int64_t t, double& x, double& y);

// Simulates the sensor on the micro-step grid: per-pixel integrate-and-fire
// against the contrast threshold with residual carry, plus uniform Poisson
// background noise, plus frames sampled at exact frame timestamps.
SceneSequence generate_scene(const SceneConfig& config);

// Ground-truth boxes at an arbitrary timestamp (0 <= t <= duration). Boxes
// are clipped to the sensor; objects fully outside are omitted. track_id is
// the index of the object in the config.
std::vector<GroundTruthBox> gt_at(const SceneConfig& config, std::int64_t t);

// Linear interpolation between two annotation sets matched by track_id.
// Objects present in only one endpoint are dropped.
std::vector<GroundTruthBox> interpolate_labels(std::span<const GroundTruthBox> a,
                                               std::span<const GroundTruthBox> b,
                                               double fraction);

// Canned scenes used by the CLI examples and the end-to-end tests.
SceneConfig standard_benchmark_scene(std::uint64_t seed);
// Two same-class objects, one of which despawns between two frame times.
SceneConfig despawn_scene(std::uint64_t seed);

}  // namespace evdet
