#include <doctest.h>

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "evdet/coco.hpp"
#include "evdet/dataset.hpp"
#include "evdet/detector.hpp"
#include "evdet/events.hpp"
#include "evdet/rng.hpp"
#include "evdet/synth.hpp"
#include "evdet/tune.hpp"

using namespace evdet;

namespace {

SceneConfig sweep_scene() {
  SceneConfig c;
  c.name = "sweep";
  c.sensor_w = 16;
  c.sensor_h = 16;
  c.duration = 150000;
  c.frame_hz = 20.0;
  c.contrast_threshold = 0.3;
  c.noise_rate = 0.0;
  c.seed = 11;
  ObjectSpec o;
  o.class_id = 0;
  o.width = 6.0;
  o.height = 4.0;
  o.intensity = 1.0;
  o.spawn_t = 0;
  o.despawn_t = c.duration + 1;
  o.trajectory = {{0, 4.0, 8.0}, {150000, 12.0, 8.0}};
  c.objects.push_back(o);
  return c;
}

ToyModelConfig sweep_model_config() {
  ToyModelConfig cfg;
  cfg.input_height = 16;
  cfg.input_width = 16;
  cfg.time_bins = 1;
  cfg.num_classes = 2;
  cfg.stage1_channels = 2;
  cfg.stage2_channels = 3;
  cfg.lambda_reg = 0.01;
  return cfg;
}

// All-zero parameters make every grid cell fire at score 1/4, which keeps the
// evaluation side of the sweep nontrivial without training anything.
ToyModel zero_model(const ToyModelConfig& cfg) {
  Rng rng(1);
  const ToyModel proto(cfg, rng);
  return ToyModel(cfg, std::vector<double>(proto.param_count(), 0.0));
}

void require_same_bundle(const EvalBundle& a, const EvalBundle& b) {
  REQUIRE(a.map == b.map);
  REQUIRE(a.ap50 == b.ap50);
  REQUIRE(a.ap75 == b.ap75);
  REQUIRE(a.ap_s == b.ap_s);
  REQUIRE(a.ap_m == b.ap_m);
  REQUIRE(a.ap_l == b.ap_l);
  REQUIRE(a.per_class == b.per_class);
}

}  // namespace

TEST_CASE("requested frequencies invert to sweep offsets") {
  const std::int64_t delta = 50000;  // 20 Hz frame interval

  const std::vector<double> freqs = {20.0, 40.0, 180.0};
  const auto offsets = offsets_for_frequencies(freqs, delta);
  REQUIRE(offsets.size() == 3);
  REQUIRE(offsets[0] == 0.0);
  REQUIRE(offsets[1] == 0.5);
  REQUIRE(offsets[2] == doctest::Approx(8.0 / 9.0).epsilon(1e-12));

  // A hair below the frame rate lands within the rounding tolerance and
  // clamps to exactly zero instead of failing.
  const std::vector<double> near = {20.0 / (1.0 + 5e-10), 40.0};
  REQUIRE(offsets_for_frequencies(near, delta)[0] == 0.0);

  const std::vector<double> slow = {19.0};
  REQUIRE_THROWS_AS(offsets_for_frequencies(slow, delta), std::invalid_argument);

  const std::vector<double> equal = {40.0, 40.0};
  REQUIRE_THROWS_AS(offsets_for_frequencies(equal, delta), std::invalid_argument);
  const std::vector<double> decreasing = {80.0, 40.0};
  REQUIRE_THROWS_AS(offsets_for_frequencies(decreasing, delta), std::invalid_argument);

  const std::vector<double> one = {20.0};
  REQUIRE_THROWS_AS(offsets_for_frequencies(one, 0), std::invalid_argument);
  const std::vector<double> zero_hz = {0.0};
  REQUIRE_THROWS_AS(offsets_for_frequencies(zero_hz, delta), std::invalid_argument);
}

TEST_CASE("the sweep at offset zero is the plain whole-interval evaluation") {
  const SceneSequence scene = generate_scene(sweep_scene());
  REQUIRE(scene.frames.size() == 4);
  const ToyModel model = zero_model(sweep_model_config());
  const VoxelSpec spec{1, 16, 16};

  for (DetectMode mode : {DetectMode::fused, DetectMode::event_only}) {
    const std::vector<double> offsets = {0.0};
    const FrequencySweep sweep =
        frequency_sweep(model, scene, offsets, GtMode::exact, mode);
    REQUIRE(sweep.delta_t_us == 50000);
    REQUIRE(sweep.gt_mode == GtMode::exact);
    REQUIRE(sweep.points.size() == 1);
    REQUIRE(sweep.points[0].offset == 0.0);
    REQUIRE(sweep.points[0].frequency_hz == 20.0);

    // Interior frames only, each scored on the full preceding interval.
    std::vector<EvalImage> images;
    for (std::size_t k = 1; k + 1 < scene.frames.size(); ++k) {
      const std::int64_t t = scene.frames[k].t;
      const Window window{t - 50000, t};
      const EventTensor tensor = voxelize(scene.events, window, spec);
      const Frame* frame =
          mode == DetectMode::fused ? &frame_at_or_before(scene.frames, window.t1) : nullptr;
      EvalImage img;
      img.dets = nms(detect(model, tensor, frame, mode, t), 0.65);
      img.gts = labels_at(scene, t, GtMode::exact);
      REQUIRE(img.dets.size() == 16);  // the zero model fires on every cell
      REQUIRE_FALSE(img.gts.empty());
      images.push_back(std::move(img));
    }
    REQUIRE(images.size() == 2);
    require_same_bundle(sweep.points[0].bundle, coco_map(images));
  }
}

TEST_CASE("offset one floors the window at one microsecond") {
  const SceneSequence scene = generate_scene(sweep_scene());
  const ToyModel model = zero_model(sweep_model_config());

  const std::vector<double> offsets = {0.0, 1.0};
  const FrequencySweep sweep =
      frequency_sweep(model, scene, offsets, GtMode::exact, DetectMode::event_only);
  REQUIRE(sweep.points.size() == 2);
  REQUIRE(sweep.points[1].offset == 1.0);
  REQUIRE(sweep.points[1].frequency_hz == 1e6);  // one-microsecond window
  REQUIRE(sweep.points[1].bundle.map.has_value());

  // Intermediate offsets report the frequency of the rounded window length.
  const std::vector<double> third = {1.0 / 3.0};
  const FrequencySweep mid =
      frequency_sweep(model, scene, third, GtMode::exact, DetectMode::event_only);
  REQUIRE(mid.points[0].frequency_hz ==
          doctest::Approx(1e6 / 33333.0).epsilon(1e-12));
}

TEST_CASE("sweep offsets and scene shape are validated") {
  const SceneSequence scene = generate_scene(sweep_scene());
  const ToyModel model = zero_model(sweep_model_config());

  for (const std::vector<double> bad :
       {std::vector<double>{-0.1}, {1.5}, {0.2, 0.2}, {0.5, 0.4}}) {
    REQUIRE_THROWS_AS(
        frequency_sweep(model, scene, bad, GtMode::exact, DetectMode::event_only),
        std::invalid_argument);
  }

  SceneConfig short_cfg = sweep_scene();
  short_cfg.duration = 50000;  // only two frame instants
  const SceneSequence short_scene = generate_scene(short_cfg);
  REQUIRE(short_scene.frames.size() == 2);
  const std::vector<double> offsets = {0.0};
  REQUIRE_THROWS_AS(
      frequency_sweep(model, short_scene, offsets, GtMode::exact, DetectMode::event_only),
      std::invalid_argument);
}

TEST_CASE("interpolated ground truth drops objects that vanish by the next frame") {
  const SceneSequence scene = generate_scene(despawn_scene(5));
  const SceneConfig& cfg = scene.config;
  REQUIRE(cfg.objects[0].despawn_t == 1525000);

  // Mid-gap before the despawn instant: analytically the runner still exists,
  // but it is absent from the next frame annotation, so interpolation loses it.
  const auto exact_before = labels_at(scene, 1510000, GtMode::exact);
  const auto interp_before = labels_at(scene, 1510000, GtMode::interpolated);
  REQUIRE(exact_before.size() == 2);
  REQUIRE(interp_before.size() == 1);
  REQUIRE(interp_before[0].track_id == 1);

  // After the despawn instant both modes agree the runner is gone.
  REQUIRE(labels_at(scene, 1530000, GtMode::exact).size() == 1);
  REQUIRE(labels_at(scene, 1530000, GtMode::interpolated).size() == 1);

  // At a frame instant interpolation short-circuits to the exact labels.
  const auto exact_frame = labels_at(scene, 1500000, GtMode::exact);
  const auto interp_frame = labels_at(scene, 1500000, GtMode::interpolated);
  REQUIRE(exact_frame.size() == interp_frame.size());
  for (std::size_t i = 0; i < exact_frame.size(); ++i) {
    REQUIRE(interp_frame[i].box.x_min == exact_frame[i].box.x_min);
    REQUIRE(interp_frame[i].box.y_min == exact_frame[i].box.y_min);
    REQUIRE(interp_frame[i].box.x_max == exact_frame[i].box.x_max);
    REQUIRE(interp_frame[i].box.y_max == exact_frame[i].box.y_max);
    REQUIRE(interp_frame[i].class_id == exact_frame[i].class_id);
    REQUIRE(interp_frame[i].track_id == exact_frame[i].track_id);
  }

  // The surviving track is lerped between the two bracketing frames.
  const auto manual =
      interpolate_labels(gt_at(cfg, 1500000), gt_at(cfg, 1550000), 0.2);
  bool found = false;
  for (const GroundTruthBox& m : manual) {
    if (m.track_id != 1) continue;
    found = true;
    REQUIRE(interp_before[0].box.x_min == m.box.x_min);
    REQUIRE(interp_before[0].box.y_min == m.box.y_min);
    REQUIRE(interp_before[0].box.x_max == m.box.x_max);
    REQUIRE(interp_before[0].box.y_max == m.box.y_max);
  }
  REQUIRE(found);

  // Interpolation can only lose objects, never invent them.
  for (std::int64_t t = 1505000; t < 1550000; t += 5000)
    REQUIRE(labels_at(scene, t, GtMode::interpolated).size() <=
            labels_at(scene, t, GtMode::exact).size());

  REQUIRE_THROWS_AS(labels_at(scene, -1, GtMode::interpolated), std::invalid_argument);
  REQUIRE_THROWS_AS(labels_at(scene, cfg.duration + 1, GtMode::interpolated),
                    std::invalid_argument);
}

TEST_CASE("ground-truth modes agree when evaluation lands on frame instants") {
  const SceneSequence scene = generate_scene(sweep_scene());
  const ToyModel model = zero_model(sweep_model_config());

  const std::vector<double> offsets = {0.0};
  const FrequencySweep exact =
      frequency_sweep(model, scene, offsets, GtMode::exact, DetectMode::event_only);
  const FrequencySweep interp =
      frequency_sweep(model, scene, offsets, GtMode::interpolated, DetectMode::event_only);
  require_same_bundle(exact.points[0].bundle, interp.points[0].bundle);
}
