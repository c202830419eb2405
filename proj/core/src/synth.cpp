#include "evdet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>

namespace evdet {

void validate(const SceneConfig& config) {
  if (config.sensor_w < 1 || config.sensor_h < 1)
    throw std::invalid_argument("scene: sensor dims must be positive");
  if (config.sensor_w > 0xffff || config.sensor_h > 0xffff)
    throw std::invalid_argument("scene: sensor dims exceed coordinate range");
  if (config.duration < 1) throw std::invalid_argument("scene: duration must be positive");
  if (!(config.frame_hz > 0.0)) throw std::invalid_argument("scene: frame_hz must be positive");
  if (!(config.contrast_threshold > 0.0))
    throw std::invalid_argument("scene: contrast_threshold must be positive");
  if (config.noise_rate < 0.0) throw std::invalid_argument("scene: noise_rate must be >= 0");
  if (config.micro_step < 1) throw std::invalid_argument("scene: micro_step must be positive");
  for (std::size_t i = 0; i < config.objects.size(); ++i) {
    const ObjectSpec& obj = config.objects[i];
    if (!(obj.width > 0.0) || !(obj.height > 0.0))
      throw std::invalid_argument("scene: object " + std::to_string(i) +
                                  " must have positive size");
    if (obj.spawn_t >= obj.despawn_t)
      throw std::invalid_argument("scene: object " + std::to_string(i) +
                                  " lifetime must be non-empty");
    if (obj.trajectory.empty())
      throw std::invalid_argument("scene: object " + std::to_string(i) + " needs a trajectory");
    for (std::size_t k = 1; k < obj.trajectory.size(); ++k)
      if (obj.trajectory[k].t <= obj.trajectory[k - 1].t)
        throw std::invalid_argument("scene: object " + std::to_string(i) +
                                    " trajectory knots must be strictly increasing in t");
  }
}

void trajectory_at(const ObjectSpec& obj, std::int64_t t, double& x, double& y) {
  const auto& knots = obj.trajectory;
  if (t <= knots.front().t) {
    x = knots.front().x;
    y = knots.front().y;
    return;
  }
  if (t >= knots.back().t) {
    x = knots.back().x;
    y = knots.back().y;
    return;
  }
  for (std::size_t k = 1; k < knots.size(); ++k) {
    if (t <= knots[k].t) {
      const TrajectoryKnot& a = knots[k - 1];
      const TrajectoryKnot& b = knots[k];
      const double f =
          static_cast<double>(t - a.t) / static_cast<double>(b.t - a.t);
      x = a.x + f * (b.x - a.x);
      y = a.y + f * (b.y - a.y);
      return;
    }
  }
  x = knots.back().x;
  y = knots.back().y;
}

namespace {

bool alive_at(const ObjectSpec& obj, std::int64_t t) {
  return t >= obj.spawn_t && t < obj.despawn_t;
}

// Log-intensity field at time t. Pixels take the value of the last listed
// object covering their center (painter's order), else the background.
void render_field(const SceneConfig& config, std::int64_t t, std::vector<double>& out) {
  const int W = config.sensor_w;
  const int H = config.sensor_h;
  std::fill(out.begin(), out.end(), config.background_intensity);
  for (const ObjectSpec& obj : config.objects) {
    if (!alive_at(obj, t)) continue;
    double cx = 0.0, cy = 0.0;
    trajectory_at(obj, t, cx, cy);
    const double x_min = cx - obj.width / 2.0;
    const double x_max = cx + obj.width / 2.0;
    const double y_min = cy - obj.height / 2.0;
    const double y_max = cy + obj.height / 2.0;
    const int ix0 = std::max(0, static_cast<int>(std::floor(x_min - 0.5)));
    const int ix1 = std::min(W - 1, static_cast<int>(std::ceil(x_max)));
    const int iy0 = std::max(0, static_cast<int>(std::floor(y_min - 0.5)));
    const int iy1 = std::min(H - 1, static_cast<int>(std::ceil(y_max)));
    const double value = config.background_intensity + obj.intensity;
    for (int iy = iy0; iy <= iy1; ++iy) {
      const double pcy = iy + 0.5;
      if (pcy < y_min || pcy >= y_max) continue;
      double* row = out.data() + static_cast<std::size_t>(iy) * W;
      for (int ix = ix0; ix <= ix1; ++ix) {
        const double pcx = ix + 0.5;
        if (pcx >= x_min && pcx < x_max) row[ix] = value;
      }
    }
  }
}

}  // namespace

SceneSequence generate_scene(const SceneConfig& config) {
  validate(config);
  const int W = config.sensor_w;
  const int H = config.sensor_h;
  const double C = config.contrast_threshold;
  const std::size_t n_px = static_cast<std::size_t>(W) * H;

  SceneSequence seq;
  seq.config = config;
  seq.events.sensor_w = static_cast<std::uint16_t>(W);
  seq.events.sensor_h = static_cast<std::uint16_t>(H);

  // Integrate-and-fire sweep over the micro-step grid. A pixel accumulates
  // log-intensity changes; every full multiple of C fires one event and the
  // residual carries over.
  std::vector<double> prev(n_px), cur(n_px), acc(n_px, 0.0);
  render_field(config, 0, prev);
  std::vector<Event>& events = seq.events.events;
  for (std::int64_t t = config.micro_step; t < config.duration; t += config.micro_step) {
    render_field(config, t, cur);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * W + x;
        const double delta = cur[i] - prev[i];
        if (delta == 0.0 && acc[i] == 0.0) continue;
        acc[i] += delta;
        const int n = static_cast<int>(std::floor(std::abs(acc[i]) / C));
        if (n > 0) {
          const std::int8_t pol = acc[i] > 0.0 ? 1 : -1;
          Event e;
          e.x = static_cast<std::uint16_t>(x);
          e.y = static_cast<std::uint16_t>(y);
          e.t = t;
          e.p = pol;
          for (int k = 0; k < n; ++k) events.push_back(e);
          acc[i] -= pol * n * C;
        }
      }
    }
    std::swap(prev, cur);
  }

  // Background noise: a uniform Poisson process over pixels and time, drawn
  // from its own substream so signal changes never shift the noise draws.
  if (config.noise_rate > 0.0) {
    Rng noise_rng = Rng(config.seed).substream("noise");
    const double lambda =
        config.noise_rate * n_px * (static_cast<double>(config.duration) / 1e6);
    const std::int64_t count = noise_rng.poisson(lambda);
    events.reserve(events.size() + count);
    for (std::int64_t k = 0; k < count; ++k) {
      Event e;
      e.t = noise_rng.uniform_int(0, config.duration - 1);
      e.x = static_cast<std::uint16_t>(noise_rng.uniform_below(W));
      e.y = static_cast<std::uint16_t>(noise_rng.uniform_below(H));
      e.p = noise_rng.uniform() < 0.5 ? std::int8_t{-1} : std::int8_t{1};
      events.push_back(e);
    }
  }

  // Signal events are generated in time order; the stable sort interleaves
  // noise while keeping ties in generation order.
  std::stable_sort(events.begin(), events.end(),
                   [](const Event& a, const Event& b) { return a.t < b.t; });

  const std::int64_t period = std::llround(1e6 / config.frame_hz);
  if (period < 1) throw std::invalid_argument("scene: frame period below one microsecond");
  for (std::int64_t ft = 0; ft <= config.duration; ft += period) {
    Frame frame;
    frame.t = ft;
    render_field(config, ft, cur);
    frame.pixels.assign(cur.begin(), cur.end());
    seq.frames.push_back(std::move(frame));
  }
  return seq;
}

std::vector<GroundTruthBox> gt_at(const SceneConfig& config, std::int64_t t) {
  if (t < 0 || t > config.duration)
    throw std::invalid_argument("gt_at: timestamp outside the scene");
  std::vector<GroundTruthBox> out;
  for (std::size_t i = 0; i < config.objects.size(); ++i) {
    const ObjectSpec& obj = config.objects[i];
    if (!alive_at(obj, t)) continue;
    double cx = 0.0, cy = 0.0;
    trajectory_at(obj, t, cx, cy);
    Box box{cx - obj.width / 2.0, cy - obj.height / 2.0, cx + obj.width / 2.0,
            cy + obj.height / 2.0};
    box.x_min = std::max(box.x_min, 0.0);
    box.y_min = std::max(box.y_min, 0.0);
    box.x_max = std::min(box.x_max, static_cast<double>(config.sensor_w));
    box.y_max = std::min(box.y_max, static_cast<double>(config.sensor_h));
    if (box.x_min >= box.x_max || box.y_min >= box.y_max) continue;
    out.push_back({box, obj.class_id, static_cast<int>(i)});
  }
  return out;
}

std::vector<GroundTruthBox> interpolate_labels(std::span<const GroundTruthBox> a,
                                               std::span<const GroundTruthBox> b,
                                               double fraction) {
  if (!(fraction >= 0.0 && fraction <= 1.0))
    throw std::invalid_argument("interpolate_labels: fraction must be in [0, 1]");
  std::unordered_map<int, const GroundTruthBox*> by_track;
  by_track.reserve(b.size());
  for (const GroundTruthBox& g : b) by_track.emplace(g.track_id, &g);

  std::vector<GroundTruthBox> out;
  for (const GroundTruthBox& ga : a) {
    const auto it = by_track.find(ga.track_id);
    if (it == by_track.end()) continue;  // appears or disappears inside the interval
    const GroundTruthBox& gb = *it->second;
    const double f = fraction;
    Box box{ga.box.x_min + f * (gb.box.x_min - ga.box.x_min),
            ga.box.y_min + f * (gb.box.y_min - ga.box.y_min),
            ga.box.x_max + f * (gb.box.x_max - ga.box.x_max),
            ga.box.y_max + f * (gb.box.y_max - ga.box.y_max)};
    out.push_back({box, ga.class_id, ga.track_id});
  }
  return out;
}

SceneConfig standard_benchmark_scene(std::uint64_t seed) {
  SceneConfig config;
  config.name = "bench64";
  config.sensor_w = 64;
  config.sensor_h = 64;
  config.duration = 2'000'000;
  config.frame_hz = 20.0;
  // Low threshold and brisk motion keep the 1/9-interval sub-windows dense
  // enough (hundreds of events) for high-frequency detection to be learnable.
  config.contrast_threshold = 0.1;
  config.background_intensity = 0.0;
  config.noise_rate = 0.5;
  config.seed = seed;
  config.micro_step = 100;

  // Trajectory knots sit on 50 ms frame instants so inter-frame motion is
  // linear everywhere.
  ObjectSpec car0;
  car0.class_id = 0;
  car0.width = 16;
  car0.height = 10;
  car0.intensity = 1.2;
  car0.spawn_t = 0;
  car0.despawn_t = config.duration + 1;
  car0.trajectory = {
      {0, 10, 10}, {500'000, 54, 10}, {1'000'000, 10, 10}, {1'500'000, 54, 10}, {2'000'000, 10, 10}};

  ObjectSpec ped0;
  ped0.class_id = 1;
  ped0.width = 6;
  ped0.height = 12;
  ped0.intensity = 1.0;
  ped0.spawn_t = 0;
  ped0.despawn_t = config.duration + 1;
  ped0.trajectory = {{0, 12, 24}, {700'000, 44, 46}, {1'400'000, 12, 24}, {2'000'000, 40, 44}};

  ObjectSpec car1;
  car1.class_id = 0;
  car1.width = 14;
  car1.height = 9;
  car1.intensity = -1.1;
  car1.spawn_t = 0;
  car1.despawn_t = config.duration + 1;
  car1.trajectory = {{0, 56, 38},         {400'000, 10, 38},   {800'000, 56, 38},
                     {1'200'000, 10, 38}, {1'600'000, 56, 38}, {2'000'000, 10, 38}};

  ObjectSpec ped1;
  ped1.class_id = 1;
  ped1.width = 7;
  ped1.height = 12;
  ped1.intensity = -0.9;
  ped1.spawn_t = 100'000;
  ped1.despawn_t = config.duration + 1;
  ped1.trajectory = {{100'000, 50, 52}, {800'000, 16, 52}, {1'500'000, 50, 52}, {2'000'000, 24, 52}};

  config.objects = {car0, ped0, car1, ped1};
  return config;
}

SceneConfig despawn_scene(std::uint64_t seed) {
  SceneConfig config;
  config.name = "despawn64";
  config.sensor_w = 64;
  config.sensor_h = 64;
  config.duration = 2'000'000;
  config.frame_hz = 20.0;
  config.contrast_threshold = 0.1;
  config.background_intensity = 0.0;
  config.noise_rate = 0.25;
  config.seed = seed;
  config.micro_step = 100;

  // Disappears halfway between the frames at 1.50 s and 1.55 s. Knots sit on
  // frame instants so inter-frame motion stays linear.
  ObjectSpec runner;
  runner.class_id = 0;
  runner.width = 18;
  runner.height = 12;
  runner.intensity = 1.2;
  runner.spawn_t = 0;
  runner.despawn_t = 1'525'000;
  runner.trajectory = {{0, 12, 20}, {700'000, 52, 20}, {1'400'000, 12, 20}, {2'000'000, 46, 20}};

  ObjectSpec anchor;
  anchor.class_id = 0;
  anchor.width = 16;
  anchor.height = 10;
  anchor.intensity = -1.1;
  anchor.spawn_t = 0;
  anchor.despawn_t = config.duration + 1;
  anchor.trajectory = {{0, 50, 44}, {600'000, 14, 44}, {1'200'000, 50, 44}, {2'000'000, 14, 44}};

  config.objects = {runner, anchor};
  return config;
}

}  // namespace evdet
