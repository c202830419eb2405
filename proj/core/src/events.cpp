#include "evdet/events.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace evdet {

std::uint64_t EventTensor::total_count() const {
  return std::accumulate(data.begin(), data.end(), std::uint64_t{0});
}

FrequencyPlan make_plan(double base_hz, double high_hz) {
  if (!(base_hz > 0.0) || !(high_hz > 0.0))
    throw std::invalid_argument("make_plan: frequencies must be positive");
  if (high_hz < base_hz)
    throw std::invalid_argument("make_plan: high_hz must be >= base_hz");
  const double q = high_hz / base_hz;
  const long long r = std::llround(q);
  if (r < 1 || std::abs(base_hz * static_cast<double>(r) - high_hz) > 1e-9 * high_hz)
    throw std::invalid_argument("make_plan: high_hz must be an integer multiple of base_hz");
  FrequencyPlan plan;
  plan.base_hz = base_hz;
  plan.high_hz = high_hz;
  plan.ratio = static_cast<int>(r);
  return plan;
}

void validate(const Window& window) {
  if (window.t1 >= window.t2) throw std::invalid_argument("window: t1 must be < t2");
}

void validate(const VoxelSpec& spec) {
  if (spec.time_bins < 1) throw std::invalid_argument("voxel spec: time_bins must be >= 1");
  if (spec.height < 1 || spec.width < 1)
    throw std::invalid_argument("voxel spec: height and width must be >= 1");
}

void validate(const EventStream& stream) {
  std::int64_t prev = std::numeric_limits<std::int64_t>::min();
  for (std::size_t i = 0; i < stream.events.size(); ++i) {
    const Event& e = stream.events[i];
    if (e.t < prev)
      throw std::invalid_argument("event stream: timestamps not sorted at index " +
                                  std::to_string(i));
    prev = e.t;
    if (e.x >= stream.sensor_w || e.y >= stream.sensor_h)
      throw std::invalid_argument("event stream: coordinates out of bounds at index " +
                                  std::to_string(i));
    if (e.p != 1 && e.p != -1)
      throw std::invalid_argument("event stream: polarity must be -1 or +1 at index " +
                                  std::to_string(i));
  }
}

int time_bin_index(const Window& window, int time_bins, std::int64_t t) {
  // Integer form of floor((t - t1) * T / (t2 - t1)); exact for in-window t.
  const std::int64_t num = (t - window.t1) * time_bins;
  int tau = static_cast<int>(num / window.length());
  if (tau >= time_bins) tau = time_bins - 1;
  return tau;
}

EventTensor voxelize(const EventStream& stream, const Window& window, const VoxelSpec& spec) {
  validate(window);
  validate(spec);
  if (spec.height != stream.sensor_h || spec.width != stream.sensor_w)
    throw std::invalid_argument("voxelize: spec dims must equal sensor dims");

  EventTensor out;
  out.spec = spec;
  out.window = window;
  out.data.assign(static_cast<std::size_t>(2) * spec.time_bins * spec.height * spec.width, 0);

  // Streams are sorted, so the in-window slice is a contiguous range.
  const auto lo = std::lower_bound(stream.events.begin(), stream.events.end(), window.t1,
                                   [](const Event& e, std::int64_t t) { return e.t < t; });
  const auto hi = std::lower_bound(lo, stream.events.end(), window.t2,
                                   [](const Event& e, std::int64_t t) { return e.t < t; });

  const int T = spec.time_bins;
  const std::int64_t len = window.length();
  for (auto it = lo; it != hi; ++it) {
    const Event& e = *it;
    if (e.x >= spec.width || e.y >= spec.height)
      throw std::invalid_argument("voxelize: event coordinates out of bounds");
    int tau = static_cast<int>((e.t - window.t1) * T / len);
    if (tau >= T) tau = T - 1;
    const int ch = e.p > 0 ? 1 : 0;
    ++out.data[out.index(ch, tau, e.y, e.x)];
  }
  return out;
}

std::vector<Window> slice_frequencies(const Window& window, const FrequencyPlan& plan) {
  validate(window);
  const int r = plan.ratio;
  if (r < 1) throw std::invalid_argument("slice_frequencies: ratio must be >= 1");
  if (window.length() < r)
    throw std::invalid_argument("slice_frequencies: window shorter than ratio");

  const std::int64_t base = window.length() / r;
  const std::int64_t rem = window.length() % r;
  std::vector<Window> out;
  out.reserve(r);
  std::int64_t t = window.t1;
  for (int i = 0; i < r; ++i) {
    // The remainder goes one microsecond each to the last `rem` sub-windows.
    const std::int64_t len = base + (i >= r - rem ? 1 : 0);
    out.push_back({t, t + len});
    t += len;
  }
  return out;
}

Window sample_subwindow(std::span<const Window> windows, Rng& rng) {
  if (windows.empty()) throw std::invalid_argument("sample_subwindow: empty window list");
  return windows[rng.uniform_below(windows.size())];
}

Window last_subwindow(std::span<const Window> windows) {
  if (windows.empty()) throw std::invalid_argument("last_subwindow: empty window list");
  return windows.back();
}

EventStream reverse_stream(const EventStream& stream, const Window& window, bool flip_polarity) {
  validate(window);
  EventStream out;
  out.sensor_w = stream.sensor_w;
  out.sensor_h = stream.sensor_h;

  const auto lo = std::lower_bound(stream.events.begin(), stream.events.end(), window.t1,
                                   [](const Event& e, std::int64_t t) { return e.t < t; });
  const auto hi = std::lower_bound(lo, stream.events.end(), window.t2,
                                   [](const Event& e, std::int64_t t) { return e.t < t; });

  out.events.reserve(static_cast<std::size_t>(hi - lo));
  // Walking the slice backwards yields mostly ascending reflected times; the
  // stable sort then only reorders ties deterministically.
  for (auto it = hi; it != lo;) {
    --it;
    Event e = *it;
    e.t = window.t1 + (window.t2 - 1 - e.t);
    if (flip_polarity) e.p = static_cast<std::int8_t>(-e.p);
    out.events.push_back(e);
  }
  std::stable_sort(out.events.begin(), out.events.end(),
                   [](const Event& a, const Event& b) { return a.t < b.t; });
  return out;
}

}  // namespace evdet
