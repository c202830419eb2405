#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "evdet/rng.hpp"

namespace evdet {

// Timestamps are microseconds. Polarity is -1 or +1.
struct Event {
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::int64_t t = 0;
  std::int8_t p = 1;
};

// Events sorted by t ascending; coordinates lie inside the sensor bounds.
struct EventStream {
  std::uint16_t sensor_w = 0;
  std::uint16_t sensor_h = 0;
  std::vector<Event> events;
};

// Half-open interval [t1, t2).
struct Window {
  std::int64_t t1 = 0;
  std::int64_t t2 = 0;

  std::int64_t length() const { return t2 - t1; }
  bool contains(std::int64_t t) const { return t >= t1 && t < t2; }
  bool operator==(const Window&) const = default;
};

struct VoxelSpec {
  int time_bins = 1;  // T
  int height = 0;     // H, must equal the stream's sensor height
  int width = 0;      // W, must equal the stream's sensor width
};

// Per-polarity per-bin event counts, shape (2, T, H, W). Channel 0 counts
// negative events, channel 1 positive ones.
struct EventTensor {
  VoxelSpec spec;
  Window window;
  std::vector<std::uint32_t> data;

  std::size_t index(int pol_ch, int tau, int y, int x) const {
    return ((static_cast<std::size_t>(pol_ch) * spec.time_bins + tau) * spec.height + y) *
               spec.width +
           x;
  }
  std::uint32_t at(int pol_ch, int tau, int y, int x) const {
    return data[index(pol_ch, tau, y, x)];
  }
  std::uint64_t total_count() const;
};

// Pair of label frequencies: high_hz must be an exact integer multiple of
// base_hz (ratio = high/base).
struct FrequencyPlan {
  double base_hz = 0.0;
  double high_hz = 0.0;
  int ratio = 1;
};

FrequencyPlan make_plan(double base_hz, double high_hz);

void validate(const Window& window);
void validate(const VoxelSpec& spec);
void validate(const EventStream& stream);

// Temporal bin of a timestamp inside a window: floor((t - t1) / (t2 - t1) * T),
// clamped to T - 1 when integer arithmetic lands on the upper edge.
int time_bin_index(const Window& window, int time_bins, std::int64_t t);

// Counts in-window events into a (2, T, H, W) tensor. Events outside the
// window are ignored; out-of-bounds coordinates are an argument error.
EventTensor voxelize(const EventStream& stream, const Window& window, const VoxelSpec& spec);

// Splits a base-frequency window into plan.ratio contiguous sub-windows. When
// the length is not divisible, the remainder is distributed one microsecond
// each to the last sub-windows.
std::vector<Window> slice_frequencies(const Window& window, const FrequencyPlan& plan);

Window sample_subwindow(std::span<const Window> windows, Rng& rng);
Window last_subwindow(std::span<const Window> windows);

// Time-reflects the in-window slice of a stream: t -> t1 + (t2 - 1 - t), so
// the result stays inside [t1, t2). Polarity is negated when flip_polarity is
// set, matching the inverted contrast ramps seen when time runs backward.
EventStream reverse_stream(const EventStream& stream, const Window& window,
                           bool flip_polarity = true);

}  // namespace evdet
