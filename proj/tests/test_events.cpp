#include <doctest.h>

#include <algorithm>
#include <tuple>
#include <vector>

#include "evdet/events.hpp"
#include "evdet/rng.hpp"

using namespace evdet;

namespace {

// Reference accumulator: per event, the bin is found by scanning candidate
// bins and testing the half-open membership inequality directly in integer
// arithmetic, with no division. Intentionally written differently from the
// production binning.
EventTensor brute_voxelize(const EventStream& stream, const Window& window,
                           const VoxelSpec& spec) {
  EventTensor out;
  out.spec = spec;
  out.window = window;
  out.data.assign(2ull * static_cast<std::size_t>(spec.time_bins) *
                      static_cast<std::size_t>(spec.height) *
                      static_cast<std::size_t>(spec.width),
                  0);
  const std::int64_t len = window.length();
  const std::int64_t T = spec.time_bins;
  for (const Event& e : stream.events) {
    if (e.t < window.t1 || e.t >= window.t2) continue;
    const std::int64_t rel = e.t - window.t1;
    int bin = -1;
    for (std::int64_t i = 0; i < T; ++i) {
      // membership in bin i: i * len <= rel * T < (i + 1) * len
      if (i * len <= rel * T && rel * T < (i + 1) * len) {
        bin = static_cast<int>(i);
        break;
      }
    }
    if (bin < 0) bin = static_cast<int>(T - 1);  // boundary clamp
    const int channel = e.p < 0 ? 0 : 1;
    const std::size_t idx =
        ((static_cast<std::size_t>(channel) * static_cast<std::size_t>(T) +
          static_cast<std::size_t>(bin)) *
             static_cast<std::size_t>(spec.height) +
         e.y) *
            static_cast<std::size_t>(spec.width) +
        e.x;
    ++out.data[idx];
  }
  return out;
}

EventStream random_stream(Rng& rng, int max_events, int w, int h, std::int64_t t_lo,
                          std::int64_t t_hi) {
  EventStream s;
  s.sensor_w = w;
  s.sensor_h = h;
  const int n = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(max_events) + 1));
  for (int i = 0; i < n; ++i) {
    Event e;
    e.x = static_cast<std::uint16_t>(rng.uniform_below(static_cast<std::uint64_t>(w)));
    e.y = static_cast<std::uint16_t>(rng.uniform_below(static_cast<std::uint64_t>(h)));
    e.t = rng.uniform_int(t_lo, t_hi);
    e.p = rng.uniform() < 0.5 ? -1 : 1;
    s.events.push_back(e);
  }
  std::stable_sort(s.events.begin(), s.events.end(),
                   [](const Event& a, const Event& b) { return a.t < b.t; });
  return s;
}

}  // namespace

TEST_CASE("voxelize matches the brute-force accumulator on random streams") {
  Rng rng(101);
  for (int iter = 0; iter < 300; ++iter) {
    const int w = 4 + static_cast<int>(rng.uniform_below(13));
    const int h = 4 + static_cast<int>(rng.uniform_below(13));
    const EventStream s = random_stream(rng, 500, w, h, -50, 150);
    const std::int64_t t1 = rng.uniform_int(-20, 50);
    const std::int64_t t2 = t1 + rng.uniform_int(1, 120);
    const VoxelSpec spec{1 + static_cast<int>(rng.uniform_below(6)), h, w};
    const Window window{t1, t2};
    const EventTensor got = voxelize(s, window, spec);
    const EventTensor want = brute_voxelize(s, window, spec);
    REQUIRE(got.data == want.data);
  }
}

TEST_CASE("single event lands in the right bin and channel") {
  EventStream s;
  s.sensor_w = 4;
  s.sensor_h = 4;
  s.events.push_back({2, 1, 5, +1});
  const EventTensor t = voxelize(s, Window{0, 10}, VoxelSpec{2, 4, 4});
  CHECK(t.at(1, 1, 1, 2) == 1);  // channel 1 (positive), bin 1 (t=5 of [0,10) with T=2)
  CHECK(t.total_count() == 1);
}

TEST_CASE("window-end boundary event is excluded, last-instant event clamps to the top bin") {
  EventStream s;
  s.sensor_w = 2;
  s.sensor_h = 2;
  s.events.push_back({0, 0, 9, -1});
  s.events.push_back({0, 0, 10, -1});
  const EventTensor t = voxelize(s, Window{0, 10}, VoxelSpec{3, 2, 2});
  CHECK(t.total_count() == 1);  // only t=9
  CHECK(t.at(0, 2, 0, 0) == 1);
}

TEST_CASE("events outside the window are ignored") {
  EventStream s;
  s.sensor_w = 2;
  s.sensor_h = 2;
  s.events.push_back({0, 0, -5, +1});
  s.events.push_back({1, 1, 3, +1});
  s.events.push_back({1, 0, 99, +1});
  const EventTensor t = voxelize(s, Window{0, 10}, VoxelSpec{1, 2, 2});
  CHECK(t.total_count() == 1);
}

TEST_CASE("count conservation: in-window events equal the tensor total") {
  Rng rng(202);
  for (int iter = 0; iter < 200; ++iter) {
    const EventStream s = random_stream(rng, 400, 8, 8, 0, 1000);
    const Window window{100, 700};
    const EventTensor t = voxelize(s, window, VoxelSpec{4, 8, 8});
    std::uint64_t expect = 0;
    for (const Event& e : s.events)
      if (window.contains(e.t)) ++expect;
    CHECK(t.total_count() == expect);
  }
}

TEST_CASE("voxelize validates arguments") {
  EventStream s;
  s.sensor_w = 4;
  s.sensor_h = 4;
  CHECK_THROWS_AS(voxelize(s, Window{5, 5}, VoxelSpec{1, 4, 4}), std::invalid_argument);
  CHECK_THROWS_AS(voxelize(s, Window{0, 10}, VoxelSpec{0, 4, 4}), std::invalid_argument);
  CHECK_THROWS_AS(voxelize(s, Window{0, 10}, VoxelSpec{1, 4, 8}), std::invalid_argument);
}

TEST_CASE("frequency plan derives the sub-window ratio") {
  const FrequencyPlan plan = make_plan(20.0, 180.0);
  CHECK(plan.ratio == 9);
  CHECK(make_plan(20.0, 20.0).ratio == 1);
  CHECK_THROWS_AS(make_plan(20.0, 50.0), std::invalid_argument);
  CHECK_THROWS_AS(make_plan(0.0, 20.0), std::invalid_argument);
  CHECK_THROWS_AS(make_plan(180.0, 20.0), std::invalid_argument);
}

TEST_CASE("slice example: [0,7) at ratio 3 gives [0,2) [2,4) [4,7)") {
  const FrequencyPlan plan = make_plan(1.0, 3.0);
  const auto w = slice_frequencies(Window{0, 7}, plan);
  REQUIRE(w.size() == 3);
  CHECK(w[0] == Window{0, 2});
  CHECK(w[1] == Window{2, 4});
  CHECK(w[2] == Window{4, 7});
}

TEST_CASE("slice partition invariants on random windows") {
  Rng rng(303);
  for (int iter = 0; iter < 2000; ++iter) {
    const std::int64_t t1 = rng.uniform_int(-1000, 1000);
    const int ratio = 1 + static_cast<int>(rng.uniform_below(12));
    const std::int64_t len =
        ratio + static_cast<std::int64_t>(rng.uniform_below(5000));
    const FrequencyPlan plan{1.0, static_cast<double>(ratio), ratio};
    const Window window{t1, t1 + len};
    const auto w = slice_frequencies(window, plan);
    REQUIRE(static_cast<int>(w.size()) == ratio);
    // exact partition
    CHECK(w.front().t1 == window.t1);
    CHECK(w.back().t2 == window.t2);
    for (std::size_t i = 1; i < w.size(); ++i) CHECK(w[i].t1 == w[i - 1].t2);
    // lengths differ by at most one, longer ones at the end
    const std::int64_t base = len / ratio;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const std::int64_t l = w[i].length();
      CHECK(l >= base);
      CHECK(l <= base + 1);
      if (i > 0) CHECK(w[i].length() >= w[i - 1].length());
    }
  }
}

TEST_CASE("slice rejects windows shorter than the ratio") {
  const FrequencyPlan plan = make_plan(1.0, 9.0);
  CHECK_THROWS_AS(slice_frequencies(Window{0, 5}, plan), std::invalid_argument);
}

TEST_CASE("sub-window helpers") {
  const auto w = slice_frequencies(Window{0, 90}, make_plan(1.0, 9.0));
  CHECK(last_subwindow(w) == Window{80, 90});
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const Window pick = sample_subwindow(w, rng);
    CHECK(std::find(w.begin(), w.end(), pick) != w.end());
  }
}

TEST_CASE("reverse_stream reflects timestamps and flips polarity") {
  EventStream s;
  s.sensor_w = 4;
  s.sensor_h = 4;
  s.events.push_back({0, 0, 0, +1});
  s.events.push_back({1, 1, 3, -1});
  s.events.push_back({2, 2, 9, +1});
  const EventStream r = reverse_stream(s, Window{0, 10}, true);
  REQUIRE(r.events.size() == 3);
  // t -> t1 + (t2 - 1 - t): 0 -> 9, 3 -> 6, 9 -> 0; re-sorted ascending
  CHECK(r.events[0].t == 0);
  CHECK(r.events[0].x == 2);
  CHECK(r.events[0].p == -1);
  CHECK(r.events[1].t == 6);
  CHECK(r.events[1].p == +1);
  CHECK(r.events[2].t == 9);
  CHECK(r.events[2].p == -1);
}

TEST_CASE("reverse_stream keeps polarity when the flag is off") {
  EventStream s;
  s.sensor_w = 2;
  s.sensor_h = 2;
  s.events.push_back({0, 0, 2, +1});
  const EventStream r = reverse_stream(s, Window{0, 10}, false);
  CHECK(r.events[0].p == +1);
  CHECK(r.events[0].t == 7);
}

TEST_CASE("reverse_stream drops events outside the window") {
  EventStream s;
  s.sensor_w = 2;
  s.sensor_h = 2;
  s.events.push_back({0, 0, -1, +1});
  s.events.push_back({0, 0, 5, +1});
  s.events.push_back({0, 0, 10, +1});
  const EventStream r = reverse_stream(s, Window{0, 10}, true);
  CHECK(r.events.size() == 1);
}

TEST_CASE("reversing twice restores the in-window stream") {
  Rng rng(404);
  for (int iter = 0; iter < 100; ++iter) {
    EventStream s = random_stream(rng, 300, 8, 8, 0, 199);
    const Window window{0, 200};
    EventStream twice = reverse_stream(reverse_stream(s, window, true), window, true);
    // compare as multisets of (t, x, y, p)
    auto key = [](const Event& e) { return std::tuple(e.t, e.x, e.y, e.p); };
    std::vector<std::tuple<std::int64_t, int, int, int>> a, b;
    for (const Event& e : s.events)
      if (window.contains(e.t)) a.push_back(key(e));
    for (const Event& e : twice.events) b.push_back(key(e));
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
  }
}

TEST_CASE("voxelizing a reversed stream mirrors the time bins") {
  Rng rng(505);
  const EventStream s = random_stream(rng, 400, 8, 8, 0, 899);
  const Window window{0, 900};
  const VoxelSpec spec{9, 8, 8};
  const EventTensor fwd = voxelize(s, window, spec);
  const EventTensor bwd = voxelize(reverse_stream(s, window, true), window, spec);
  // window length is a multiple of T, so reflection maps bin i to T-1-i and
  // the polarity flip swaps the channels
  for (int c = 0; c < 2; ++c)
    for (int b = 0; b < 9; ++b)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
          CHECK(fwd.at(c, b, y, x) == bwd.at(1 - c, 8 - b, y, x));
}
