#include <benchmark/benchmark.h>

#include "evdet/events.hpp"
#include "evdet/synth.hpp"
#include "evdet/tune.hpp"

namespace {

const evdet::SceneSequence& bench_scene() {
  static const evdet::SceneSequence scene =
      evdet::generate_scene(evdet::standard_benchmark_scene(1));
  return scene;
}

void BM_Voxelize(benchmark::State& state) {
  const auto& scene = bench_scene();
  const evdet::Window window{0, scene.config.duration};
  const evdet::VoxelSpec spec{static_cast<int>(state.range(0)), scene.config.sensor_h,
                              scene.config.sensor_w};
  for (auto _ : state) {
    auto tensor = evdet::voxelize(scene.events, window, spec);
    benchmark::DoNotOptimize(tensor.data.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(scene.events.events.size()));
}
BENCHMARK(BM_Voxelize)->Arg(1)->Arg(2)->Arg(8);

void BM_SliceFrequencies(benchmark::State& state) {
  const evdet::Window window{0, 50000};
  const auto plan = evdet::make_plan(20.0, 180.0);
  for (auto _ : state) {
    auto windows = evdet::slice_frequencies(window, plan);
    benchmark::DoNotOptimize(windows.data());
  }
}
BENCHMARK(BM_SliceFrequencies);

void BM_ReverseStream(benchmark::State& state) {
  const auto& scene = bench_scene();
  const evdet::Window window{0, scene.config.duration};
  for (auto _ : state) {
    auto reversed = evdet::reverse_stream(scene.events, window, true);
    benchmark::DoNotOptimize(reversed.events.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(scene.events.events.size()));
}
BENCHMARK(BM_ReverseStream);

void BM_Nms(benchmark::State& state) {
  std::vector<evdet::Detection> dets;
  evdet::Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    const double x = rng.uniform() * 56.0;
    const double y = rng.uniform() * 56.0;
    dets.push_back({{x, y, x + 8.0, y + 8.0}, i % 2, rng.uniform(), 0});
  }
  for (auto _ : state) {
    auto kept = evdet::nms(dets, 0.5);
    benchmark::DoNotOptimize(kept.data());
  }
}
BENCHMARK(BM_Nms);

}  // namespace

BENCHMARK_MAIN();
