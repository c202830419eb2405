#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "evdet/coco.hpp"
#include "evdet/dataset.hpp"
#include "evdet/evt1.hpp"
#include "evdet/io.hpp"
#include "evdet/tune.hpp"

namespace fs = std::filesystem;
using namespace evdet;

namespace {

// Paths inside a config file resolve relative to the config's directory.
std::string resolve_relative(const std::string& config_path, const std::string& path) {
  fs::path p(path);
  if (p.is_absolute()) return path;
  return (fs::path(config_path).parent_path() / p).string();
}

DetectMode parse_mode(const std::string& mode) {
  if (mode == "fused") return DetectMode::fused;
  if (mode == "event_only") return DetectMode::event_only;
  throw CLI::ValidationError("--mode", "must be 'fused' or 'event_only'");
}

GtMode parse_gt_mode(const std::string& mode) {
  if (mode == "exact") return GtMode::exact;
  if (mode == "interpolated") return GtMode::interpolated;
  throw CLI::ValidationError("--gt", "must be 'exact' or 'interpolated'");
}

struct LoadedExperiment {
  ExperimentConfig config;
  SceneConfig scene_config;
  SceneSequence scene;
  FrequencyPlan plan;
  TrainDataset dataset;
};

LoadedExperiment load_experiment(const std::string& config_path) {
  LoadedExperiment exp;
  exp.config = load_experiment_config(config_path);
  exp.scene_config =
      load_scene_config(resolve_relative(config_path, exp.config.scene_config));
  exp.scene = generate_scene(exp.scene_config);
  exp.plan = make_plan(exp.config.base_hz, exp.config.high_hz);
  exp.dataset = build_dataset(exp.scene, exp.plan, exp.config.time_bins);
  return exp;
}

ToyModelConfig model_config_for(const LoadedExperiment& exp) {
  ToyModelConfig mc;
  mc.input_height = exp.scene_config.sensor_h;
  mc.input_width = exp.scene_config.sensor_w;
  mc.time_bins = exp.config.time_bins;
  mc.lambda_reg = exp.config.lambda_reg;
  mc.noise_per_map = exp.config.noise_per_map;
  return mc;
}

int run_synth_gen(const std::string& preset, const std::string& scene_path,
                  std::uint64_t seed, const std::string& out_dir) {
  SceneConfig config;
  if (!scene_path.empty()) {
    config = load_scene_config(scene_path);
  } else if (preset == "standard") {
    config = standard_benchmark_scene(seed);
  } else if (preset == "despawn") {
    config = despawn_scene(seed);
  } else {
    throw CLI::ValidationError("--preset", "must be 'standard' or 'despawn'");
  }

  const SceneSequence scene = generate_scene(config);
  fs::create_directories(fs::path(out_dir) / "frames");

  save_scene_config((fs::path(out_dir) / "scene.json").string(), config);
  write_evt1(fs::path(out_dir) / "events.evt1", scene.events);
  LabelSets labels;
  for (const Frame& f : scene.frames) labels[f.t] = gt_at(config, f.t);
  save_labels((fs::path(out_dir) / "labels.json").string(), labels);
  for (std::size_t k = 0; k < scene.frames.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04zu.pgm", k);
    save_frame_pgm((fs::path(out_dir) / "frames" / name).string(), scene.frames[k],
                   config.sensor_w, config.sensor_h);
  }
  std::cout << "scene '" << config.name << "': " << scene.events.events.size() << " events, "
            << scene.frames.size() << " frames -> " << out_dir << "\n";
  return 0;
}

int run_voxelize(const std::string& events_path, std::int64_t t1, std::int64_t t2, int bins,
                 const std::string& out_path) {
  const EventStream stream = read_evt1(events_path);
  const VoxelSpec spec{bins, stream.sensor_h, stream.sensor_w};
  const EventTensor tensor = voxelize(stream, Window{t1, t2}, spec);
  save_tensor(out_path, tensor);
  std::cout << "tensor (2, " << bins << ", " << spec.height << ", " << spec.width << "), "
            << tensor.total_count() << " events in window -> " << out_path << "\n";
  return 0;
}

int run_train(const std::string& config_path, const std::string& mode_name,
              const std::string& regime_name, const std::string& out_path) {
  const LoadedExperiment exp = load_experiment(config_path);
  const DetectMode mode = parse_mode(mode_name);
  TrainRegime regime;
  if (regime_name == "sparse")
    regime = TrainRegime::sparse;
  else if (regime_name == "dual")
    regime = TrainRegime::dual;
  else
    throw CLI::ValidationError("--regime", "must be 'sparse' or 'dual'");

  Rng root(exp.config.seed);
  Rng training = root.substream("training");
  Rng sampling = root.substream("sampling");
  ToyModel model(model_config_for(exp), training);
  for (int epoch = 1; epoch <= exp.config.epochs; ++epoch) {
    const LossBreakdown loss =
        train_epoch(model, exp.dataset, regime, mode, exp.config.lr, training, sampling);
    std::printf("epoch %d: loss %.6f (iou %.6f, cls %.6f, reg %.6f, fuse %.6f)\n", epoch,
                loss.total, loss.iou_loss, loss.cls_loss, loss.reg_loss, loss.fuse_reg);
  }
  save_checkpoint(out_path, model);
  std::cout << "checkpoint -> " << out_path << "\n";
  return 0;
}

int run_flextune(const std::string& config_path, const std::string& checkpoint_path,
                 const std::string& mode_name, const std::string& out_path,
                 const std::string& stats_path, const std::string& pseudo_path) {
  const LoadedExperiment exp = load_experiment(config_path);
  const DetectMode mode = parse_mode(mode_name);
  ToyModel model = load_checkpoint(checkpoint_path);

  Rng root(exp.config.seed);
  Rng training = root.substream("training");
  std::vector<RoundStats> stats;
  model = self_train(std::move(model), exp.dataset, exp.config.tune, mode, exp.config.lr,
                     training, &stats);
  save_checkpoint(out_path, model);
  for (const RoundStats& s : stats)
    std::printf("round %d: %zu pseudo labels, mean score %.4f\n", s.round, s.label_count,
                s.mean_score);
  if (!stats_path.empty()) write_round_stats_csv(stats_path, stats);
  if (!pseudo_path.empty()) {
    std::vector<PseudoLabelSet> dumps;
    dumps.reserve(exp.dataset.samples.size());
    for (const LabeledWindow& lw : exp.dataset.samples)
      dumps.push_back(pseudo_labels_for_window(model, exp.scene, lw.window, exp.plan,
                                               exp.config.tune, mode, true, nullptr));
    write_pseudo_labels_jsonl(pseudo_path, dumps);
  }
  std::cout << "checkpoint -> " << out_path << "\n";
  return 0;
}

int run_eval(const std::string& config_path, const std::string& checkpoint_path,
             const std::string& mode_name, const std::string& gt_name,
             const std::vector<double>& freqs, std::vector<double> offsets,
             const std::string& csv_path, const std::string& plot_path) {
  const LoadedExperiment exp = load_experiment(config_path);
  const DetectMode mode = parse_mode(mode_name);
  const GtMode gt_mode = parse_gt_mode(gt_name);
  const ToyModel model = load_checkpoint(checkpoint_path);

  if (!freqs.empty() && !offsets.empty())
    throw CLI::ValidationError("--freqs", "cannot be combined with --offsets");
  if (exp.scene.frames.size() < 2) throw DataError("eval: scene has fewer than two frames");
  const std::int64_t delta = exp.scene.frames[1].t - exp.scene.frames[0].t;
  if (!freqs.empty()) offsets = offsets_for_frequencies(freqs, delta);
  if (offsets.empty())
    for (int i = 0; i <= 10; ++i) offsets.push_back(static_cast<double>(i) / 10.0);

  FrequencySweep sweep = frequency_sweep(model, exp.scene, offsets, gt_mode, mode);
  // Requested frequencies label their rows directly.
  for (std::size_t i = 0; i < freqs.size(); ++i) sweep.points[i].frequency_hz = freqs[i];

  write_metrics_csv(csv_path, sweep);
  write_plot_json(plot_path, sweep);
  for (const SweepPoint& p : sweep.points)
    std::printf("%10.3f Hz (offset %.3f): mAP %s\n", p.frequency_hz, p.offset,
                p.bundle.map ? std::to_string(*p.bundle.map).c_str() : "undefined");
  std::cout << "metrics -> " << csv_path << ", plot -> " << plot_path << "\n";
  return 0;
}

int run_bench(const std::string& events_path, int bins, int runs) {
  if (runs < 5) throw CLI::ValidationError("--runs", "must be >= 5");
  EventStream stream;
  if (events_path.empty()) {
    stream = generate_scene(standard_benchmark_scene(1)).events;
  } else {
    stream = read_evt1(events_path);
  }
  if (stream.events.empty()) throw DataError("bench: no events to measure");
  const Window window{stream.events.front().t, stream.events.back().t + 1};
  const VoxelSpec spec{bins, stream.sensor_h, stream.sensor_w};

  std::vector<double> seconds;
  std::uint64_t total = 0;
  for (int r = 0; r < runs; ++r) {
    const auto start = std::chrono::steady_clock::now();
    const EventTensor tensor = voxelize(stream, window, spec);
    const auto stop = std::chrono::steady_clock::now();
    total = tensor.total_count();
    seconds.push_back(std::chrono::duration<double>(stop - start).count());
  }
  std::sort(seconds.begin(), seconds.end());
  const double median = seconds[seconds.size() / 2];
  const nlohmann::json report{{"format", "evdet-bench"},
                              {"version", 1},
                              {"runs", runs},
                              {"event_count", total},
                              {"median_seconds", median},
                              {"events_per_second", static_cast<double>(total) / median}};
  std::cout << report.dump(2) << "\n";
  return 0;
}

void inspect_json_doc(const nlohmann::json& doc, const std::string& path) {
  const std::string format = doc.value("format", "");
  if (format == "evdet-labels") {
    const LabelSets labels = load_labels(path);
    std::size_t boxes = 0;
    for (const auto& [t, v] : labels) boxes += v.size();
    std::cout << "labels: " << labels.size() << " timestamps, " << boxes << " boxes\n";
  } else if (format == "evdet-scene") {
    const SceneConfig c = load_scene_config(path);
    std::cout << "scene '" << c.name << "': " << c.sensor_w << "x" << c.sensor_h << ", "
              << c.objects.size() << " objects, " << c.duration << " us\n";
  } else if (format == "evdet-experiment") {
    const ExperimentConfig c = load_experiment_config(path);
    std::cout << "experiment: scene " << c.scene_config << ", " << c.base_hz << " -> "
              << c.high_hz << " Hz, seed " << c.seed << "\n";
  } else if (format == "evdet-tensor") {
    const EventTensor t = load_tensor(path);
    std::cout << "tensor (2, " << t.spec.time_bins << ", " << t.spec.height << ", "
              << t.spec.width << "), window [" << t.window.t1 << ", " << t.window.t2 << "), "
              << t.total_count() << " events\n";
  } else if (format == "evdet-sweep") {
    std::cout << "sweep: " << doc.value("gt_mode", "?") << " ground truth, "
              << doc["frequency_hz"].size() << " points\n";
  } else if (format == "evdet-checkpoint") {
    std::cout << "checkpoint sidecar: " << doc["param_count"] << " parameters, "
              << doc["tensors"].size() << " tensors\n";
  } else {
    std::cout << "json document with " << doc.size() << " top-level fields\n";
  }
}

int run_inspect(const std::string& path) {
  const std::string bytes = fsio::read_file(path);
  if (bytes.rfind("EVT1", 0) == 0) {
    const EventStream stream = decode_evt1(bytes);
    std::cout << "EVT1: " << stream.sensor_w << "x" << stream.sensor_h << ", "
              << stream.events.size() << " events";
    if (!stream.events.empty())
      std::cout << ", t [" << stream.events.front().t << ", " << stream.events.back().t << "]";
    std::cout << "\n";
    return 0;
  }
  if (bytes.rfind("EVCK", 0) == 0) {
    const ToyModel model = load_checkpoint(path);
    std::cout << "checkpoint: " << model.param_count() << " parameters, input "
              << model.config().input_width << "x" << model.config().input_height << "\n";
    return 0;
  }
  if (bytes.rfind("P5", 0) == 0) {
    const PgmImage img = load_pgm(path);
    std::cout << "PGM: " << img.width << "x" << img.height << "\n";
    return 0;
  }
  const std::size_t start = bytes.find_first_not_of(" \t\r\n");
  if (start != std::string::npos && bytes[start] == '{') {
    try {
      inspect_json_doc(nlohmann::json::parse(bytes), path);
      return 0;
    } catch (const nlohmann::json::parse_error&) {
      // fall through: possibly JSON lines
    }
    std::size_t lines = 0, pos = 0;
    while (pos < bytes.size()) {
      std::size_t end = bytes.find('\n', pos);
      if (end == std::string::npos) end = bytes.size();
      const std::string_view line(bytes.data() + pos, end - pos);
      if (!line.empty()) {
        try {
          nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
          throw DataError(path + ": line " + std::to_string(lines + 1) + ": " + e.what());
        }
        ++lines;
      }
      pos = end + 1;
    }
    std::cout << "json lines: " << lines << " records\n";
    return 0;
  }
  if (bytes.find(',') != std::string::npos && bytes.find('\n') != std::string::npos) {
    const std::size_t rows = static_cast<std::size_t>(
        std::count(bytes.begin(), bytes.end(), '\n'));
    std::cout << "csv: " << (rows > 0 ? rows - 1 : 0) << " data rows, header "
              << bytes.substr(0, bytes.find('\n')) << "\n";
    return 0;
  }
  throw DataError(path + ": unrecognized file format");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"event-frame detection toolkit"};
  app.require_subcommand(1);
  std::function<int()> action;

  // synth-gen
  auto* synth = app.add_subcommand("synth-gen", "generate a synthetic scene");
  {
    auto preset = std::make_shared<std::string>("standard");
    auto scene_path = std::make_shared<std::string>();
    auto seed = std::make_shared<std::uint64_t>(1);
    auto out = std::make_shared<std::string>("scene_out");
    synth->add_option("--preset", *preset, "canned scene: standard or despawn");
    synth->add_option("--scene", *scene_path, "scene config JSON (overrides --preset)");
    synth->add_option("--seed", *seed, "scene seed for a preset");
    synth->add_option("--out", *out, "output directory");
    synth->callback([=, &action] {
      action = [=] { return run_synth_gen(*preset, *scene_path, *seed, *out); };
    });
  }

  // voxelize
  auto* vox = app.add_subcommand("voxelize", "events to a count tensor");
  {
    auto events = std::make_shared<std::string>();
    auto t1 = std::make_shared<std::int64_t>(0);
    auto t2 = std::make_shared<std::int64_t>(0);
    auto bins = std::make_shared<int>(1);
    auto out = std::make_shared<std::string>("tensor.json");
    vox->add_option("--events", *events, "EVT1 file")->required();
    vox->add_option("--t1", *t1, "window start, microseconds")->required();
    vox->add_option("--t2", *t2, "window end, microseconds")->required();
    vox->add_option("--bins", *bins, "time bins")->required();
    vox->add_option("--out", *out, "output tensor JSON");
    vox->callback([=, &action] {
      action = [=] { return run_voxelize(*events, *t1, *t2, *bins, *out); };
    });
  }

  // train
  auto* train = app.add_subcommand("train", "low-frequency detector training");
  {
    auto config = std::make_shared<std::string>();
    auto mode = std::make_shared<std::string>("fused");
    auto regime = std::make_shared<std::string>("sparse");
    auto out = std::make_shared<std::string>("model.ckpt");
    train->add_option("--config", *config, "experiment config JSON")->required();
    train->add_option("--mode", *mode, "fused or event_only");
    train->add_option("--regime", *regime, "sparse or dual");
    train->add_option("--out", *out, "output checkpoint");
    train->callback([=, &action] {
      action = [=] { return run_train(*config, *mode, *regime, *out); };
    });
  }

  // flextune
  auto* tune = app.add_subcommand("flextune", "self-training rounds");
  {
    auto config = std::make_shared<std::string>();
    auto ckpt = std::make_shared<std::string>();
    auto mode = std::make_shared<std::string>("fused");
    auto out = std::make_shared<std::string>("tuned.ckpt");
    auto stats = std::make_shared<std::string>();
    auto pseudo = std::make_shared<std::string>();
    tune->add_option("--config", *config, "experiment config JSON")->required();
    tune->add_option("--checkpoint", *ckpt, "input checkpoint")->required();
    tune->add_option("--mode", *mode, "fused or event_only");
    tune->add_option("--out", *out, "output checkpoint");
    tune->add_option("--stats", *stats, "per-round stats CSV");
    tune->add_option("--pseudo-dump", *pseudo, "pseudo-label JSONL dump");
    tune->callback([=, &action] {
      action = [=] { return run_flextune(*config, *ckpt, *mode, *out, *stats, *pseudo); };
    });
  }

  // eval
  auto* ev = app.add_subcommand("eval", "frequency sweep evaluation");
  {
    auto config = std::make_shared<std::string>();
    auto ckpt = std::make_shared<std::string>();
    auto mode = std::make_shared<std::string>("fused");
    auto gt = std::make_shared<std::string>("exact");
    auto freqs = std::make_shared<std::vector<double>>();
    auto offsets = std::make_shared<std::vector<double>>();
    auto csv = std::make_shared<std::string>("metrics.csv");
    auto plot = std::make_shared<std::string>("plot.json");
    ev->add_option("--config", *config, "experiment config JSON")->required();
    ev->add_option("--checkpoint", *ckpt, "model checkpoint")->required();
    ev->add_option("--mode", *mode, "fused or event_only");
    ev->add_option("--gt", *gt, "exact or interpolated ground truth");
    ev->add_option("--freqs", *freqs, "effective frequencies, Hz")->delimiter(',');
    ev->add_option("--offsets", *offsets, "sub-frame offsets in [0,1]")->delimiter(',');
    ev->add_option("--out-csv", *csv, "metrics CSV path");
    ev->add_option("--out-plot", *plot, "plot JSON path");
    ev->callback([=, &action] {
      action = [=] { return run_eval(*config, *ckpt, *mode, *gt, *freqs, *offsets, *csv, *plot); };
    });
  }

  // bench
  auto* bench = app.add_subcommand("bench", "voxelization throughput");
  {
    auto events = std::make_shared<std::string>();
    auto bins = std::make_shared<int>(2);
    auto runs = std::make_shared<int>(7);
    bench->add_option("--events", *events, "EVT1 file (default: generated scene)");
    bench->add_option("--bins", *bins, "time bins");
    bench->add_option("--runs", *runs, "timed runs, median reported (>= 5)");
    bench->callback([=, &action] {
      action = [=] { return run_bench(*events, *bins, *runs); };
    });
  }

  // inspect
  auto* inspect = app.add_subcommand("inspect", "summarize any artifact file");
  {
    auto path = std::make_shared<std::string>();
    inspect->add_option("path", *path, "file to inspect")->required();
    inspect->callback([=, &action] {
      action = [=] { return run_inspect(*path); };
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    return action();
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
