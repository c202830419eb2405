#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "evdet/coco.hpp"
#include "evdet/fsutil.hpp"
#include "evdet/synth.hpp"
#include "evdet/tune.hpp"

namespace evdet {

// Ground-truth label sets keyed by timestamp (microseconds). The JSON schema
// lives in docs/formats/labels.md; load rejects invariant violations with the
// offending field path.
using LabelSets = std::map<std::int64_t, std::vector<GroundTruthBox>>;

void save_labels(const std::string& path, const LabelSets& labels);
LabelSets load_labels(const std::string& path);

void save_scene_config(const std::string& path, const SceneConfig& config);
SceneConfig load_scene_config(const std::string& path);

// Everything one experiment run needs, in one diffable document. The seed is
// mandatory; all randomness derives from it through named substreams.
struct ExperimentConfig {
  std::string scene_config;  // path to the scene JSON, relative to the config
  int time_bins = 1;
  double base_hz = 0.0;
  double high_hz = 0.0;
  double lambda_reg = 0.01;
  bool noise_per_map = false;
  TuneConfig tune;
  double lr = 0.01;
  int epochs = 1;
  std::uint64_t seed = 0;
  std::string output_dir = ".";
};

void save_experiment_config(const std::string& path, const ExperimentConfig& config);
ExperimentConfig load_experiment_config(const std::string& path);

// Checkpoint = little-endian binary parameter block plus a "<path>.json"
// sidecar holding the model config and tensor layout for validation.
void save_checkpoint(const std::string& path, const ToyModel& model);
ToyModel load_checkpoint(const std::string& path);

// 8-bit PGM (P5). Log-intensity v maps to clamp(round(128 + 64 v), 0, 255).
void save_frame_pgm(const std::string& path, const Frame& frame, int width, int height);

struct PgmImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

PgmImage load_pgm(const std::string& path);

void save_tensor(const std::string& path, const EventTensor& tensor);
EventTensor load_tensor(const std::string& path);

// Sweep results as CSV: one row per offset with the bundle fields followed by
// one AP column per class seen anywhere in the sweep. Undefined strata print
// as empty cells. Formatting is fixed so identical runs emit identical bytes.
void write_metrics_csv(const std::string& path, const FrequencySweep& sweep);

// The same series as JSON: x = frequency_hz, one y series per metric, null
// for undefined values.
void write_plot_json(const std::string& path, const FrequencySweep& sweep);

// One JSON line per (sample, sub-window) with the emitted pseudo labels.
void write_pseudo_labels_jsonl(const std::string& path,
                               std::span<const PseudoLabelSet> per_sample);

void write_round_stats_csv(const std::string& path, std::span<const RoundStats> stats);

}  // namespace evdet
