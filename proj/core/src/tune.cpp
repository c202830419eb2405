#include "evdet/tune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace evdet {

std::vector<std::vector<Detection>> bootstrap(const ToyModel& model,
                                              const std::vector<Frame>& frames,
                                              std::span<const Window> windows,
                                              const EventStream& stream, DetectMode mode) {
  const VoxelSpec spec{model.config().time_bins, stream.sensor_h, stream.sensor_w};
  std::vector<std::vector<Detection>> out;
  out.reserve(windows.size());
  for (const Window& w : windows) {
    const EventTensor tensor = voxelize(stream, w, spec);
    const Frame* frame = nullptr;
    if (mode == DetectMode::fused) frame = &frame_at_or_before(frames, w.t1);
    out.push_back(detect(model, tensor, frame, mode, w.t2));
  }
  return out;
}

std::vector<std::vector<Detection>> bidirectional_merge(
    const std::vector<std::vector<Detection>>& forward,
    const std::vector<std::vector<Detection>>& backward) {
  if (forward.size() != backward.size())
    throw std::invalid_argument("bidirectional_merge: window counts differ");
  const std::size_t n = forward.size();
  std::vector<std::vector<Detection>> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = forward[i];
    // Backward index j saw the reflected events of forward index n - 1 - j.
    const auto& rev = backward[n - 1 - i];
    out[i].insert(out[i].end(), rev.begin(), rev.end());
  }
  return out;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
  std::sort(dets.begin(), dets.end(), detection_score_order);
  std::vector<Detection> kept;
  kept.reserve(dets.size());
  for (const Detection& d : dets) {
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.class_id != d.class_id) continue;
      if (iou(k.box, d.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::vector<Detection> confidence_filter(std::vector<Detection> dets, const TuneConfig& config) {
  std::vector<Detection> out;
  out.reserve(dets.size());
  for (const Detection& d : dets) {
    const double tau = d.class_id == 0 ? config.tau_class0 : config.tau_class1;
    if (d.score >= tau) out.push_back(d);
  }
  return out;
}

std::vector<Tracklet> link_tracklets(const std::vector<std::vector<Detection>>& per_window,
                                     double tau_iou, int max_gap) {
  struct Active {
    int id = 0;
    Detection last;
    int last_window = 0;
  };
  std::vector<Active> active;
  std::vector<Tracklet> tracks;

  for (int w = 0; w < static_cast<int>(per_window.size()); ++w) {
    // Retire tracks that have been unmatched for longer than the gap budget.
    std::erase_if(active, [&](const Active& a) { return w - a.last_window > max_gap + 1; });

    const auto& dets = per_window[w];
    struct Candidate {
      double iou_v;
      int active_idx;
      int det_idx;
    };
    std::vector<Candidate> candidates;
    for (int ai = 0; ai < static_cast<int>(active.size()); ++ai) {
      for (int di = 0; di < static_cast<int>(dets.size()); ++di) {
        if (active[ai].last.class_id != dets[di].class_id) continue;
        const double v = iou(active[ai].last.box, dets[di].box);
        if (v >= tau_iou) candidates.push_back({v, ai, di});
      }
    }
    std::sort(candidates.begin(), candidates.end(), [&](const Candidate& a, const Candidate& b) {
      if (a.iou_v != b.iou_v) return a.iou_v > b.iou_v;
      if (active[a.active_idx].id != active[b.active_idx].id)
        return active[a.active_idx].id < active[b.active_idx].id;
      return a.det_idx < b.det_idx;
    });

    std::vector<char> track_used(active.size(), 0), det_used(dets.size(), 0);
    for (const Candidate& c : candidates) {
      if (track_used[c.active_idx] || det_used[c.det_idx]) continue;
      track_used[c.active_idx] = 1;
      det_used[c.det_idx] = 1;
      Active& a = active[c.active_idx];
      tracks[a.id].entries.push_back({w, dets[c.det_idx]});
      a.last = dets[c.det_idx];
      a.last_window = w;
    }
    for (int di = 0; di < static_cast<int>(dets.size()); ++di) {
      if (det_used[di]) continue;
      const int id = static_cast<int>(tracks.size());
      tracks.push_back({id, {{w, dets[di]}}});
      active.push_back({id, dets[di], w});
    }
  }
  return tracks;
}

PseudoLabelSet prune_and_emit(std::span<const Tracklet> tracklets, const TuneConfig& config,
                              std::size_t window_count) {
  PseudoLabelSet out;
  out.per_window.resize(window_count);
  for (const Tracklet& t : tracklets) {
    if (static_cast<int>(t.entries.size()) < config.min_track_len) continue;
    for (const TrackletEntry& e : t.entries) {
      if (e.window_index < 0 || e.window_index >= static_cast<int>(window_count))
        throw std::invalid_argument("prune_and_emit: entry outside the window range");
      out.per_window[e.window_index].push_back({e.det.box, e.det.class_id, t.track_id});
    }
  }
  return out;
}

double tune_loss(std::span<const LossBreakdown> gt_losses,
                 std::span<const LossBreakdown> pseudo_losses, double pseudo_weight) {
  double total = 0.0;
  for (const LossBreakdown& l : gt_losses) total += l.total;
  double pseudo = 0.0;
  for (const LossBreakdown& l : pseudo_losses) pseudo += l.total;
  return total + pseudo_weight * pseudo;
}

PseudoLabelSet pseudo_labels_for_window(const ToyModel& model, const SceneSequence& scene,
                                        const Window& window, const FrequencyPlan& plan,
                                        const TuneConfig& config, DetectMode mode,
                                        bool reverse_flips_polarity, RoundStats* stats) {
  const auto windows = slice_frequencies(window, plan);
  const auto fwd = bootstrap(model, scene.frames, windows, scene.events, mode);
  const EventStream reversed = reverse_stream(scene.events, window, reverse_flips_polarity);
  const auto bwd = bootstrap(model, scene.frames, windows, reversed, mode);

  auto merged = bidirectional_merge(fwd, bwd);
  for (auto& dets : merged)
    dets = confidence_filter(nms(std::move(dets), config.nms_iou), config);

  const auto tracks = link_tracklets(merged, config.tau_iou, config.max_gap);
  if (stats) {
    // Stats cover the labels that will reach training: sub-windows 0..n-2.
    for (const Tracklet& t : tracks) {
      if (static_cast<int>(t.entries.size()) < config.min_track_len) continue;
      for (const TrackletEntry& e : t.entries) {
        if (e.window_index + 1 >= static_cast<int>(windows.size())) continue;
        ++stats->label_count;
        stats->mean_score += e.det.score;  // normalized by the caller
      }
    }
  }
  return prune_and_emit(tracks, config, windows.size());
}

ToyModel self_train(ToyModel model, const TrainDataset& dataset, const TuneConfig& config,
                    DetectMode mode, double lr, Rng& rng,
                    std::vector<RoundStats>* stats_out, bool reverse_flips_polarity) {
  if (dataset.samples.empty()) throw std::invalid_argument("self_train: empty dataset");
  if (config.rounds < 1) throw std::invalid_argument("self_train: rounds must be >= 1");

  const std::size_t n_params = model.param_count();
  std::vector<double> grads(n_params), pseudo_grads(n_params);

  for (int round = 1; round <= config.rounds; ++round) {
    RoundStats stats;
    stats.round = round;

    // Pseudo labels are regenerated from the current model each round.
    std::vector<PseudoLabelSet> pseudo(dataset.samples.size());
    bool use_pseudo = config.pseudo_weight != 0.0;
    if (use_pseudo) {
      for (std::size_t s = 0; s < dataset.samples.size(); ++s)
        pseudo[s] = pseudo_labels_for_window(model, *dataset.scene, dataset.samples[s].window,
                                             dataset.plan, config, mode,
                                             reverse_flips_polarity, &stats);
      if (stats.label_count > 0) {
        stats.mean_score /= static_cast<double>(stats.label_count);
      } else {
        // A label-free round must not assert background on every sub-window;
        // it falls back to the ground-truth term alone.
        std::fprintf(stderr, "self_train: round %d produced no pseudo labels\n", round);
        use_pseudo = false;
      }
    }

    // One epoch: per sample, one SGD step on the ground-truth loss of the
    // last sub-window plus the weighted pseudo losses of the earlier ones.
    for (std::size_t s = 0; s < dataset.samples.size(); ++s) {
      const LabeledWindow& lw = dataset.samples[s];
      const auto windows = slice_frequencies(lw.window, dataset.plan);
      std::fill(grads.begin(), grads.end(), 0.0);

      TrainSample gt_sample;
      gt_sample.frame = lw.input_frame;
      gt_sample.tensor_a = voxelize(dataset.scene->events, last_subwindow(windows), dataset.spec);
      gt_sample.gts = lw.gts;
      const StepNoise gt_noise = draw_step_noise(model, false, mode, true, rng);
      const LossBreakdown gt_loss = sample_loss(model, gt_sample, &gt_noise, mode, true, &grads);
      if (!std::isfinite(gt_loss.total))
        throw std::runtime_error("self_train: non-finite ground-truth loss");

      if (use_pseudo) {
        std::fill(pseudo_grads.begin(), pseudo_grads.end(), 0.0);
        for (std::size_t i = 0; i + 1 < windows.size(); ++i) {
          TrainSample ps;
          ps.frame = lw.input_frame;
          ps.tensor_a = voxelize(dataset.scene->events, windows[i], dataset.spec);
          ps.gts = pseudo[s].per_window[i];
          const StepNoise noise = draw_step_noise(model, false, mode, true, rng);
          const LossBreakdown pl = sample_loss(model, ps, &noise, mode, true, &pseudo_grads);
          if (!std::isfinite(pl.total))
            throw std::runtime_error("self_train: non-finite pseudo-label loss");
        }
        for (std::size_t i = 0; i < n_params; ++i)
          grads[i] += config.pseudo_weight * pseudo_grads[i];
      }

      auto& params = model.params();
      for (std::size_t i = 0; i < n_params; ++i) params[i] -= lr * grads[i];
      for (const auto& info : model.layout())
        if (info.name == "gate0.sigma" || info.name == "gate1.sigma")
          params[info.offset] = std::max(0.0, params[info.offset]);
    }

    if (stats_out) stats_out->push_back(stats);
  }
  return model;
}

}  // namespace evdet
