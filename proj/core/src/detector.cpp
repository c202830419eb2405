#include "evdet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace evdet {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Numerically stable binary cross-entropy on a logit.
double bce(double logit, double target) {
  const double m = logit > 0.0 ? logit : 0.0;
  return m - logit * target + std::log1p(std::exp(-std::abs(logit)));
}

struct ConvShape {
  int in_ch = 0, out_ch = 0;
  int in_h = 0, in_w = 0;
  int out_h() const { return (in_h - 1) / 2 + 1; }
  int out_w() const { return (in_w - 1) / 2 + 1; }
};

// 3x3 convolution, stride 2, pad 1.
void conv3x3s2_forward(const FeatureMap& in, std::span<const double> w, std::span<const double> b,
                       FeatureMap& out) {
  const int oh = out.height, ow = out.width;
  const int ic = in.channels, oc = out.channels;
  for (int o = 0; o < oc; ++o) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double acc = b[o];
        for (int c = 0; c < ic; ++c) {
          const std::size_t wbase = ((static_cast<std::size_t>(o) * ic + c) * 3) * 3;
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = 2 * oy + ky - 1;
            if (iy < 0 || iy >= in.height) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = 2 * ox + kx - 1;
              if (ix < 0 || ix >= in.width) continue;
              acc += w[wbase + static_cast<std::size_t>(ky) * 3 + kx] * in.at(c, iy, ix);
            }
          }
        }
        out.at(o, oy, ox) = acc;
      }
    }
  }
}

void conv3x3s2_backward(const FeatureMap& in, std::span<const double> w, const FeatureMap& d_out,
                        FeatureMap& d_in, std::span<double> d_w, std::span<double> d_b) {
  const int oh = d_out.height, ow = d_out.width;
  const int ic = in.channels, oc = d_out.channels;
  for (int o = 0; o < oc; ++o) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const double g = d_out.at(o, oy, ox);
        if (g == 0.0) continue;
        d_b[o] += g;
        for (int c = 0; c < ic; ++c) {
          const std::size_t wbase = ((static_cast<std::size_t>(o) * ic + c) * 3) * 3;
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = 2 * oy + ky - 1;
            if (iy < 0 || iy >= in.height) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = 2 * ox + kx - 1;
              if (ix < 0 || ix >= in.width) continue;
              const std::size_t wi = wbase + static_cast<std::size_t>(ky) * 3 + kx;
              d_w[wi] += g * in.at(c, iy, ix);
              d_in.at(c, iy, ix) += g * w[wi];
            }
          }
        }
      }
    }
  }
}

void conv3x3s1_forward(const FeatureMap& in, std::span<const double> w, std::span<const double> b,
                       FeatureMap& out) {
  const int ic = in.channels, oc = out.channels;
  for (int o = 0; o < oc; ++o) {
    for (int oy = 0; oy < out.height; ++oy) {
      for (int ox = 0; ox < out.width; ++ox) {
        double acc = b[o];
        for (int c = 0; c < ic; ++c) {
          const std::size_t wbase = ((static_cast<std::size_t>(o) * ic + c) * 3) * 3;
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = oy + ky - 1;
            if (iy < 0 || iy >= in.height) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = ox + kx - 1;
              if (ix < 0 || ix >= in.width) continue;
              acc += w[wbase + static_cast<std::size_t>(ky) * 3 + kx] * in.at(c, iy, ix);
            }
          }
        }
        out.at(o, oy, ox) = acc;
      }
    }
  }
}

void conv3x3s1_backward(const FeatureMap& in, std::span<const double> w, const FeatureMap& d_out,
                        FeatureMap& d_in, std::span<double> d_w, std::span<double> d_b) {
  const int ic = in.channels, oc = d_out.channels;
  for (int o = 0; o < oc; ++o) {
    for (int oy = 0; oy < d_out.height; ++oy) {
      for (int ox = 0; ox < d_out.width; ++ox) {
        const double g = d_out.at(o, oy, ox);
        if (g == 0.0) continue;
        d_b[o] += g;
        for (int c = 0; c < ic; ++c) {
          const std::size_t wbase = ((static_cast<std::size_t>(o) * ic + c) * 3) * 3;
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = oy + ky - 1;
            if (iy < 0 || iy >= in.height) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = ox + kx - 1;
              if (ix < 0 || ix >= in.width) continue;
              const std::size_t wi = wbase + static_cast<std::size_t>(ky) * 3 + kx;
              d_w[wi] += g * in.at(c, iy, ix);
              d_in.at(c, iy, ix) += g * w[wi];
            }
          }
        }
      }
    }
  }
}

void relu_forward(const FeatureMap& pre, FeatureMap& act) {
  for (std::size_t i = 0; i < pre.data.size(); ++i)
    act.data[i] = pre.data[i] > 0.0 ? pre.data[i] : 0.0;
}

void relu_backward(const FeatureMap& pre, const FeatureMap& d_act, FeatureMap& d_pre) {
  for (std::size_t i = 0; i < pre.data.size(); ++i)
    d_pre.data[i] = pre.data[i] > 0.0 ? d_act.data[i] : 0.0;
}

void avgpool2_forward(const FeatureMap& in, FeatureMap& out) {
  for (int c = 0; c < in.channels; ++c)
    for (int oy = 0; oy < out.height; ++oy)
      for (int ox = 0; ox < out.width; ++ox)
        out.at(c, oy, ox) = 0.25 * (in.at(c, 2 * oy, 2 * ox) + in.at(c, 2 * oy, 2 * ox + 1) +
                                    in.at(c, 2 * oy + 1, 2 * ox) + in.at(c, 2 * oy + 1, 2 * ox + 1));
}

void avgpool2_backward(const FeatureMap& d_out, FeatureMap& d_in) {
  for (int c = 0; c < d_out.channels; ++c)
    for (int oy = 0; oy < d_out.height; ++oy)
      for (int ox = 0; ox < d_out.width; ++ox) {
        const double g = 0.25 * d_out.at(c, oy, ox);
        d_in.at(c, 2 * oy, 2 * ox) += g;
        d_in.at(c, 2 * oy, 2 * ox + 1) += g;
        d_in.at(c, 2 * oy + 1, 2 * ox) += g;
        d_in.at(c, 2 * oy + 1, 2 * ox + 1) += g;
      }
}

// Decoded cell box and the partials needed for the IoU chain rule.
struct DecodedCell {
  Box box;
  double sig_tx = 0.0, sig_ty = 0.0;  // sigmoid values of the center offsets
  double w = 0.0, h = 0.0;            // decoded sizes
};

DecodedCell decode_cell(int gx, int gy, double tx, double ty, double tw, double th) {
  DecodedCell d;
  d.sig_tx = sigmoid(tx);
  d.sig_ty = sigmoid(ty);
  const double cx = (gx + d.sig_tx) * kHeadStride;
  const double cy = (gy + d.sig_ty) * kHeadStride;
  d.w = kHeadStride * std::exp(tw);
  d.h = kHeadStride * std::exp(th);
  d.box = {cx - d.w / 2.0, cy - d.h / 2.0, cx + d.w / 2.0, cy + d.h / 2.0};
  return d;
}

}  // namespace

// ---------------------------------------------------------------------------
// Model construction

ToyModel::ToyModel(const ToyModelConfig& config, Rng& init_rng) : config_(config) {
  if (config.input_height % kHeadStride != 0 || config.input_width % kHeadStride != 0)
    throw std::invalid_argument("toy model: input dims must be divisible by the head stride");
  if (config.input_height < kHeadStride || config.input_width < kHeadStride)
    throw std::invalid_argument("toy model: input too small");
  if (config.time_bins < 1 || config.num_classes < 1)
    throw std::invalid_argument("toy model: bad config");

  const int ec = 2 * config.time_bins;
  const int s1 = config.stage1_channels;
  const int s2 = config.stage2_channels;
  const int nc = config.num_classes;
  const int head_in = s1 + s2;

  auto add = [&](const std::string& name, std::vector<int> shape) {
    std::size_t count = 1;
    for (int d : shape) count *= static_cast<std::size_t>(d);
    layout_.push_back({name, std::move(shape), params_.size(), count});
    params_.resize(params_.size() + count, 0.0);
    return layout_.size() - 1;
  };

  add("event.conv1.w", {s1, ec, 3, 3});
  add("event.conv1.b", {s1});
  add("event.conv2.w", {s2, s1, 3, 3});
  add("event.conv2.b", {s2});
  add("frame.conv1.w", {s1, 1, 3, 3});
  add("frame.conv1.b", {s1});
  add("frame.conv2.w", {s2, s1, 3, 3});
  add("frame.conv2.b", {s2});
  add("gate0.w", {2 * s1, 2});
  add("gate0.sigma", {1});
  add("gate1.w", {2 * s2, 2});
  add("gate1.sigma", {1});
  // 3x3 head kernels: a head cell must reach the edge evidence of objects
  // wider than one stride cell, which a 1x1 head cannot see.
  add("head.obj.w", {1, head_in, 3, 3});
  add("head.obj.b", {1});
  add("head.cls.w", {nc, head_in, 3, 3});
  add("head.cls.b", {nc});
  add("head.box.w", {4, head_in, 3, 3});
  add("head.box.b", {4});

  // He-uniform for conv/head weights; gate maps start at zero (balanced
  // alpha = beta = 1/2) with a small noise scale. Biases draw small nonzero
  // values: an exactly-zero bias parks dead-input cells on the relu kink.
  auto init_uniform = [&](const std::string& name, double limit) {
    for (const TensorInfo& info : layout_)
      if (info.name == name)
        for (std::size_t i = 0; i < info.count; ++i)
          params_[info.offset + i] = init_rng.uniform(-limit, limit);
  };
  auto he = [](int fan_in) { return std::sqrt(6.0 / fan_in); };
  init_uniform("event.conv1.w", he(ec * 9));
  init_uniform("event.conv1.b", 0.05);
  init_uniform("event.conv2.w", he(s1 * 9));
  init_uniform("event.conv2.b", 0.05);
  init_uniform("frame.conv1.w", he(9));
  init_uniform("frame.conv1.b", 0.05);
  init_uniform("frame.conv2.w", he(s1 * 9));
  init_uniform("frame.conv2.b", 0.05);
  init_uniform("head.obj.w", he(head_in * 9));
  init_uniform("head.obj.b", 0.05);
  init_uniform("head.cls.w", he(head_in * 9));
  init_uniform("head.cls.b", 0.05);
  init_uniform("head.box.w", he(head_in * 9));
  init_uniform("head.box.b", 0.05);
  for (const TensorInfo& info : layout_)
    if (info.name == "gate0.sigma" || info.name == "gate1.sigma")
      params_[info.offset] = 0.05;
}

ToyModel::ToyModel(const ToyModelConfig& config, std::vector<double> params) : config_(config) {
  Rng dummy(0);
  ToyModel reference(config, dummy);
  if (params.size() != reference.params_.size())
    throw std::invalid_argument("toy model: parameter vector size mismatch");
  layout_ = std::move(reference.layout_);
  params_ = std::move(params);
}

namespace {

const ToyModel::TensorInfo& find_tensor(const ToyModel& model, const std::string& name) {
  for (const auto& info : model.layout())
    if (info.name == name) return info;
  throw std::logic_error("toy model: unknown tensor " + name);
}

std::span<const double> tensor_view(const ToyModel& model, const std::string& name) {
  const auto& info = find_tensor(model, name);
  return {model.params().data() + info.offset, info.count};
}

std::span<double> tensor_view(std::vector<double>& buf, const ToyModel& model,
                              const std::string& name) {
  const auto& info = find_tensor(model, name);
  return {buf.data() + info.offset, info.count};
}

}  // namespace

GateParams ToyModel::gate_params(int scale) const {
  const std::string prefix = scale == 0 ? "gate0" : "gate1";
  const auto& w = find_tensor(*this, prefix + ".w");
  const auto& s = find_tensor(*this, prefix + ".sigma");
  GateParams p;
  p.in_channels = w.shape[0];
  p.w.assign(params_.begin() + w.offset, params_.begin() + w.offset + w.count);
  p.sigma = params_[s.offset];
  p.lambda_reg = config_.lambda_reg;
  return p;
}

void ToyModel::set_gate_params(int scale, const GateParams& params) {
  const std::string prefix = scale == 0 ? "gate0" : "gate1";
  const auto& w = find_tensor(*this, prefix + ".w");
  const auto& s = find_tensor(*this, prefix + ".sigma");
  if (params.w.size() != w.count)
    throw std::invalid_argument("set_gate_params: weight size mismatch");
  std::copy(params.w.begin(), params.w.end(), params_.begin() + w.offset);
  params_[s.offset] = params.sigma;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

struct BranchCache {
  FeatureMap input;
  FeatureMap pre1, act1, pre2, act2;
};

struct FusionPathCache {
  GateCache gate[2];      // per scale
  FeatureMap fused[2];
};

struct ForwardTrace {
  BranchCache event_a;
  std::optional<BranchCache> event_b;
  std::optional<BranchCache> frame;
  std::optional<FusionPathCache> fusion_a;
  std::optional<FusionPathCache> fusion_b;
  std::vector<GateWeights> gate_maps;  // pooled for the regularizer, call order
  FeatureMap comb0, comb1;
  FeatureMap pooled0, cat;
  HeadOutputs head;
  double fuse_reg = 0.0;
};

FeatureMap tensor_to_features(const EventTensor& tensor) {
  FeatureMap m = FeatureMap::zeros(2 * tensor.spec.time_bins, tensor.spec.height,
                                   tensor.spec.width);
  // Log compression keeps short sparse windows and long dense ones on a
  // comparable activation scale; counts stay monotone and zero maps to zero.
  for (std::size_t i = 0; i < tensor.data.size(); ++i)
    m.data[i] = std::log1p(static_cast<double>(tensor.data[i]));
  return m;
}

FeatureMap frame_to_features(const Frame& frame, int height, int width) {
  if (frame.pixels.size() != static_cast<std::size_t>(height) * width)
    throw std::invalid_argument("detector: frame size does not match model input dims");
  FeatureMap m = FeatureMap::zeros(1, height, width);
  for (std::size_t i = 0; i < frame.pixels.size(); ++i)
    m.data[i] = static_cast<double>(frame.pixels[i]);
  return m;
}

void branch_forward(const ToyModel& model, const char* prefix, FeatureMap input,
                    BranchCache& out) {
  const auto w1 = tensor_view(model, std::string(prefix) + ".conv1.w");
  const auto b1 = tensor_view(model, std::string(prefix) + ".conv1.b");
  const auto w2 = tensor_view(model, std::string(prefix) + ".conv2.w");
  const auto b2 = tensor_view(model, std::string(prefix) + ".conv2.b");
  const int s1 = model.config().stage1_channels;
  const int s2 = model.config().stage2_channels;
  const int h1 = input.height / 2, w1d = input.width / 2;
  out.input = std::move(input);
  out.pre1 = FeatureMap::zeros(s1, h1, w1d, 0);
  conv3x3s2_forward(out.input, w1, b1, out.pre1);
  out.act1 = FeatureMap::zeros(s1, h1, w1d, 0);
  relu_forward(out.pre1, out.act1);
  out.pre2 = FeatureMap::zeros(s2, h1 / 2, w1d / 2, 1);
  conv3x3s2_forward(out.act1, w2, b2, out.pre2);
  out.act2 = FeatureMap::zeros(s2, h1 / 2, w1d / 2, 1);
  relu_forward(out.pre2, out.act2);
}

void branch_backward(const ToyModel& model, const char* prefix, const BranchCache& cache,
                     const FeatureMap& d_act1_total, const FeatureMap& d_act2_total,
                     std::vector<double>& grad, FeatureMap* d_input) {
  const auto w1 = tensor_view(model, std::string(prefix) + ".conv1.w");
  const auto w2 = tensor_view(model, std::string(prefix) + ".conv2.w");
  auto d_w1 = tensor_view(grad, model, std::string(prefix) + ".conv1.w");
  auto d_b1 = tensor_view(grad, model, std::string(prefix) + ".conv1.b");
  auto d_w2 = tensor_view(grad, model, std::string(prefix) + ".conv2.w");
  auto d_b2 = tensor_view(grad, model, std::string(prefix) + ".conv2.b");

  FeatureMap d_pre2 = FeatureMap::zeros(cache.pre2.channels, cache.pre2.height, cache.pre2.width);
  relu_backward(cache.pre2, d_act2_total, d_pre2);
  FeatureMap d_act1 = d_act1_total;  // conv2 contribution accumulates on top
  conv3x3s2_backward(cache.act1, w2, d_pre2, d_act1, d_w2, d_b2);

  FeatureMap d_pre1 = FeatureMap::zeros(cache.pre1.channels, cache.pre1.height, cache.pre1.width);
  relu_backward(cache.pre1, d_act1, d_pre1);
  FeatureMap d_in = FeatureMap::zeros(cache.input.channels, cache.input.height, cache.input.width);
  conv3x3s2_backward(cache.input, w1, d_pre1, d_in, d_w1, d_b1);
  if (d_input) *d_input = std::move(d_in);
}

// Gate + fuse for one event path at both scales. Consumes noise slots in call
// order; an empty slot list runs the eval path.
void fusion_forward(const ToyModel& model, const BranchCache& event, const BranchCache& frame,
                    const StepNoise* noise, std::size_t& noise_cursor, FusionPathCache& out,
                    std::vector<GateWeights>& gate_maps) {
  for (int scale = 0; scale < 2; ++scale) {
    const FeatureMap& he = scale == 0 ? event.act1 : event.act2;
    const FeatureMap& hf = scale == 0 ? frame.act1 : frame.act2;
    const FeatureMap shared = concat_features(he, hf);
    const GateParams gp = model.gate_params(scale);
    std::span<const double> eps;
    if (noise) {
      if (noise_cursor >= noise->per_gate.size())
        throw std::logic_error("detector: noise slots exhausted");
      eps = noise->per_gate[noise_cursor++];
    }
    GateWeights w = gate_weights_with_noise(shared, gp, eps, &out.gate[scale],
                                            model.config().noise_per_map);
    out.fused[scale] = fuse(he, hf, w);
    gate_maps.push_back(std::move(w));
  }
}

ForwardTrace forward(const ToyModel& model, const TrainSample& sample, const StepNoise* noise,
                     DetectMode mode, bool training) {
  const ToyModelConfig& cfg = model.config();
  if (sample.tensor_a.spec.height != cfg.input_height ||
      sample.tensor_a.spec.width != cfg.input_width ||
      sample.tensor_a.spec.time_bins != cfg.time_bins)
    throw std::invalid_argument("detector: event tensor spec does not match model config");

  ForwardTrace t;
  branch_forward(model, "event", tensor_to_features(sample.tensor_a), t.event_a);
  if (sample.tensor_b) {
    if (sample.tensor_b->spec.height != cfg.input_height ||
        sample.tensor_b->spec.width != cfg.input_width ||
        sample.tensor_b->spec.time_bins != cfg.time_bins)
      throw std::invalid_argument("detector: second tensor spec does not match model config");
    t.event_b.emplace();
    branch_forward(model, "event", tensor_to_features(*sample.tensor_b), *t.event_b);
  }

  if (mode == DetectMode::fused) {
    if (!sample.frame)
      throw std::invalid_argument("detector: fused mode requires a frame");
    t.frame.emplace();
    branch_forward(model, "frame",
                   frame_to_features(*sample.frame, cfg.input_height, cfg.input_width),
                   *t.frame);
    std::size_t cursor = 0;
    const StepNoise* use_noise = training ? noise : nullptr;
    t.fusion_a.emplace();
    fusion_forward(model, t.event_a, *t.frame, use_noise, cursor, *t.fusion_a, t.gate_maps);
    if (t.event_b) {
      t.fusion_b.emplace();
      fusion_forward(model, *t.event_b, *t.frame, use_noise, cursor, *t.fusion_b, t.gate_maps);
    }
    t.comb0 = t.fusion_b ? combine_frequencies(t.fusion_a->fused[0], t.fusion_b->fused[0])
                         : t.fusion_a->fused[0];
    t.comb1 = t.fusion_b ? combine_frequencies(t.fusion_a->fused[1], t.fusion_b->fused[1])
                         : t.fusion_a->fused[1];
    t.fuse_reg = fusion_regularizer(t.gate_maps, cfg.lambda_reg);
  } else {
    // Event-only: the gate is bypassed with alpha == 1, so the fused map is
    // the event map itself and frames are never touched.
    t.comb0 = t.event_b ? combine_frequencies(t.event_a.act1, t.event_b->act1) : t.event_a.act1;
    t.comb1 = t.event_b ? combine_frequencies(t.event_a.act2, t.event_b->act2) : t.event_a.act2;
  }

  const int gh = model.grid_height();
  const int gw = model.grid_width();
  t.pooled0 = FeatureMap::zeros(cfg.stage1_channels, gh, gw);
  avgpool2_forward(t.comb0, t.pooled0);
  t.cat = concat_features(t.pooled0, t.comb1);

  t.head.obj = FeatureMap::zeros(1, gh, gw);
  conv3x3s1_forward(t.cat, tensor_view(model, "head.obj.w"), tensor_view(model, "head.obj.b"),
                    t.head.obj);
  t.head.cls = FeatureMap::zeros(cfg.num_classes, gh, gw);
  conv3x3s1_forward(t.cat, tensor_view(model, "head.cls.w"), tensor_view(model, "head.cls.b"),
                    t.head.cls);
  t.head.box = FeatureMap::zeros(4, gh, gw);
  conv3x3s1_forward(t.cat, tensor_view(model, "head.box.w"), tensor_view(model, "head.box.b"),
                    t.head.box);
  return t;
}

void backward(const ToyModel& model, const TrainSample& sample, const ForwardTrace& t,
              const HeadOutputs& d_head, DetectMode mode, std::vector<double>& grad) {
  const ToyModelConfig& cfg = model.config();
  const int gh = model.grid_height();
  const int gw = model.grid_width();

  // Head.
  FeatureMap d_cat = FeatureMap::zeros(t.cat.channels, gh, gw);
  conv3x3s1_backward(t.cat, tensor_view(model, "head.obj.w"), d_head.obj, d_cat,
                     tensor_view(grad, model, "head.obj.w"),
                     tensor_view(grad, model, "head.obj.b"));
  conv3x3s1_backward(t.cat, tensor_view(model, "head.cls.w"), d_head.cls, d_cat,
                     tensor_view(grad, model, "head.cls.w"),
                     tensor_view(grad, model, "head.cls.b"));
  conv3x3s1_backward(t.cat, tensor_view(model, "head.box.w"), d_head.box, d_cat,
                     tensor_view(grad, model, "head.box.w"),
                     tensor_view(grad, model, "head.box.b"));

  // Split the concatenation, then unpool scale 0.
  FeatureMap d_pooled0 = FeatureMap::zeros(cfg.stage1_channels, gh, gw);
  FeatureMap d_comb1 = FeatureMap::zeros(cfg.stage2_channels, gh, gw);
  std::copy(d_cat.data.begin(), d_cat.data.begin() + d_pooled0.data.size(),
            d_pooled0.data.begin());
  std::copy(d_cat.data.begin() + d_pooled0.data.size(), d_cat.data.end(), d_comb1.data.begin());
  FeatureMap d_comb0 = FeatureMap::zeros(t.comb0.channels, t.comb0.height, t.comb0.width);
  avgpool2_backward(d_pooled0, d_comb0);

  if (mode == DetectMode::fused) {
    const BranchCache& frame = *t.frame;
    FeatureMap d_f_act1 = FeatureMap::zeros(frame.act1.channels, frame.act1.height,
                                            frame.act1.width);
    FeatureMap d_f_act2 = FeatureMap::zeros(frame.act2.channels, frame.act2.height,
                                            frame.act2.width);

    // Regularizer gradients on alpha/beta, pooled across every gate call.
    std::vector<std::vector<double>> d_alpha(t.gate_maps.size()), d_beta(t.gate_maps.size());
    for (std::size_t i = 0; i < t.gate_maps.size(); ++i) {
      d_alpha[i].assign(t.gate_maps[i].alpha.size(), 0.0);
      d_beta[i].assign(t.gate_maps[i].beta.size(), 0.0);
    }
    fusion_regularizer_backward(t.gate_maps, cfg.lambda_reg, d_alpha, d_beta);

    auto path_backward = [&](const BranchCache& event, const FusionPathCache& fusion,
                             std::size_t gate_base, const std::optional<BranchCache>& event_other,
                             FeatureMap& d_e_act1, FeatureMap& d_e_act2) {
      (void)event_other;
      for (int scale = 0; scale < 2; ++scale) {
        const FeatureMap& he = scale == 0 ? event.act1 : event.act2;
        const FeatureMap& hf = scale == 0 ? frame.act1 : frame.act2;
        const FeatureMap& d_comb = scale == 0 ? d_comb0 : d_comb1;
        FeatureMap& d_he = scale == 0 ? d_e_act1 : d_e_act2;
        FeatureMap& d_hf = scale == 0 ? d_f_act1 : d_f_act2;
        const std::size_t gi = gate_base + scale;

        fuse_backward(he, hf, t.gate_maps[gi], d_comb, d_he, d_hf, d_alpha[gi], d_beta[gi]);

        const GateParams gp = model.gate_params(scale);
        GateGrads gg = gate_gradients(fusion.gate[scale], gp, d_alpha[gi], d_beta[gi]);
        const std::string prefix = scale == 0 ? "gate0" : "gate1";
        auto d_gw = tensor_view(grad, model, prefix + ".w");
        for (std::size_t i = 0; i < gg.d_w.size(); ++i) d_gw[i] += gg.d_w[i];
        tensor_view(grad, model, prefix + ".sigma")[0] += gg.d_sigma;
        // Shared-feature gradient splits back into the two branches.
        const std::size_t e_size = he.data.size();
        for (std::size_t i = 0; i < e_size; ++i) d_he.data[i] += gg.d_h_shared.data[i];
        for (std::size_t i = 0; i < d_hf.data.size(); ++i)
          d_hf.data[i] += gg.d_h_shared.data[e_size + i];
      }
    };

    FeatureMap d_ea1 = FeatureMap::zeros(t.event_a.act1.channels, t.event_a.act1.height,
                                         t.event_a.act1.width);
    FeatureMap d_ea2 = FeatureMap::zeros(t.event_a.act2.channels, t.event_a.act2.height,
                                         t.event_a.act2.width);
    path_backward(t.event_a, *t.fusion_a, 0, t.event_b, d_ea1, d_ea2);
    branch_backward(model, "event", t.event_a, d_ea1, d_ea2, grad, nullptr);

    if (t.event_b) {
      FeatureMap d_eb1 = FeatureMap::zeros(d_ea1.channels, d_ea1.height, d_ea1.width);
      FeatureMap d_eb2 = FeatureMap::zeros(d_ea2.channels, d_ea2.height, d_ea2.width);
      path_backward(*t.event_b, *t.fusion_b, 2, std::nullopt, d_eb1, d_eb2);
      branch_backward(model, "event", *t.event_b, d_eb1, d_eb2, grad, nullptr);
    }
    branch_backward(model, "frame", frame, d_f_act1, d_f_act2, grad, nullptr);
  } else {
    branch_backward(model, "event", t.event_a, d_comb0, d_comb1, grad, nullptr);
    if (t.event_b) branch_backward(model, "event", *t.event_b, d_comb0, d_comb1, grad, nullptr);
  }
  (void)sample;
}

}  // namespace

// ---------------------------------------------------------------------------
// Losses

namespace {

struct Assignment {
  // Cell index -> gt index, -1 where negative.
  std::vector<int> cell_gt;
  int positives = 0;
};

Assignment assign_targets(std::span<const GroundTruthBox> gts, int gh, int gw) {
  Assignment a;
  a.cell_gt.assign(static_cast<std::size_t>(gh) * gw, -1);
  for (std::size_t gi = 0; gi < gts.size(); ++gi) {
    const Box& b = gts[gi].box;
    if (!(b.area() > 0.0))
      throw std::invalid_argument("detection_loss: ground truth box must have positive area");
    const double cx = 0.5 * (b.x_min + b.x_max);
    const double cy = 0.5 * (b.y_min + b.y_max);
    int gx = static_cast<int>(std::floor(cx / kHeadStride));
    int gy = static_cast<int>(std::floor(cy / kHeadStride));
    gx = std::clamp(gx, 0, gw - 1);
    gy = std::clamp(gy, 0, gh - 1);
    const std::size_t cell = static_cast<std::size_t>(gy) * gw + gx;
    // First ground truth by index keeps a contested cell.
    if (a.cell_gt[cell] == -1) {
      a.cell_gt[cell] = static_cast<int>(gi);
      ++a.positives;
    }
  }
  return a;
}

constexpr double kOffsetClamp = 1e-4;

void offset_targets(const GroundTruthBox& gt, int gx, int gy, double out[4]) {
  const double cx = 0.5 * (gt.box.x_min + gt.box.x_max);
  const double cy = 0.5 * (gt.box.y_min + gt.box.y_max);
  const double fx = std::clamp(cx / kHeadStride - gx, kOffsetClamp, 1.0 - kOffsetClamp);
  const double fy = std::clamp(cy / kHeadStride - gy, kOffsetClamp, 1.0 - kOffsetClamp);
  out[0] = std::log(fx / (1.0 - fx));
  out[1] = std::log(fy / (1.0 - fy));
  out[2] = std::log(gt.box.width() / kHeadStride);
  out[3] = std::log(gt.box.height() / kHeadStride);
}

// IoU of the decoded box against the target plus d(iou)/d(corners).
double iou_with_grad(const Box& a, const Box& b, double d_corners[4]) {
  std::fill(d_corners, d_corners + 4, 0.0);
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double area_a = a.area();
  const double uni = area_a + b.area() - inter;
  const double iou_v = inter / uni;

  // dI/dc: the moving corner only matters when it is the binding one.
  const double dI[4] = {a.x_min > b.x_min ? -ih : 0.0, a.y_min > b.y_min ? -iw : 0.0,
                        a.x_max < b.x_max ? ih : 0.0, a.y_max < b.y_max ? iw : 0.0};
  const double dA[4] = {-a.height(), -a.width(), a.height(), a.width()};
  for (int i = 0; i < 4; ++i) {
    const double dU = dA[i] - dI[i];
    d_corners[i] = (dI[i] * uni - inter * dU) / (uni * uni);
  }
  return iou_v;
}

}  // namespace

LossBreakdown detection_loss_grad(const HeadOutputs& preds, std::span<const GroundTruthBox> gts,
                                  double fuse_reg, HeadOutputs& d_preds) {
  const int gh = preds.obj.height;
  const int gw = preds.obj.width;
  const int nc = preds.cls.channels;
  const std::size_t n_cells = static_cast<std::size_t>(gh) * gw;
  const Assignment assign = assign_targets(gts, gh, gw);
  const int n_pos = assign.positives;

  LossBreakdown loss;
  loss.fuse_reg = fuse_reg;

  const bool with_grad = !d_preds.obj.data.empty();

  double obj_sum = 0.0;
  for (std::size_t cell = 0; cell < n_cells; ++cell) {
    const int gy = static_cast<int>(cell) / gw;
    const int gx = static_cast<int>(cell) % gw;
    const double target = assign.cell_gt[cell] >= 0 ? 1.0 : 0.0;
    const double logit = preds.obj.at(0, gy, gx);
    obj_sum += bce(logit, target);
    if (with_grad)
      d_preds.obj.at(0, gy, gx) += (sigmoid(logit) - target) / static_cast<double>(n_cells);
  }
  const double obj_mean = obj_sum / static_cast<double>(n_cells);

  double cls_sum = 0.0, iou_sum = 0.0, l1_sum = 0.0;
  if (n_pos > 0) {
    for (std::size_t cell = 0; cell < n_cells; ++cell) {
      const int gi = assign.cell_gt[cell];
      if (gi < 0) continue;
      const GroundTruthBox& gt = gts[static_cast<std::size_t>(gi)];
      const int gy = static_cast<int>(cell) / gw;
      const int gx = static_cast<int>(cell) % gw;

      for (int c = 0; c < nc; ++c) {
        const double target = c == gt.class_id ? 1.0 : 0.0;
        const double logit = preds.cls.at(c, gy, gx);
        cls_sum += bce(logit, target);
        if (with_grad)
          d_preds.cls.at(c, gy, gx) +=
              (sigmoid(logit) - target) / (static_cast<double>(n_pos) * nc);
      }

      double tgt[4];
      offset_targets(gt, gx, gy, tgt);
      const double tx = preds.box.at(0, gy, gx);
      const double ty = preds.box.at(1, gy, gx);
      const double tw = preds.box.at(2, gy, gx);
      const double th = preds.box.at(3, gy, gx);
      const double raw[4] = {tx, ty, tw, th};
      for (int i = 0; i < 4; ++i) {
        l1_sum += std::abs(raw[i] - tgt[i]);
        if (with_grad) {
          const double diff = raw[i] - tgt[i];
          const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
          d_preds.box.at(i, gy, gx) += sign / (static_cast<double>(n_pos) * 4.0);
        }
      }

      const DecodedCell dec = decode_cell(gx, gy, tx, ty, tw, th);
      double d_corners[4];
      const double iou_v = iou_with_grad(dec.box, gt.box, d_corners);
      iou_sum += 1.0 - iou_v;
      if (with_grad) {
        // Chain through the decode: centers via sigmoid, sizes via exp.
        const double scale = -1.0 / static_cast<double>(n_pos);
        const double dcx = d_corners[0] + d_corners[2];
        const double dcy = d_corners[1] + d_corners[3];
        const double dw = 0.5 * (d_corners[2] - d_corners[0]);
        const double dh = 0.5 * (d_corners[3] - d_corners[1]);
        d_preds.box.at(0, gy, gx) +=
            scale * dcx * kHeadStride * dec.sig_tx * (1.0 - dec.sig_tx);
        d_preds.box.at(1, gy, gx) +=
            scale * dcy * kHeadStride * dec.sig_ty * (1.0 - dec.sig_ty);
        d_preds.box.at(2, gy, gx) += scale * dw * dec.w;
        d_preds.box.at(3, gy, gx) += scale * dh * dec.h;
      }
    }
  }

  loss.iou_loss = n_pos > 0 ? iou_sum / n_pos : 0.0;
  loss.cls_loss = obj_mean + (n_pos > 0 ? cls_sum / (static_cast<double>(n_pos) * nc) : 0.0);
  loss.reg_loss = n_pos > 0 ? l1_sum / (static_cast<double>(n_pos) * 4.0) : 0.0;
  loss.total = loss.iou_loss + loss.cls_loss + loss.reg_loss + loss.fuse_reg;
  return loss;
}

LossBreakdown detection_loss(const HeadOutputs& preds, std::span<const GroundTruthBox> gts,
                             double fuse_reg) {
  HeadOutputs no_grad;
  return detection_loss_grad(preds, gts, fuse_reg, no_grad);
}

// ---------------------------------------------------------------------------
// Public entry points

StepNoise draw_step_noise(const ToyModel& model, bool dual_frequency, DetectMode mode,
                          bool training, Rng& rng) {
  StepNoise noise;
  if (!training || mode != DetectMode::fused) return noise;
  const ToyModelConfig& cfg = model.config();
  const int paths = dual_frequency ? 2 : 1;
  for (int q = 0; q < paths; ++q) {
    for (int scale = 0; scale < 2; ++scale) {
      const int h = cfg.input_height >> (scale + 1);
      const int w = cfg.input_width >> (scale + 1);
      const std::size_t n =
          cfg.noise_per_map ? 2 : 2 * static_cast<std::size_t>(h) * w;
      std::vector<double> eps(n);
      for (double& e : eps) e = rng.normal();
      noise.per_gate.push_back(std::move(eps));
    }
  }
  return noise;
}

LossBreakdown sample_loss(const ToyModel& model, const TrainSample& sample,
                          const StepNoise* noise, DetectMode mode, bool training,
                          std::vector<double>* grad_out) {
  const ForwardTrace trace = forward(model, sample, noise, mode, training);
  const int gh = model.grid_height();
  const int gw = model.grid_width();

  HeadOutputs d_head;
  if (grad_out) {
    if (grad_out->size() != model.param_count())
      throw std::invalid_argument("sample_loss: gradient buffer size mismatch");
    d_head.obj = FeatureMap::zeros(1, gh, gw);
    d_head.cls = FeatureMap::zeros(model.config().num_classes, gh, gw);
    d_head.box = FeatureMap::zeros(4, gh, gw);
  }
  const LossBreakdown loss =
      detection_loss_grad(trace.head, sample.gts, trace.fuse_reg, d_head);
  if (grad_out) backward(model, sample, trace, d_head, mode, *grad_out);
  return loss;
}

std::vector<Detection> detect(const ToyModel& model, const EventTensor& tensor,
                              const Frame* frame, DetectMode mode, std::int64_t t) {
  TrainSample sample;
  sample.frame = frame;
  sample.tensor_a = tensor;
  const ForwardTrace trace = forward(model, sample, nullptr, mode, false);

  std::vector<Detection> out;
  const int gh = model.grid_height();
  const int gw = model.grid_width();
  const int nc = model.config().num_classes;
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      int best = 0;
      double best_logit = trace.head.cls.at(0, gy, gx);
      for (int c = 1; c < nc; ++c) {
        const double l = trace.head.cls.at(c, gy, gx);
        if (l > best_logit) {
          best_logit = l;
          best = c;
        }
      }
      const double score = sigmoid(trace.head.obj.at(0, gy, gx)) * sigmoid(best_logit);
      if (score < model.config().score_threshold) continue;
      const DecodedCell dec =
          decode_cell(gx, gy, trace.head.box.at(0, gy, gx), trace.head.box.at(1, gy, gx),
                      trace.head.box.at(2, gy, gx), trace.head.box.at(3, gy, gx));
      out.push_back({dec.box, best, score, t});
    }
  }
  return out;
}

LossBreakdown train_step(ToyModel& model, std::span<const TrainSample> batch, double lr,
                         Rng& rng, DetectMode mode) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  std::vector<double> grad(model.param_count(), 0.0);
  LossBreakdown mean;
  for (const TrainSample& sample : batch) {
    const StepNoise noise =
        draw_step_noise(model, sample.tensor_b.has_value(), mode, true, rng);
    const LossBreakdown loss = sample_loss(model, sample, &noise, mode, true, &grad);
    if (!std::isfinite(loss.total))
      throw std::runtime_error("train_step: non-finite loss (iou=" +
                               std::to_string(loss.iou_loss) + ", cls=" +
                               std::to_string(loss.cls_loss) + ", reg=" +
                               std::to_string(loss.reg_loss) + ")");
    mean.iou_loss += loss.iou_loss;
    mean.cls_loss += loss.cls_loss;
    mean.reg_loss += loss.reg_loss;
    mean.fuse_reg += loss.fuse_reg;
    mean.total += loss.total;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  mean.iou_loss *= inv;
  mean.cls_loss *= inv;
  mean.reg_loss *= inv;
  mean.fuse_reg *= inv;
  mean.total *= inv;

  auto& params = model.params();
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * inv * grad[i];
  // Keep the noise scales in their domain.
  for (const auto& info : model.layout())
    if (info.name == "gate0.sigma" || info.name == "gate1.sigma")
      params[info.offset] = std::max(0.0, params[info.offset]);
  return mean;
}

}  // namespace evdet
