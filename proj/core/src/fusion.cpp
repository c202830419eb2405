#include "evdet/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace evdet {

bool is_finite(const FeatureMap& m) {
  for (double v : m.data)
    if (!std::isfinite(v)) return false;
  return true;
}

FeatureMap concat_features(const FeatureMap& h_e, const FeatureMap& h_f) {
  if (h_e.height != h_f.height || h_e.width != h_f.width)
    throw std::invalid_argument("concat_features: spatial dims must match");
  FeatureMap out = FeatureMap::zeros(h_e.channels + h_f.channels, h_e.height, h_e.width,
                                     h_e.scale_index);
  std::copy(h_e.data.begin(), h_e.data.end(), out.data.begin());
  std::copy(h_f.data.begin(), h_f.data.end(), out.data.begin() + h_e.data.size());
  return out;
}

GateWeights gate_weights_with_noise(const FeatureMap& h_shared, const GateParams& params,
                                    std::span<const double> eps, GateCache* cache,
                                    bool noise_per_map) {
  if (params.in_channels != h_shared.channels)
    throw std::invalid_argument("gate_weights: channel count does not match params");
  if (params.sigma < 0.0) throw std::invalid_argument("gate_weights: sigma must be >= 0");

  const int H = h_shared.height;
  const int W = h_shared.width;
  const int C = h_shared.channels;
  const std::size_t n = static_cast<std::size_t>(H) * W;
  const bool noisy = !eps.empty();
  if (noisy && eps.size() != (noise_per_map ? 2 : 2 * n))
    throw std::invalid_argument("gate_weights: noise draw count mismatch");

  GateWeights out;
  out.height = H;
  out.width = W;
  out.alpha.resize(n);
  out.beta.resize(n);

  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const std::size_t loc = static_cast<std::size_t>(y) * W + x;
      double l0 = 0.0, l1 = 0.0;
      for (int c = 0; c < C; ++c) {
        const double v = h_shared.at(c, y, x);
        l0 += v * params.w[static_cast<std::size_t>(c) * 2];
        l1 += v * params.w[static_cast<std::size_t>(c) * 2 + 1];
      }
      if (noisy) {
        const std::size_t base = noise_per_map ? 0 : 2 * loc;
        l0 += params.sigma * eps[base];
        l1 += params.sigma * eps[base + 1];
      }
      // Two-way softmax, computed against the max logit for stability.
      const double m = l0 > l1 ? l0 : l1;
      const double e0 = std::exp(l0 - m);
      const double e1 = std::exp(l1 - m);
      const double inv = 1.0 / (e0 + e1);
      out.alpha[loc] = e0 * inv;
      out.beta[loc] = e1 * inv;
    }
  }

  if (cache) {
    cache->h_shared = h_shared;
    cache->eps.assign(eps.begin(), eps.end());
    cache->weights = out;
    cache->training = noisy;
    cache->noise_per_map = noise_per_map;
  }
  return out;
}

GateWeights gate_weights(const FeatureMap& h_shared, const GateParams& params, bool training,
                         Rng& rng, GateCache* cache, bool noise_per_map) {
  std::vector<double> eps;
  if (training) {
    // Draw order is fixed: map-level pairs first, else location-major pairs.
    const std::size_t n = static_cast<std::size_t>(h_shared.height) * h_shared.width;
    eps.resize(noise_per_map ? 2 : 2 * n);
    for (double& e : eps) e = rng.normal();
  }
  return gate_weights_with_noise(h_shared, params, eps, cache, noise_per_map);
}

FeatureMap fuse(const FeatureMap& h_e, const FeatureMap& h_f, const GateWeights& weights) {
  if (!h_e.same_shape(h_f))
    throw std::invalid_argument("fuse: feature maps must have identical shape");
  if (weights.height != h_e.height || weights.width != h_e.width)
    throw std::invalid_argument("fuse: gate weights do not match spatial dims");
  FeatureMap out = FeatureMap::zeros(h_e.channels, h_e.height, h_e.width, h_e.scale_index);
  const std::size_t plane = static_cast<std::size_t>(h_e.height) * h_e.width;
  for (int c = 0; c < h_e.channels; ++c) {
    const std::size_t off = static_cast<std::size_t>(c) * plane;
    for (std::size_t loc = 0; loc < plane; ++loc)
      out.data[off + loc] =
          weights.alpha[loc] * h_e.data[off + loc] + weights.beta[loc] * h_f.data[off + loc];
  }
  return out;
}

FeatureMap combine_frequencies(const FeatureMap& a, const FeatureMap& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("combine_frequencies: shapes must match");
  FeatureMap out = a;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
  return out;
}

namespace {

void pooled_moments(std::span<const GateWeights> all_scales, bool beta_side, double& mean,
                    double& var, std::size_t& count) {
  double sum = 0.0;
  count = 0;
  for (const GateWeights& w : all_scales) {
    const auto& v = beta_side ? w.beta : w.alpha;
    for (double a : v) sum += a;
    count += v.size();
  }
  if (count == 0) throw std::invalid_argument("fusion_regularizer: empty weight pool");
  mean = sum / static_cast<double>(count);
  double sq = 0.0;
  for (const GateWeights& w : all_scales) {
    const auto& v = beta_side ? w.beta : w.alpha;
    for (double a : v) sq += (a - mean) * (a - mean);
  }
  var = sq / static_cast<double>(count);
}

}  // namespace

double fusion_regularizer(std::span<const GateWeights> all_scales, double lambda) {
  double total = 0.0;
  for (int side = 0; side < 2; ++side) {
    double mean = 0.0, var = 0.0;
    std::size_t count = 0;
    pooled_moments(all_scales, side == 1, mean, var, count);
    if (mean == 0.0) throw std::invalid_argument("fusion_regularizer: zero-mean pool");
    total += var / (mean * mean);
  }
  return lambda * total;
}

void fusion_regularizer_backward(std::span<const GateWeights> all_scales, double lambda,
                                 std::span<std::vector<double>> d_alpha,
                                 std::span<std::vector<double>> d_beta) {
  if (d_alpha.size() != all_scales.size() || d_beta.size() != all_scales.size())
    throw std::invalid_argument("fusion_regularizer_backward: buffer count mismatch");
  for (int side = 0; side < 2; ++side) {
    double mean = 0.0, var = 0.0;
    std::size_t count = 0;
    pooled_moments(all_scales, side == 1, mean, var, count);
    if (mean == 0.0) throw std::invalid_argument("fusion_regularizer: zero-mean pool");
    // d/da_i [ var/mean^2 ] with population stats over the pooled values:
    //   dvar/da_i = 2 (a_i - mean) / N, dmean/da_i = 1 / N.
    const double n = static_cast<double>(count);
    const double inv_m2 = 1.0 / (mean * mean);
    const double mean_term = 2.0 * var / (mean * mean * mean) / n;
    for (std::size_t s = 0; s < all_scales.size(); ++s) {
      const auto& v = side == 1 ? all_scales[s].beta : all_scales[s].alpha;
      auto& g = side == 1 ? d_beta[s] : d_alpha[s];
      if (g.size() != v.size())
        throw std::invalid_argument("fusion_regularizer_backward: buffer shape mismatch");
      for (std::size_t i = 0; i < v.size(); ++i)
        g[i] += lambda * (2.0 * (v[i] - mean) / n * inv_m2 - mean_term);
    }
  }
}

GateGrads gate_gradients(const GateCache& cache, const GateParams& params,
                         std::span<const double> d_alpha, std::span<const double> d_beta) {
  if (cache.weights.alpha.empty())
    throw std::logic_error("gate_gradients: no cached forward state");
  const FeatureMap& h = cache.h_shared;
  if (params.in_channels != h.channels)
    throw std::invalid_argument("gate_gradients: params do not match cached input");
  const int H = h.height;
  const int W = h.width;
  const int C = h.channels;
  const std::size_t n = static_cast<std::size_t>(H) * W;
  if (d_alpha.size() != n || d_beta.size() != n)
    throw std::invalid_argument("gate_gradients: upstream gradient size mismatch");

  GateGrads grads;
  grads.d_w.assign(params.w.size(), 0.0);
  grads.d_h_shared = FeatureMap::zeros(C, H, W, h.scale_index);

  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const std::size_t loc = static_cast<std::size_t>(y) * W + x;
      const double a = cache.weights.alpha[loc];
      const double b = cache.weights.beta[loc];
      // Softmax jacobian: dl_j = s_j * (g_j - sum_k g_k s_k).
      const double dot = d_alpha[loc] * a + d_beta[loc] * b;
      const double dl0 = a * (d_alpha[loc] - dot);
      const double dl1 = b * (d_beta[loc] - dot);
      for (int c = 0; c < C; ++c) {
        const double v = h.at(c, y, x);
        grads.d_w[static_cast<std::size_t>(c) * 2] += v * dl0;
        grads.d_w[static_cast<std::size_t>(c) * 2 + 1] += v * dl1;
        grads.d_h_shared.at(c, y, x) += dl0 * params.w[static_cast<std::size_t>(c) * 2] +
                                        dl1 * params.w[static_cast<std::size_t>(c) * 2 + 1];
      }
      if (cache.training) {
        const std::size_t base = cache.noise_per_map ? 0 : 2 * loc;
        grads.d_sigma += dl0 * cache.eps[base] + dl1 * cache.eps[base + 1];
      }
    }
  }
  return grads;
}

void fuse_backward(const FeatureMap& h_e, const FeatureMap& h_f, const GateWeights& weights,
                   const FeatureMap& d_out, FeatureMap& d_h_e, FeatureMap& d_h_f,
                   std::vector<double>& d_alpha, std::vector<double>& d_beta) {
  const std::size_t plane = static_cast<std::size_t>(h_e.height) * h_e.width;
  if (d_alpha.size() != plane || d_beta.size() != plane)
    throw std::invalid_argument("fuse_backward: gradient buffer size mismatch");
  for (int c = 0; c < h_e.channels; ++c) {
    const std::size_t off = static_cast<std::size_t>(c) * plane;
    for (std::size_t loc = 0; loc < plane; ++loc) {
      const double g = d_out.data[off + loc];
      d_alpha[loc] += g * h_e.data[off + loc];
      d_beta[loc] += g * h_f.data[off + loc];
      d_h_e.data[off + loc] += g * weights.alpha[loc];
      d_h_f.data[off + loc] += g * weights.beta[loc];
    }
  }
}

FeatureMap project_channels(const FeatureMap& input, std::span<const double> weight,
                            int out_channels) {
  if (weight.size() != static_cast<std::size_t>(out_channels) * input.channels)
    throw std::invalid_argument("project_channels: weight shape mismatch");
  FeatureMap out = FeatureMap::zeros(out_channels, input.height, input.width, input.scale_index);
  const std::size_t plane = static_cast<std::size_t>(input.height) * input.width;
  for (int o = 0; o < out_channels; ++o) {
    for (int c = 0; c < input.channels; ++c) {
      const double w = weight[static_cast<std::size_t>(o) * input.channels + c];
      if (w == 0.0) continue;
      const double* src = input.data.data() + static_cast<std::size_t>(c) * plane;
      double* dst = out.data.data() + static_cast<std::size_t>(o) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] += w * src[i];
    }
  }
  return out;
}

void project_channels_backward(const FeatureMap& input, std::span<const double> weight,
                               int out_channels, const FeatureMap& d_out, FeatureMap& d_input,
                               std::span<double> d_weight) {
  const std::size_t plane = static_cast<std::size_t>(input.height) * input.width;
  for (int o = 0; o < out_channels; ++o) {
    const double* g = d_out.data.data() + static_cast<std::size_t>(o) * plane;
    for (int c = 0; c < input.channels; ++c) {
      const double w = weight[static_cast<std::size_t>(o) * input.channels + c];
      const double* src = input.data.data() + static_cast<std::size_t>(c) * plane;
      double* di = d_input.data.data() + static_cast<std::size_t>(c) * plane;
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        acc += g[i] * src[i];
        di[i] += g[i] * w;
      }
      d_weight[static_cast<std::size_t>(o) * input.channels + c] += acc;
    }
  }
}

}  // namespace evdet
