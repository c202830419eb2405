#pragma once

#include <span>
#include <vector>

#include "evdet/rng.hpp"

namespace evdet {

// Dense feature tensor, shape (channels, height, width), row-major per
// channel. Double precision throughout so analytic gradients can be checked
// against finite differences without a second storage path.
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  int scale_index = 0;
  std::vector<double> data;

  static FeatureMap zeros(int c, int h, int w, int scale = 0) {
    FeatureMap m;
    m.channels = c;
    m.height = h;
    m.width = w;
    m.scale_index = scale;
    m.data.assign(static_cast<std::size_t>(c) * h * w, 0.0);
    return m;
  }
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * height + y) * width + x;
  }
  double at(int c, int y, int x) const { return data[index(c, y, x)]; }
  double& at(int c, int y, int x) { return data[index(c, y, x)]; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const FeatureMap& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

bool is_finite(const FeatureMap& m);

// Per-scale gating parameters: a linear map from the concatenated channels to
// two logits, plus the learned noise scale. lambda_reg weights the balance
// regularizer and is configuration, not a trained parameter.
struct GateParams {
  int in_channels = 0;
  std::vector<double> w;  // (in_channels, 2), row-major
  double sigma = 0.0;     // >= 0
  double lambda_reg = 0.0;

  static GateParams zeros(int in_channels, double sigma = 0.0, double lambda_reg = 0.0) {
    GateParams p;
    p.in_channels = in_channels;
    p.w.assign(static_cast<std::size_t>(in_channels) * 2, 0.0);
    p.sigma = sigma;
    p.lambda_reg = lambda_reg;
    return p;
  }
};

// Softmax outputs per spatial location; alpha + beta == 1 everywhere.
struct GateWeights {
  int height = 0;
  int width = 0;
  std::vector<double> alpha;
  std::vector<double> beta;
};

// Forward record needed by gate_gradients. Empty (default) means no forward
// pass has been run, which gate_gradients treats as a state error.
struct GateCache {
  FeatureMap h_shared;
  std::vector<double> eps;  // noise draws; empty in eval mode
  GateWeights weights;
  bool training = false;
  bool noise_per_map = false;
};

struct GateGrads {
  std::vector<double> d_w;
  double d_sigma = 0.0;
  FeatureMap d_h_shared;
};

// Channel concatenation of two maps with matching spatial dims.
FeatureMap concat_features(const FeatureMap& h_e, const FeatureMap& h_f);

// Per-location softmax over two logits computed from the shared features,
// with additive noise sigma * eps in training mode. eps is standard normal,
// drawn per location per logit, or once per logit for the whole map when
// noise_per_map is set. Pass a cache to enable a later backward pass.
GateWeights gate_weights(const FeatureMap& h_shared, const GateParams& params, bool training,
                         Rng& rng, GateCache* cache = nullptr, bool noise_per_map = false);

// Same forward with caller-supplied noise draws (size 2 per location, or 2
// total when noise_per_map). An empty span runs the noiseless eval path.
GateWeights gate_weights_with_noise(const FeatureMap& h_shared, const GateParams& params,
                                    std::span<const double> eps, GateCache* cache = nullptr,
                                    bool noise_per_map = false);

// Location-wise weighted sum alpha * h_e + beta * h_f. Channel counts must
// match; project_channels aligns them first when they do not.
FeatureMap fuse(const FeatureMap& h_e, const FeatureMap& h_f, const GateWeights& weights);

// Elementwise sum of the two frequency paths.
FeatureMap combine_frequencies(const FeatureMap& a, const FeatureMap& b);

// lambda * (Var(alpha) / E[alpha]^2 + Var(beta) / E[beta]^2), with the
// moments pooled over every location of every provided scale (population
// variance). Degenerate zero-mean pools are an argument error.
double fusion_regularizer(std::span<const GateWeights> all_scales, double lambda);

// Gradients of the regularizer with respect to each alpha/beta value,
// accumulated into per-scale buffers shaped like the inputs.
void fusion_regularizer_backward(std::span<const GateWeights> all_scales, double lambda,
                                 std::span<std::vector<double>> d_alpha,
                                 std::span<std::vector<double>> d_beta);

// Backward through gate_weights: upstream d_alpha/d_beta to parameter and
// input gradients via the softmax jacobian. Requires a cache from a forward
// call; gradients flow to sigma through the cached noise draws.
GateGrads gate_gradients(const GateCache& cache, const GateParams& params,
                         std::span<const double> d_alpha, std::span<const double> d_beta);

// Backward through fuse; accumulates into the provided buffers.
void fuse_backward(const FeatureMap& h_e, const FeatureMap& h_f, const GateWeights& weights,
                   const FeatureMap& d_out, FeatureMap& d_h_e, FeatureMap& d_h_f,
                   std::vector<double>& d_alpha, std::vector<double>& d_beta);

// Learned 1x1 projection used to align channel counts before fuse.
// weight is (out_channels, in_channels) row-major.
FeatureMap project_channels(const FeatureMap& input, std::span<const double> weight,
                            int out_channels);
void project_channels_backward(const FeatureMap& input, std::span<const double> weight,
                               int out_channels, const FeatureMap& d_out, FeatureMap& d_input,
                               std::span<double> d_weight);

}  // namespace evdet
