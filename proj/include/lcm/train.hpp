#pragma once

#include <map>
#include <string>
#include <vector>

#include "lcm/arch.hpp"
#include "lcm/context.hpp"
#include "lcm/gaussian.hpp"

namespace lcm {

// One serialized window prepared for loss graphs.
struct TrainWindow {
  int n = 0;
  Tensor pos_norm;    // n x 3
  Tensor colors;      // n x 48 raw values
  Tensor geom_values;  // n x 8 dequantized symbols
  std::vector<int32_t> geom_syms;  // n x 8 row-major
};

// Serializes a cloud the same way the encoder does (quantize, sort, window).
std::vector<TrainWindow> training_windows(const GaussianCloud& cloud, const ArchConfig& cfg,
                                          const std::vector<float>& geom_steps, int window_len);

// Differentiable one-window losses in bits/token (plus weighted distortion
// for the color paths). Rate terms use additive-noise relaxation, value
// paths use straight-through rounding, and auto-regressive conditioning
// uses the same masked ground-truth state the decoder would hold. Exposed
// so gradient tests probe the exact graphs the trainer optimizes.
Graph<float>::Id build_geom_loss(Graph<float>& g, WeightMap<float>& wm, const ArchConfig& cfg, const TrainWindow& w,
                                 uint64_t noise_seed);
// Lossy and lossless color paths on the full window, each token's terms
// weighted by the division network's soft assignment.
Graph<float>::Id build_color_dual_loss(Graph<float>& g, WeightMap<float>& wm, const ArchConfig& cfg,
                                       const TrainWindow& w, uint64_t noise_seed, float lambda_dist,
                                       bool trainable_steps);
// Lossless color pass with an explicit coded/conditioning row split
// (`mixed`), training the reconstruction-embedding path used by windows
// that hold both lossy and lossless tokens.
Graph<float>::Id build_mixed_lossless_loss(Graph<float>& g, WeightMap<float>& wm, const ArchConfig& cfg,
                                           const TrainWindow& w, uint64_t noise_seed, bool mixed);

struct AdamOptimizer {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float clip = 5.0f;  // global-norm gradient clip, <= 0 disables
  int64_t t = 0;
  std::map<std::string, std::vector<float>> m, v;

  // One update of the named tensors from wm.grads; returns the pre-clip
  // global gradient norm.
  double step(WeightMap<float>& wm, const std::vector<std::string>& names);
};

// Stage-dependent trainable tensor names. Geometry steps and the
// architecture tag never train; color steps only in the joint stage.
std::vector<std::string> trainable_params(const WeightMap<float>& wm, const std::string& stage);

struct TrainOptions {
  std::string stage = "joint";  // lossy_init | lossless_init | joint
  int steps = 40;
  int64_t points = 768;
  uint64_t seed = 7;
  float lr = 1e-3f;
  float clip = 5.0f;
  float lambda_dist = 50.0f;
  int window_len = 0;      // 0 = architecture default
  int mixed_period = 4;    // every k-th lossless step uses the mixed-window
                           // objective; 0 disables it (lossless_init only)
};

struct TrainReport {
  std::vector<double> losses;  // one entry per step
  double first = 0;
  double last = 0;
  double grad_norm_last = 0;
};

TrainReport train_stage(WeightMap<float>& wm, const TrainOptions& opt);

// Forced-lossless attribute bits per token on the given cloud.
double eval_bits_per_token(WeightMap<float>& wm, const GaussianCloud& cloud, int window_len, int threads);

// Matched-budget comparisons: each variant trains from scratch on the same
// data with the same step budget, then measures forced-lossless attribute
// bits per token on a held-out cloud. The window-length entries reuse the
// baseline weights (window length is a coding parameter, not a weight).
struct AblationResult {
  std::string name;
  uint32_t arch_id = 0;
  int window_len = 0;  // 0 = architecture default
  double bits_per_token = 0;
};
// `only` filters the produced entries; empty = all. The baseline is always
// trained and reported (the window entries and ratios depend on it).
std::vector<AblationResult> run_ablations(int steps, int64_t points, uint64_t seed, int threads,
                                          const std::vector<std::string>& only = {});

}  // namespace lcm
