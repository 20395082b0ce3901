#pragma once

#include <cstdint>

#include "lcm/gaussian.hpp"

namespace lcm {

// Procedural splat clouds with the correlation structure real captures
// have: clustered positions, and attributes driven by a shared smooth
// latent field so nearby points and related channels co-vary.
struct SynthOptions {
  int64_t n = 4096;
  uint64_t seed = 1;
  int clusters = 6;
  int latent_dims = 8;
  int fourier_features = 16;
  float noise = 0.02f;  // per-channel observation noise scale
};

GaussianCloud synth_cloud(const SynthOptions& opt);

}  // namespace lcm
