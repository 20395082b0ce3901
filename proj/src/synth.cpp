#include "lcm/synth.hpp"

#include <cmath>
#include <vector>

#include "lcm/common.hpp"

namespace lcm {

GaussianCloud synth_cloud(const SynthOptions& opt) {
  if (opt.n < 1) throw InputError("synthetic cloud needs at least one point");
  const int Dz = opt.latent_dims;
  const int F = opt.fourier_features;
  // Latent layout: the first half of the dims is a smooth spatial field
  // (neighbours share it, distant points do not), the second half is drawn
  // fresh per point (only other channels of the same point reveal it). Real
  // captures have both kinds of structure: surfaces vary smoothly while each
  // splat keeps its own appearance tied across its channels.
  const int Ds = Dz / 2;
  Rng root(opt.seed ^ 0xA5A5F00DBEEF1234ull);
  Rng rng_pos = root.fork(1);
  Rng rng_field = root.fork(2);
  Rng rng_mix = root.fork(3);
  Rng rng_noise = root.fork(4);
  Rng rng_local = root.fork(5);

  GaussianCloud c;
  c.resize(opt.n);

  // clustered positions in [-1, 1]^3
  std::vector<float> centers(size_t(opt.clusters) * 3), widths(static_cast<size_t>(opt.clusters));
  for (int k = 0; k < opt.clusters; ++k) {
    for (int a = 0; a < 3; ++a) centers[size_t(k) * 3 + size_t(a)] = float(rng_pos.uniform(-0.8, 0.8));
    widths[size_t(k)] = float(rng_pos.uniform(0.05, 0.25));
  }
  for (int64_t i = 0; i < opt.n; ++i) {
    const int k = int(rng_pos.below(uint64_t(opt.clusters)));
    for (int a = 0; a < 3; ++a) {
      double x = centers[size_t(k) * 3 + size_t(a)] + widths[size_t(k)] * rng_pos.normal();
      c.positions[size_t(i) * 3 + size_t(a)] = float(std::max(-1.5, std::min(1.5, x)));
    }
  }

  // Spatial dims: z_d(x) = sum_f a_df cos(w_f . x + b_f). Gaussian random
  // frequencies give a squared-exponential kernel; the wavelength is around
  // half a cluster span, so in-order neighbours correlate strongly while
  // points from different regions are nearly independent.
  std::vector<float> w(size_t(F) * 3), b(static_cast<size_t>(F)), amp(size_t(Ds) * size_t(F));
  for (int f = 0; f < F; ++f) {
    for (int a = 0; a < 3; ++a) w[size_t(f) * 3 + size_t(a)] = float(rng_field.normal() * (2.0 * 3.14159265 / 0.55));
    b[size_t(f)] = float(rng_field.uniform(0.0, 6.28318530718));
  }
  for (size_t i = 0; i < amp.size(); ++i) amp[i] = float(rng_field.normal() / std::sqrt(double(F)));

  std::vector<float> z(size_t(opt.n) * size_t(Dz));
  for (int64_t i = 0; i < opt.n; ++i) {
    const float* p = &c.positions[size_t(i) * 3];
    for (int f = 0; f < F; ++f) {
      const float phase = w[size_t(f) * 3] * p[0] + w[size_t(f) * 3 + 1] * p[1] + w[size_t(f) * 3 + 2] * p[2] +
                          b[size_t(f)];
      const float cf = std::cos(phase);
      for (int d = 0; d < Ds; ++d) z[size_t(i) * size_t(Dz) + size_t(d)] += amp[size_t(d) * size_t(F) + size_t(f)] * cf;
    }
    // Per-point dims, scaled to the field's standard deviation.
    for (int d = Ds; d < Dz; ++d) z[size_t(i) * size_t(Dz) + size_t(d)] = float(0.7071 * rng_local.normal());
  }

  // Channel mixing matrices. Mixing blends a fixed base (identical across
  // scenes, like the stable cross-channel structure of real captures) with a
  // per-scene component, so within-token correlations are partly learnable
  // across scenes. Geometry and colors read disjoint latent blocks: geometry
  // never leaks the color field, so the color phases must get it from decoded
  // neighbours. Spatial energy dominates the per-point half, matching how
  // surface continuity dominates splat-local variation in real scenes.
  const int C = GaussianCloud::kColorDims;
  Rng rng_base(0xBA5EC0FFEE5EEDull);
  const double kBase = 0.75, kScene = std::sqrt(1.0 - kBase * kBase);
  // geometry reads spatial [0, Ds/2) and local [Ds, Ds + (Dz - Ds) / 2);
  // colors read the complementary halves of each block
  auto geom_reads = [&](int d) { return (d < Ds / 2) || (d >= Ds && d < Ds + (Dz - Ds) / 2); };
  auto is_spatial = [&](int d) { return d < Ds; };
  // Per-channel target standard deviations for the spatial and per-point
  // parts (latent dims have variance 1/2, two dims per part, so a mixing
  // entry of std s yields channel std s).
  const double kGeomSp = 0.43, kGeomLoc = 0.215;
  const double kColorSp[4] = {2.2, 0.72, 0.18, 0.045};   // per SH band
  const double kColorLoc[4] = {1.1, 0.36, 0.09, 0.0225};
  std::vector<float> mix_color(size_t(C) * size_t(Dz)), mix_geom(size_t(kGeomChannels) * size_t(Dz));
  for (int ch = 0; ch < C; ++ch) {
    const int band = ch < 3 ? 0 : (ch < 15 ? 1 : (ch < 27 ? 2 : 3));
    for (int d = 0; d < Dz; ++d) {
      const double g = kBase * rng_base.normal() + kScene * rng_mix.normal();
      const double s = is_spatial(d) ? kColorSp[band] : kColorLoc[band];
      mix_color[size_t(ch) * size_t(Dz) + size_t(d)] = geom_reads(d) ? 0.f : float(g * s);
    }
  }
  for (int ch = 0; ch < kGeomChannels; ++ch)
    for (int d = 0; d < Dz; ++d) {
      const double g = kBase * rng_base.normal() + kScene * rng_mix.normal();
      const double s = is_spatial(d) ? kGeomSp : kGeomLoc;
      mix_geom[size_t(ch) * size_t(Dz) + size_t(d)] = geom_reads(d) ? float(g * s) : 0.f;
    }

  for (int64_t i = 0; i < opt.n; ++i) {
    const float* zi = &z[size_t(i) * size_t(Dz)];
    for (int ch = 0; ch < C; ++ch) {
      double v = ch < 3 ? 0.5 : 0.0;
      for (int d = 0; d < Dz; ++d) v += double(mix_color[size_t(ch) * size_t(Dz) + size_t(d)]) * double(zi[d]);
      v += opt.noise * rng_noise.normal() * (ch < 3 ? 1.0 : 0.25);
      c.colors[size_t(i) * size_t(C) + size_t(ch)] = float(v);
    }
    float geom[kGeomChannels];
    for (int ch = 0; ch < kGeomChannels; ++ch) {
      double v = 0;
      for (int d = 0; d < Dz; ++d) v += double(mix_geom[size_t(ch) * size_t(Dz) + size_t(d)]) * double(zi[d]);
      geom[ch] = float(v + opt.noise * rng_noise.normal());
    }
    // log scales around small splats
    for (int a = 0; a < 3; ++a) c.scales[size_t(i) * 3 + size_t(a)] = -4.0f + geom[a];
    // normalized quaternion near identity
    double q[4] = {1.0 + 0.3 * geom[3], 0.3 * geom[4], 0.3 * geom[5], 0.3 * geom[6]};
    double qn = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    if (qn < 1e-9) {
      q[0] = 1;
      q[1] = q[2] = q[3] = 0;
      qn = 1;
    }
    for (int a = 0; a < 4; ++a) c.rotations[size_t(i) * 4 + size_t(a)] = float(q[a] / qn);
    c.opacities[size_t(i)] = 2.0f * geom[7];
  }
  return c;
}

}  // namespace lcm
