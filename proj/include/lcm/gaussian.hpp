#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lcm/common.hpp"

namespace lcm {

// One splat scene in struct-of-arrays layout.
//   positions: N x 3
//   rotations: N x 4 quaternions (w, x, y, z) as stored in the file
//   scales:    N x 3 log-domain scales, raw file values
//   opacities: N x 1 logits, raw file values
//   colors:    N x 48 spherical-harmonics coefficients, DC first
// Normals are carried only so file round-trips are byte-exact; the codec
// neither compresses nor reconstructs them.
struct GaussianCloud {
  int64_t n = 0;
  std::vector<float> positions;
  std::vector<float> normals;
  std::vector<float> rotations;
  std::vector<float> scales;
  std::vector<float> opacities;
  std::vector<float> colors;

  static constexpr int kColorDims = 48;

  void resize(int64_t count) {
    n = count;
    positions.assign(size_t(n) * 3, 0.f);
    normals.assign(size_t(n) * 3, 0.f);
    rotations.assign(size_t(n) * 4, 0.f);
    scales.assign(size_t(n) * 3, 0.f);
    opacities.assign(size_t(n), 0.f);
    colors.assign(size_t(n) * kColorDims, 0.f);
  }
};

// Uniform scalar quantization domain for positions.
struct PositionQuant {
  std::array<double, 3> bbox_min{0, 0, 0};
  std::array<double, 3> bbox_max{1, 1, 1};
  int bits = 16;  // per axis, <= 21 so three axes interleave into 63 bits
};

// Per-channel uniform steps for the 8 geometry channels (scale x3, rotation
// x4, opacity x1) and the 48 color channels.
struct AttributeQuant {
  std::array<float, 8> geometry_steps;
  std::array<float, 48> color_steps;
};

// Geometry attribute channel layout used throughout the codec: the per-token
// geometry vector is [scale0..2, rot0..3, opacity].
constexpr int kGeomChannels = 8;
inline void gather_geometry_row(const GaussianCloud& c, int64_t i, float out[kGeomChannels]) {
  out[0] = c.scales[size_t(i) * 3 + 0];
  out[1] = c.scales[size_t(i) * 3 + 1];
  out[2] = c.scales[size_t(i) * 3 + 2];
  out[3] = c.rotations[size_t(i) * 4 + 0];
  out[4] = c.rotations[size_t(i) * 4 + 1];
  out[5] = c.rotations[size_t(i) * 4 + 2];
  out[6] = c.rotations[size_t(i) * 4 + 3];
  out[7] = c.opacities[size_t(i)];
}
inline void scatter_geometry_row(GaussianCloud& c, int64_t i, const float in[kGeomChannels]) {
  c.scales[size_t(i) * 3 + 0] = in[0];
  c.scales[size_t(i) * 3 + 1] = in[1];
  c.scales[size_t(i) * 3 + 2] = in[2];
  c.rotations[size_t(i) * 4 + 0] = in[3];
  c.rotations[size_t(i) * 4 + 1] = in[4];
  c.rotations[size_t(i) * 4 + 2] = in[5];
  c.rotations[size_t(i) * 4 + 3] = in[6];
  c.opacities[size_t(i)] = in[7];
}

// Binary little-endian PLY with the standard splat export layout. Throws
// InputError with the offending property/offset on malformed input.
GaussianCloud parse_ply(const std::vector<uint8_t>& bytes);
std::vector<uint8_t> write_ply(const GaussianCloud& cloud);
GaussianCloud load_ply_file(const std::string& path);
void save_ply_file(const std::string& path, const GaussianCloud& cloud);

// Positions -> integer grid coordinates in [0, 2^bits). Rounds half to even.
// Out-of-box inputs clamp; `clamped` (optional) counts them. Throws on a
// degenerate bbox axis or bits outside [1, 21].
std::vector<uint32_t> quantize_positions(const float* positions, int64_t n, const PositionQuant& q,
                                         int64_t* clamped = nullptr);
// Grid coordinates -> cell-centre float positions.
std::vector<float> dequantize_positions(const uint32_t* grid, int64_t n, const PositionQuant& q);

// value -> round_even(value / step); step must be positive and finite.
int32_t quantize_value(float value, float step);
inline float dequantize_value(int32_t symbol, float step) { return float(double(symbol) * double(step)); }

// 3x3 covariance from a (not necessarily unit) quaternion and linear scales:
// normalize q, build R, return R * diag(s)^2 * R^T, row-major. Throws on a
// zero-norm quaternion.
std::array<float, 9> covariance_from(const std::array<float, 4>& q, const std::array<float, 3>& s);

// Encoder-side bbox: exact min/max per axis, degenerate axes padded to unit
// width so the quantizer always has a valid domain.
PositionQuant make_position_quant(const GaussianCloud& c, int bits);

}  // namespace lcm
