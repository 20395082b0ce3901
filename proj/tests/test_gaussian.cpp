#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "doctest.h"
#include "lcm/common.hpp"
#include "lcm/gaussian.hpp"

using namespace lcm;

namespace {

struct XRng {
  uint64_t s;
  explicit XRng(uint64_t seed) : s(seed ? seed : 0x9E3779B97F4A7C15ull) {}
  uint64_t next() {
    s ^= s << 13;
    s ^= s >> 7;
    s ^= s << 17;
    return s;
  }
  double uniform() { return double(next() >> 11) * 0x1.0p-53; }
  float range(float lo, float hi) { return lo + float(uniform()) * (hi - lo); }
};

GaussianCloud fuzz_cloud(XRng& rng, int64_t n) {
  GaussianCloud c;
  c.resize(n);
  for (int64_t i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) c.positions[size_t(i) * 3 + a] = rng.range(-50.f, 50.f);
    for (int a = 0; a < 3; ++a) c.normals[size_t(i) * 3 + a] = rng.range(-1.f, 1.f);
    for (int a = 0; a < 48; ++a) c.colors[size_t(i) * 48 + a] = rng.range(-4.f, 4.f);
    c.opacities[size_t(i)] = rng.range(-9.f, 9.f);
    for (int a = 0; a < 3; ++a) c.scales[size_t(i) * 3 + a] = rng.range(-12.f, 2.f);
    float qn = 0;
    for (int a = 0; a < 4; ++a) {
      c.rotations[size_t(i) * 4 + a] = rng.range(-1.f, 1.f);
      qn += c.rotations[size_t(i) * 4 + a] * c.rotations[size_t(i) * 4 + a];
    }
    if (qn == 0.f) c.rotations[size_t(i) * 4] = 1.f;
  }
  return c;
}

bool clouds_bit_equal(const GaussianCloud& a, const GaussianCloud& b) {
  return a.n == b.n && a.positions == b.positions && a.normals == b.normals && a.rotations == b.rotations &&
         a.scales == b.scales && a.opacities == b.opacities && a.colors == b.colors;
}

// Replace the first occurrence of `from` within the header region. The body
// is untouched; the parser re-locates end_header so length changes are fine.
std::vector<uint8_t> patch_header(const std::vector<uint8_t>& bytes, const std::string& from,
                                  const std::string& to) {
  std::string all(bytes.begin(), bytes.end());
  const size_t at = all.find(from);
  REQUIRE(at != std::string::npos);
  all.replace(at, from.size(), to);
  return std::vector<uint8_t>(all.begin(), all.end());
}

std::string error_text(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("ply write then parse reproduces every array bit-exactly") {
  XRng rng(21);
  for (int64_t n : {int64_t(1), int64_t(2), int64_t(57)}) {
    const GaussianCloud c = fuzz_cloud(rng, n);
    const GaussianCloud back = parse_ply(write_ply(c));
    CHECK(clouds_bit_equal(c, back));
  }
}

TEST_CASE("ply parser resolves properties by name not position") {
  XRng rng(22);
  GaussianCloud c = fuzz_cloud(rng, 1);
  c.positions = {1.f, 2.f, 3.f};
  std::vector<uint8_t> bytes = write_ply(c);

  // Swapping the x and y property declarations swaps which field each byte
  // offset feeds, so the parsed coordinates swap too.
  bytes = patch_header(bytes, "property float x\nproperty float y\n", "property float y\nproperty float x\n");
  const GaussianCloud back = parse_ply(bytes);
  CHECK(back.positions[0] == 2.f);
  CHECK(back.positions[1] == 1.f);
  CHECK(back.positions[2] == 3.f);
}

TEST_CASE("ply parser tolerates extra trailing properties") {
  XRng rng(23);
  const GaussianCloud c = fuzz_cloud(rng, 1);
  std::vector<uint8_t> bytes = write_ply(c);
  bytes = patch_header(bytes, "end_header\n", "property float extra\nend_header\n");
  // One vertex: the record grows by one float at its end.
  bytes.insert(bytes.end(), {0xCD, 0xCC, 0x4C, 0x3E});
  const GaussianCloud back = parse_ply(bytes);
  CHECK(clouds_bit_equal(c, back));
}

TEST_CASE("ply parser names the defect in malformed files") {
  XRng rng(24);
  const GaussianCloud c = fuzz_cloud(rng, 2);
  const std::vector<uint8_t> good = write_ply(c);

  CHECK(error_text([&] { parse_ply(patch_header(good, "ply\n", "plx\n")); }).find("magic") !=
        std::string::npos);
  CHECK(error_text([&] {
          parse_ply(patch_header(good, "binary_little_endian", "ascii"));
        }).find("unsupported format") != std::string::npos);
  CHECK(error_text([&] { parse_ply(patch_header(good, "property float rot_3\n", "")); })
            .find("missing property rot_3") != std::string::npos);
  CHECK(error_text([&] {
          parse_ply(patch_header(good, "property float opacity", "property int opacity"));
        }).find("non-float") != std::string::npos);
  CHECK(error_text([&] {
          parse_ply(patch_header(good, "format binary_little_endian 1.0\n", ""));
        }).find("format") != std::string::npos);
  CHECK(error_text([&] {
          parse_ply(patch_header(good, "end_header\n", "element face 3\nend_header\n"));
        }).find("trailing element") != std::string::npos);

  std::vector<uint8_t> cut(good.begin(), good.end() - 4);
  CHECK(error_text([&] { parse_ply(cut); }).find("truncated") != std::string::npos);

  std::vector<uint8_t> nohdr(good.begin(), good.begin() + 40);
  CHECK(error_text([&] { parse_ply(nohdr); }).find("end_header") != std::string::npos);

  // Zero both quaternion norms of vertex 0 in the body.
  std::vector<uint8_t> zq = good;
  const std::string marker = "end_header\n";
  std::string all(zq.begin(), zq.end());
  const size_t body = all.find(marker) + marker.size();
  std::memset(zq.data() + body + 58 * 4, 0, 16);
  CHECK(error_text([&] { parse_ply(zq); }).find("quaternion") != std::string::npos);

  CHECK_THROWS_AS(parse_ply(patch_header(good, "element vertex 2", "element vertex -1")), InputError);
}

TEST_CASE("ply writer rejects empty and non-finite input") {
  GaussianCloud empty;
  CHECK_THROWS_AS(write_ply(empty), InputError);

  XRng rng(25);
  GaussianCloud c = fuzz_cloud(rng, 3);
  c.scales[4] = std::numeric_limits<float>::quiet_NaN();
  const std::string msg = error_text([&] { write_ply(c); });
  CHECK(msg.find("scale") != std::string::npos);
  CHECK(msg.find("1") != std::string::npos);  // offending vertex index
}

TEST_CASE("position quantizer rounds half to even and clamps outliers") {
  // Unit box so t * grid_max == x * 3 is exact in double for dyadic inputs.
  PositionQuant q;
  q.bbox_min = {0, 0, 0};
  q.bbox_max = {1, 1, 1};
  q.bits = 2;  // grid {0,1,2,3}

  const float pts[] = {0.5f, 0.25f, 0.75f, -0.5f, 2.f, 1.f};
  int64_t clamped = -1;
  const std::vector<uint32_t> g = quantize_positions(pts, 2, q, &clamped);
  // 0.5 * 3 = 1.5 ties to even 2; 0.75 * 3 = 2.25 rounds down.
  CHECK(g == std::vector<uint32_t>{2, 1, 2, 0, 3, 3});
  CHECK(clamped == 2);

  // Grid nodes dequantize to the exact lattice values.
  PositionQuant q3;
  q3.bbox_min = {0, 0, 0};
  q3.bbox_max = {3, 3, 3};
  q3.bits = 2;
  const std::vector<uint32_t> nodes = {0, 1, 2, 3, 3, 0};
  const std::vector<float> back = dequantize_positions(nodes.data(), 2, q3);
  CHECK(back == std::vector<float>{0.f, 1.f, 2.f, 3.f, 3.f, 0.f});
}

TEST_CASE("position quantizer rejects bad domains") {
  PositionQuant q;
  q.bbox_min = {0, 0, 0};
  q.bbox_max = {1, 0, 1};  // degenerate y
  const float p[3] = {0, 0, 0};
  CHECK_THROWS_AS(quantize_positions(p, 1, q), InputError);
  q.bbox_max = {1, 1, 1};
  q.bits = 0;
  CHECK_THROWS_AS(quantize_positions(p, 1, q), InputError);
  q.bits = 22;
  CHECK_THROWS_AS(quantize_positions(p, 1, q), InputError);
}

TEST_CASE("position roundtrip error stays within half a lattice cell") {
  XRng rng(26);
  for (int rep = 0; rep < 20; ++rep) {
    PositionQuant q;
    q.bits = 1 + int(rng.next() % 21);
    for (int a = 0; a < 3; ++a) {
      const double lo = rng.range(-100.f, 100.f);
      q.bbox_min[a] = lo;
      q.bbox_max[a] = lo + 0.001 + 200.0 * rng.uniform();
    }
    const int64_t n = 64;
    std::vector<float> pts(size_t(n) * 3);
    for (int64_t i = 0; i < n; ++i)
      for (int a = 0; a < 3; ++a)
        pts[size_t(i) * 3 + a] =
            float(q.bbox_min[a] + rng.uniform() * (q.bbox_max[a] - q.bbox_min[a]));

    int64_t clamped = 0;
    const std::vector<uint32_t> g = quantize_positions(pts.data(), n, q, &clamped);
    const std::vector<float> back = dequantize_positions(g.data(), n, q);
    const uint32_t grid_max = (uint32_t(1) << q.bits) - 1;
    for (int64_t i = 0; i < n; ++i)
      for (int a = 0; a < 3; ++a) {
        const double w = q.bbox_max[a] - q.bbox_min[a];
        const double cell = w / double(grid_max);
        // Two float ulps at the coordinate magnitude for the final cast.
        const double slop = 1.2e-7 * (std::abs(q.bbox_min[a]) + w) + 1e-12;
        CHECK(std::abs(double(back[size_t(i) * 3 + a]) - double(pts[size_t(i) * 3 + a])) <=
              0.5 * cell + slop);
        CHECK(g[size_t(i) * 3 + a] <= grid_max);
      }
  }
}

TEST_CASE("value quantizer rounds ties to even and bounds error") {
  CHECK(quantize_value(1.25f, 0.5f) == 2);   // 2.5 -> 2
  CHECK(quantize_value(0.75f, 0.5f) == 2);   // 1.5 -> 2
  CHECK(quantize_value(0.25f, 0.5f) == 0);   // 0.5 -> 0
  CHECK(quantize_value(-1.25f, 0.5f) == -2); // -2.5 -> -2
  CHECK(quantize_value(0.f, 0.125f) == 0);
  CHECK(dequantize_value(-7, 0.25f) == -1.75f);

  XRng rng(27);
  for (int rep = 0; rep < 4000; ++rep) {
    const float step = std::exp(rng.range(-8.f, 2.f));
    const float v = rng.range(-1000.f, 1000.f);
    const int32_t s = quantize_value(v, step);
    const float back = dequantize_value(s, step);
    CHECK(std::abs(double(back) - double(v)) <= 0.5 * double(step) + std::abs(double(v)) * 4e-7);
    // Requantizing a reconstruction is a fixed point.
    CHECK(quantize_value(back, step) == s);
  }

  CHECK_THROWS_AS(quantize_value(1.f, 0.f), InvariantError);
  CHECK_THROWS_AS(quantize_value(1.f, -0.5f), InvariantError);
  CHECK_THROWS_AS(quantize_value(1.f, std::numeric_limits<float>::quiet_NaN()), InvariantError);
  CHECK_THROWS_AS(quantize_value(1.f, std::numeric_limits<float>::infinity()), InvariantError);
  CHECK_THROWS_AS(quantize_value(3e9f, 1.f), InvariantError);
}

TEST_CASE("covariance matches rotation and scale composition") {
  // Identity rotation: plain squared scales on the diagonal.
  const auto d = covariance_from({1, 0, 0, 0}, {1, 2, 3});
  const float want_d[9] = {1, 0, 0, 0, 4, 0, 0, 0, 9};
  for (int i = 0; i < 9; ++i) CHECK(d[size_t(i)] == doctest::Approx(want_d[i]).epsilon(1e-6));

  // Quarter turn about z swaps the x and y variances.
  const float h = std::sqrt(0.5f);
  const auto r = covariance_from({h, 0, 0, h}, {1, 2, 3});
  const float want_r[9] = {4, 0, 0, 0, 1, 0, 0, 0, 9};
  for (int i = 0; i < 9; ++i) CHECK(r[size_t(i)] == doctest::Approx(want_r[i]).epsilon(5e-5));

  // Quaternion scale does not matter.
  const auto a = covariance_from({0.3f, -0.4f, 0.5f, -0.1f}, {2, 0.5f, 1});
  const auto b = covariance_from({0.6f, -0.8f, 1.0f, -0.2f}, {2, 0.5f, 1});
  for (int i = 0; i < 9; ++i) CHECK(a[size_t(i)] == doctest::Approx(b[size_t(i)]).epsilon(1e-5));

  CHECK_THROWS_AS(covariance_from({0, 0, 0, 0}, {1, 1, 1}), InputError);
}

TEST_CASE("covariance invariants hold under fuzzed rotations") {
  XRng rng(28);
  for (int rep = 0; rep < 300; ++rep) {
    std::array<float, 4> q;
    float qn = 0;
    for (auto& v : q) {
      v = rng.range(-1.f, 1.f);
      qn += v * v;
    }
    if (qn < 1e-4f) q[0] = 1.f;
    // Mild anisotropy keeps the float determinant's cancellation error well
    // below the tolerance while still exercising the rotation fully.
    std::array<float, 3> s;
    for (auto& v : s) v = std::exp(rng.range(-1.f, 1.f));

    const auto m = covariance_from(q, s);
    // Symmetric, rotation-invariant trace and determinant.
    CHECK(m[1] == doctest::Approx(m[3]).epsilon(1e-5));
    CHECK(m[2] == doctest::Approx(m[6]).epsilon(1e-5));
    CHECK(m[5] == doctest::Approx(m[7]).epsilon(1e-5));
    const double tr = double(m[0]) + double(m[4]) + double(m[8]);
    const double want_tr = double(s[0]) * s[0] + double(s[1]) * s[1] + double(s[2]) * s[2];
    CHECK(tr == doctest::Approx(want_tr).epsilon(1e-4));
    const double det = double(m[0]) * (double(m[4]) * m[8] - double(m[5]) * m[7]) -
                       double(m[1]) * (double(m[3]) * m[8] - double(m[5]) * m[6]) +
                       double(m[2]) * (double(m[3]) * m[7] - double(m[4]) * m[6]);
    const double want_det = std::pow(double(s[0]) * s[1] * s[2], 2.0);
    CHECK(det == doctest::Approx(want_det).epsilon(1e-2));
  }
}

TEST_CASE("encoder bbox is exact and pads degenerate axes") {
  GaussianCloud c;
  c.resize(3);
  const float pos[9] = {1.f, -2.f, 7.f, 4.f, 0.f, 7.f, -3.f, 5.f, 7.f};
  std::copy(pos, pos + 9, c.positions.begin());
  const PositionQuant q = make_position_quant(c, 14);
  CHECK(q.bits == 14);
  CHECK(q.bbox_min[0] == -3.0);
  CHECK(q.bbox_max[0] == 4.0);
  CHECK(q.bbox_min[1] == -2.0);
  CHECK(q.bbox_max[1] == 5.0);
  // Constant z axis pads to unit width around the value.
  CHECK(q.bbox_min[2] == doctest::Approx(6.5));
  CHECK(q.bbox_max[2] == doctest::Approx(7.5));

  GaussianCloud single;
  single.resize(1);
  const PositionQuant qs = make_position_quant(single, 16);
  for (int a = 0; a < 3; ++a) CHECK(qs.bbox_max[a] - qs.bbox_min[a] == doctest::Approx(1.0));
}

TEST_CASE("geometry row gather and scatter are inverse") {
  XRng rng(29);
  GaussianCloud c = fuzz_cloud(rng, 4);
  float row[kGeomChannels];
  gather_geometry_row(c, 2, row);
  CHECK(row[0] == c.scales[6]);
  CHECK(row[3] == c.rotations[8]);
  CHECK(row[7] == c.opacities[2]);

  GaussianCloud d;
  d.resize(4);
  scatter_geometry_row(d, 2, row);
  float row2[kGeomChannels];
  gather_geometry_row(d, 2, row2);
  for (int i = 0; i < kGeomChannels; ++i) CHECK(row[i] == row2[i]);
}
