#include "lcm/gaussian.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace lcm {

namespace {

// Property names in standard splat export order. Offsets are resolved by
// name, so files with extra properties or permuted order still parse.
const char* kPropNames[] = {
    "x", "y", "z", "nx", "ny", "nz",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "f_rest_0", "f_rest_1", "f_rest_2", "f_rest_3", "f_rest_4", "f_rest_5", "f_rest_6", "f_rest_7",
    "f_rest_8", "f_rest_9", "f_rest_10", "f_rest_11", "f_rest_12", "f_rest_13", "f_rest_14", "f_rest_15",
    "f_rest_16", "f_rest_17", "f_rest_18", "f_rest_19", "f_rest_20", "f_rest_21", "f_rest_22", "f_rest_23",
    "f_rest_24", "f_rest_25", "f_rest_26", "f_rest_27", "f_rest_28", "f_rest_29", "f_rest_30", "f_rest_31",
    "f_rest_32", "f_rest_33", "f_rest_34", "f_rest_35", "f_rest_36", "f_rest_37", "f_rest_38", "f_rest_39",
    "f_rest_40", "f_rest_41", "f_rest_42", "f_rest_43", "f_rest_44",
    "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"};
constexpr int kPropCount = int(sizeof(kPropNames) / sizeof(kPropNames[0]));  // 62

float read_f32le(const uint8_t* p) {
  uint32_t u = uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

void write_f32le(std::vector<uint8_t>& out, float f) {
  uint32_t u;
  std::memcpy(&u, &f, 4);
  out.push_back(uint8_t(u));
  out.push_back(uint8_t(u >> 8));
  out.push_back(uint8_t(u >> 16));
  out.push_back(uint8_t(u >> 24));
}

}  // namespace

GaussianCloud parse_ply(const std::vector<uint8_t>& bytes) {
  // Locate end of header.
  const std::string end_marker = "end_header\n";
  std::string head(reinterpret_cast<const char*>(bytes.data()), std::min<size_t>(bytes.size(), 65536));
  size_t hend = head.find(end_marker);
  if (hend == std::string::npos) throw InputError("ply: missing end_header");
  size_t body_off = hend + end_marker.size();

  std::istringstream hs(head.substr(0, hend));
  std::string line;
  if (!std::getline(hs, line) || line != "ply") throw InputError("ply: missing magic");
  int64_t vertex_count = -1;
  bool in_vertex = false, fmt_ok = false;
  // property name -> byte offset within a vertex record
  std::map<std::string, size_t> prop_off;
  size_t stride = 0;
  while (std::getline(hs, line)) {
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "format") {
      std::string f;
      ls >> f;
      if (f != "binary_little_endian") throw InputError("ply: unsupported format '" + f + "'");
      fmt_ok = true;
    } else if (tok == "element") {
      std::string name;
      int64_t cnt;
      ls >> name >> cnt;
      if (name == "vertex") {
        vertex_count = cnt;
        in_vertex = true;
      } else {
        if (in_vertex && cnt > 0) throw InputError("ply: trailing element '" + name + "' unsupported");
        in_vertex = false;
      }
    } else if (tok == "property" && in_vertex) {
      std::string type, name;
      ls >> type >> name;
      if (type != "float" && type != "float32")
        throw InputError("ply: property '" + name + "' has non-float type '" + type + "'");
      prop_off[name] = stride;
      stride += 4;
    }
  }
  if (!fmt_ok) throw InputError("ply: missing format line");
  if (vertex_count < 0) throw InputError("ply: missing vertex element");

  size_t off[kPropCount];
  for (int i = 0; i < kPropCount; ++i) {
    auto it = prop_off.find(kPropNames[i]);
    if (it == prop_off.end()) throw InputError(std::string("ply: missing property ") + kPropNames[i]);
    off[i] = it->second;
  }
  size_t need = body_off + size_t(vertex_count) * stride;
  if (bytes.size() < need)
    throw InputError("ply: truncated body, need " + std::to_string(need) + " bytes, have " +
                     std::to_string(bytes.size()));

  GaussianCloud c;
  c.resize(vertex_count);
  for (int64_t i = 0; i < vertex_count; ++i) {
    const uint8_t* rec = bytes.data() + body_off + size_t(i) * stride;
    auto fld = [&](int p) { return read_f32le(rec + off[p]); };
    for (int a = 0; a < 3; ++a) c.positions[size_t(i) * 3 + a] = fld(a);
    for (int a = 0; a < 3; ++a) c.normals[size_t(i) * 3 + a] = fld(3 + a);
    for (int a = 0; a < 48; ++a) c.colors[size_t(i) * 48 + a] = fld(6 + a);
    c.opacities[size_t(i)] = fld(54);
    for (int a = 0; a < 3; ++a) c.scales[size_t(i) * 3 + a] = fld(55 + a);
    for (int a = 0; a < 4; ++a) c.rotations[size_t(i) * 4 + a] = fld(58 + a);
    float qn = 0;
    for (int a = 0; a < 4; ++a) {
      float q = c.rotations[size_t(i) * 4 + a];
      qn += q * q;
    }
    if (qn == 0.f) throw InputError("ply: zero-norm quaternion at vertex " + std::to_string(i));
  }
  return c;
}

std::vector<uint8_t> write_ply(const GaussianCloud& c) {
  if (c.n <= 0) throw InputError("write_ply: empty cloud");
  std::string header = "ply\nformat binary_little_endian 1.0\nelement vertex " + std::to_string(c.n) + "\n";
  for (int i = 0; i < kPropCount; ++i) header += std::string("property float ") + kPropNames[i] + "\n";
  header += "end_header\n";

  std::vector<uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + size_t(c.n) * kPropCount * 4);
  auto check = [&](float v, const char* field, int64_t i) {
    if (!std::isfinite(v))
      throw InputError(std::string("write_ply: non-finite ") + field + " at vertex " + std::to_string(i));
    return v;
  };
  for (int64_t i = 0; i < c.n; ++i) {
    for (int a = 0; a < 3; ++a) write_f32le(out, check(c.positions[size_t(i) * 3 + a], "position", i));
    for (int a = 0; a < 3; ++a) write_f32le(out, check(c.normals[size_t(i) * 3 + a], "normal", i));
    for (int a = 0; a < 48; ++a) write_f32le(out, check(c.colors[size_t(i) * 48 + a], "color", i));
    write_f32le(out, check(c.opacities[size_t(i)], "opacity", i));
    for (int a = 0; a < 3; ++a) write_f32le(out, check(c.scales[size_t(i) * 3 + a], "scale", i));
    for (int a = 0; a < 4; ++a) write_f32le(out, check(c.rotations[size_t(i) * 4 + a], "rotation", i));
  }
  return out;
}

GaussianCloud load_ply_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_ply(bytes);
}

void save_ply_file(const std::string& path, const GaussianCloud& cloud) {
  auto bytes = write_ply(cloud);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw InputError("write failed for " + path);
}

std::vector<uint32_t> quantize_positions(const float* positions, int64_t n, const PositionQuant& q,
                                         int64_t* clamped) {
  if (q.bits < 1 || q.bits > 21) throw InputError("quantize_positions: bits must be in [1, 21]");
  for (int a = 0; a < 3; ++a)
    if (!(q.bbox_min[a] < q.bbox_max[a]))
      throw InputError("quantize_positions: degenerate bbox axis " + std::to_string(a));
  const uint32_t grid_max = (uint32_t(1) << q.bits) - 1;
  std::vector<uint32_t> out(size_t(n) * 3);
  int64_t clamp_count = 0;
  for (int64_t i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) {
      double w = q.bbox_max[a] - q.bbox_min[a];
      double t = (double(positions[size_t(i) * 3 + a]) - q.bbox_min[a]) / w;
      double s = round_even(t * double(grid_max));
      if (s < 0) {
        s = 0;
        ++clamp_count;
      } else if (s > double(grid_max)) {
        s = double(grid_max);
        ++clamp_count;
      }
      out[size_t(i) * 3 + a] = uint32_t(s);
    }
  }
  if (clamped) *clamped = clamp_count;
  return out;
}

std::vector<float> dequantize_positions(const uint32_t* grid, int64_t n, const PositionQuant& q) {
  const uint32_t grid_max = (uint32_t(1) << q.bits) - 1;
  std::vector<float> out(size_t(n) * 3);
  for (int64_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) {
      double w = q.bbox_max[a] - q.bbox_min[a];
      out[size_t(i) * 3 + a] = float(q.bbox_min[a] + double(grid[size_t(i) * 3 + a]) / double(grid_max) * w);
    }
  return out;
}

int32_t quantize_value(float value, float step) {
  if (!(step > 0.f) || !std::isfinite(step)) throw InvariantError("quantize_value: bad step");
  double s = round_even(double(value) / double(step));
  if (s > 2147483647.0 || s < -2147483648.0) throw InvariantError("quantize_value: symbol overflow");
  return int32_t(s);
}

std::array<float, 9> covariance_from(const std::array<float, 4>& q, const std::array<float, 3>& s) {
  double n = std::sqrt(double(q[0]) * q[0] + double(q[1]) * q[1] + double(q[2]) * q[2] + double(q[3]) * q[3]);
  if (n == 0.0) throw InputError("covariance_from: zero-norm quaternion");
  double w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
  // Row-major rotation matrix.
  double R[9] = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
                 2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
                 2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
  // M = R * diag(s); Sigma = M * M^T, symmetric PSD by construction.
  double M[9];
  for (int r = 0; r < 3; ++r)
    for (int cidx = 0; cidx < 3; ++cidx) M[r * 3 + cidx] = R[r * 3 + cidx] * double(s[cidx]);
  std::array<float, 9> sigma;
  for (int r = 0; r < 3; ++r)
    for (int cidx = 0; cidx < 3; ++cidx) {
      double acc = 0;
      for (int k = 0; k < 3; ++k) acc += M[r * 3 + k] * M[cidx * 3 + k];
      sigma[size_t(r * 3 + cidx)] = float(acc);
    }
  return sigma;
}

PositionQuant make_position_quant(const GaussianCloud& c, int bits) {
  PositionQuant q;
  q.bits = bits;
  for (int a = 0; a < 3; ++a) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (int64_t i = 0; i < c.n; ++i) {
      double v = c.positions[size_t(i) * 3 + a];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (c.n == 0) {
      lo = 0;
      hi = 1;
    }
    if (!(lo < hi)) {
      // Degenerate axis (single point or planar cloud): pad to unit width.
      lo -= 0.5;
      hi += 0.5;
    }
    q.bbox_min[a] = lo;
    q.bbox_max[a] = hi;
  }
  return q;
}

}  // namespace lcm
