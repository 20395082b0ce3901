#include "lcm/morton.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace lcm {

namespace {
// Spread the low 21 bits of v so bit i moves to bit 3i.
uint64_t spread3(uint64_t v) {
  v &= 0x1FFFFF;
  v = (v | v << 32) & 0x1F00000000FFFFull;
  v = (v | v << 16) & 0x1F0000FF0000FFull;
  v = (v | v << 8) & 0x100F00F00F00F00Full;
  v = (v | v << 4) & 0x10C30C30C30C30C3ull;
  v = (v | v << 2) & 0x1249249249249249ull;
  return v;
}

uint32_t compact3(uint64_t v) {
  v &= 0x1249249249249249ull;
  v = (v ^ (v >> 2)) & 0x10C30C30C30C30C3ull;
  v = (v ^ (v >> 4)) & 0x100F00F00F00F00Full;
  v = (v ^ (v >> 8)) & 0x1F0000FF0000FFull;
  v = (v ^ (v >> 16)) & 0x1F00000000FFFFull;
  v = (v ^ (v >> 32)) & 0x1FFFFF;
  return uint32_t(v);
}
}  // namespace

uint64_t morton_code(uint32_t x, uint32_t y, uint32_t z, int bits) {
  if (bits < 1 || bits > 21) throw InvariantError("morton_code: bits must be in [1, 21]");
  uint32_t lim = bits == 21 ? 0x1FFFFF : ((uint32_t(1) << bits) - 1);
  if (x > lim || y > lim || z > lim) throw InvariantError("morton_code: coordinate exceeds bit depth");
  return spread3(x) | spread3(y) << 1 | spread3(z) << 2;
}

void morton_decode(uint64_t code, int bits, uint32_t& x, uint32_t& y, uint32_t& z) {
  if (bits < 1 || bits > 21) throw InvariantError("morton_decode: bits must be in [1, 21]");
  if (bits < 21 && (code >> (3 * bits)) != 0) throw InvariantError("morton_decode: code exceeds bit depth");
  x = compact3(code);
  y = compact3(code >> 1);
  z = compact3(code >> 2);
}

std::vector<int64_t> serialize_order(const std::vector<uint32_t>& grid, int bits) {
  int64_t n = int64_t(grid.size() / 3);
  std::vector<uint64_t> codes(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    codes[size_t(i)] = morton_code(grid[size_t(i) * 3], grid[size_t(i) * 3 + 1], grid[size_t(i) * 3 + 2], bits);
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), int64_t(0));
  std::stable_sort(order.begin(), order.end(),
                   [&](int64_t a, int64_t b) { return codes[size_t(a)] < codes[size_t(b)]; });
  return order;
}

std::vector<int32_t> partition_windows(int64_t n, int32_t window) {
  if (window < 1) throw InvariantError("partition_windows: window must be >= 1");
  std::vector<int32_t> lens;
  int64_t left = n;
  while (left > 0) {
    int32_t w = int32_t(std::min<int64_t>(left, window));
    lens.push_back(w);
    left -= w;
  }
  return lens;
}

SpaceSplit space_split(int32_t window_len) {
  if (window_len < 1) throw InvariantError("space_split: empty window");
  SpaceSplit s;
  for (int32_t i = 0; i < window_len; ++i)
    (i % 2 == 0 ? s.anchors : s.nonanchors).push_back(i);
  return s;
}

std::vector<ChannelGroup> channel_split(int32_t channels, const std::vector<int32_t>& sizes) {
  std::vector<ChannelGroup> out;
  int32_t at = 0;
  for (int32_t s : sizes) {
    if (s < 1) throw InvariantError("channel_split: nonpositive group size");
    out.push_back({at, s});
    at += s;
  }
  if (at != channels)
    throw InvariantError("channel_split: sizes sum to " + std::to_string(at) + ", expected " +
                         std::to_string(channels));
  return out;
}

LocalityStats locality_stats(const std::vector<float>& positions, const std::vector<int64_t>& order) {
  int64_t n = int64_t(order.size());
  if (n < 2) throw InvariantError("locality_stats: need at least 2 points");
  double lo[3], hi[3];
  for (int a = 0; a < 3; ++a) {
    lo[a] = positions[size_t(order[0]) * 3 + a];
    hi[a] = lo[a];
  }
  for (int64_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) {
      double v = positions[size_t(order[size_t(i)]) * 3 + a];
      lo[a] = std::min(lo[a], v);
      hi[a] = std::max(hi[a], v);
    }
  double diag = 0;
  for (int a = 0; a < 3; ++a) diag += (hi[a] - lo[a]) * (hi[a] - lo[a]);
  diag = std::sqrt(diag);
  if (diag == 0) diag = 1;  // all points identical: distances are all zero anyway

  std::vector<double> d(static_cast<size_t>(n - 1));
  for (int64_t i = 0; i + 1 < n; ++i) {
    double acc = 0;
    for (int a = 0; a < 3; ++a) {
      double dd = double(positions[size_t(order[size_t(i)]) * 3 + a]) -
                  double(positions[size_t(order[size_t(i + 1)]) * 3 + a]);
      acc += dd * dd;
    }
    d[size_t(i)] = std::sqrt(acc) / diag;
  }
  std::sort(d.begin(), d.end());
  LocalityStats st;
  st.median = d[d.size() / 2];
  st.p90 = d[size_t(double(d.size() - 1) * 0.9)];
  return st;
}

}  // namespace lcm
