#pragma once

#include <cstdint>
#include <vector>

#include "lcm/common.hpp"

namespace lcm {

// Interleave three d-bit grid coordinates into a 3d-bit code: bit i of x
// lands at output bit 3i, y at 3i+1, z at 3i+2. d <= 21 keeps the code in 63
// bits.
uint64_t morton_code(uint32_t x, uint32_t y, uint32_t z, int bits);
void morton_decode(uint64_t code, int bits, uint32_t& x, uint32_t& y, uint32_t& z);

// Permutation that sorts points by ascending Morton code. Stable: equal
// codes keep their original relative order. grid is N x 3.
std::vector<int64_t> serialize_order(const std::vector<uint32_t>& grid, int bits);

// Split a sequence of n tokens into ceil(n / window) context windows; every
// window has `window` tokens except a shorter last one. Returns window
// lengths. n == 0 yields no windows.
std::vector<int32_t> partition_windows(int64_t n, int32_t window);

// Even window positions (0-based) are anchors, odd are nonanchors.
struct SpaceSplit {
  std::vector<int32_t> anchors;
  std::vector<int32_t> nonanchors;
};
SpaceSplit space_split(int32_t window_len);

// Contiguous channel subgroups. Sizes must be positive and sum to the total
// channel count.
struct ChannelGroup {
  int32_t begin;
  int32_t size;
};
std::vector<ChannelGroup> channel_split(int32_t channels, const std::vector<int32_t>& sizes);

// Distance statistics between consecutive points of a sequence, normalized
// by the bbox diagonal of the point set. Requires n >= 2.
struct LocalityStats {
  double median = 0;
  double p90 = 0;
};
LocalityStats locality_stats(const std::vector<float>& positions, const std::vector<int64_t>& order);

}  // namespace lcm
