#include <algorithm>
#include <vector>

#include "doctest.h"
#include "lcm/common.hpp"
#include "lcm/morton.hpp"

using namespace lcm;

TEST_CASE("morton code interleaves bits") {
  // x=3 (11b), y=1 (01b), z=0 with 2-bit coordinates:
  // bit layout z1 y1 x1 z0 y0 x0 = 0 0 1 0 1 1 = 11
  CHECK(morton_code(3, 1, 0, 2) == 11);
  CHECK(morton_code(0, 0, 0, 21) == 0);
  CHECK(morton_code(1, 0, 0, 1) == 1);
  CHECK(morton_code(0, 1, 0, 1) == 2);
  CHECK(morton_code(0, 0, 1, 1) == 4);
  // all-ones coordinates fill 3*bits contiguous low bits
  CHECK(morton_code(7, 7, 7, 3) == (1u << 9) - 1);
}

TEST_CASE("morton code round-trips and is injective") {
  Rng rng(99);
  for (int rep = 0; rep < 3000; ++rep) {
    int bits = 1 + int(rng.below(21));
    uint32_t mask = (bits >= 32) ? 0xFFFFFFFFu : ((1u << bits) - 1u);
    uint32_t x = uint32_t(rng.next_u64()) & mask;
    uint32_t y = uint32_t(rng.next_u64()) & mask;
    uint32_t z = uint32_t(rng.next_u64()) & mask;
    uint64_t code = morton_code(x, y, z, bits);
    CHECK(code < (1ull << (3 * bits)));
    uint32_t rx, ry, rz;
    morton_decode(code, bits, rx, ry, rz);
    CHECK(rx == x);
    CHECK(ry == y);
    CHECK(rz == z);
  }
}

TEST_CASE("serialize_order sorts by code with stable ties") {
  // grid rows: two distinct duplicated coordinates
  std::vector<uint32_t> grid = {5, 5, 5, 1, 2, 3, 5, 5, 5, 1, 2, 3};
  std::vector<int64_t> order = serialize_order(grid, 4);
  CHECK(order == std::vector<int64_t>{1, 3, 0, 2});

  // fuzz: ascending codes, stable on equality
  Rng rng(123);
  for (int rep = 0; rep < 50; ++rep) {
    int n = 1 + int(rng.below(200));
    std::vector<uint32_t> pts(size_t(n) * 3);
    for (auto& v : pts) v = uint32_t(rng.below(8));  // frequent collisions
    std::vector<int64_t> ord = serialize_order(pts, 3);
    REQUIRE(int(ord.size()) == n);
    std::vector<int64_t> sorted_idx = ord;
    std::sort(sorted_idx.begin(), sorted_idx.end());
    for (int i = 0; i < n; ++i) CHECK(sorted_idx[size_t(i)] == i);  // permutation
    for (int i = 0; i + 1 < n; ++i) {
      const auto* a = &pts[size_t(ord[size_t(i)]) * 3];
      const auto* b = &pts[size_t(ord[size_t(i) + 1]) * 3];
      uint64_t ca = morton_code(a[0], a[1], a[2], 3);
      uint64_t cb = morton_code(b[0], b[1], b[2], 3);
      CHECK(ca <= cb);
      if (ca == cb) CHECK(ord[size_t(i)] < ord[size_t(i) + 1]);
    }
  }
}

TEST_CASE("partition_windows covers n with one short tail") {
  CHECK(partition_windows(0, 16).empty());
  CHECK(partition_windows(5, 16) == std::vector<int32_t>{5});
  CHECK(partition_windows(16, 16) == std::vector<int32_t>{16});
  CHECK(partition_windows(35, 16) == std::vector<int32_t>{16, 16, 3});
  Rng rng(5);
  for (int rep = 0; rep < 100; ++rep) {
    int64_t n = 1 + int64_t(rng.below(10000));
    int32_t w = 1 + int32_t(rng.below(600));
    auto parts = partition_windows(n, w);
    int64_t sum = 0;
    for (size_t i = 0; i < parts.size(); ++i) {
      sum += parts[i];
      if (i + 1 < parts.size())
        CHECK(parts[i] == w);
      else
        CHECK(parts[i] <= w);
      CHECK(parts[i] >= 1);
    }
    CHECK(sum == n);
  }
}

TEST_CASE("space_split alternates anchors and nonanchors") {
  SpaceSplit s = space_split(7);
  CHECK(s.anchors == std::vector<int32_t>{0, 2, 4, 6});
  CHECK(s.nonanchors == std::vector<int32_t>{1, 3, 5});
  SpaceSplit one = space_split(1);
  CHECK(one.anchors == std::vector<int32_t>{0});
  CHECK(one.nonanchors.empty());
}

TEST_CASE("channel_split partitions contiguously") {
  auto gs = channel_split(8, {3, 4, 1});
  REQUIRE(gs.size() == 3);
  CHECK(gs[0].begin == 0);
  CHECK(gs[0].size == 3);
  CHECK(gs[1].begin == 3);
  CHECK(gs[1].size == 4);
  CHECK(gs[2].begin == 7);
  CHECK(gs[2].size == 1);
  CHECK_THROWS_AS(channel_split(8, {3, 4}), InvariantError);
  CHECK_THROWS_AS(channel_split(8, {3, 4, 0, 1}), InvariantError);
}

TEST_CASE("morton order dominates random order on locality") {
  Rng rng(2024);
  const int n = 20000;
  std::vector<float> pos(size_t(n) * 3);
  for (auto& v : pos) v = float(rng.uniform(0.0, 1.0));

  std::vector<uint32_t> grid(size_t(n) * 3);
  for (size_t i = 0; i < grid.size(); ++i)
    grid[i] = uint32_t(std::min(1023.0, std::max(0.0, double(pos[i]) * 1024.0)));
  std::vector<int64_t> morton = serialize_order(grid, 10);

  std::vector<int64_t> shuffled(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) shuffled[size_t(i)] = i;
  for (int64_t i = n - 1; i > 0; --i)
    std::swap(shuffled[size_t(i)], shuffled[size_t(rng.below(uint64_t(i + 1)))]);

  LocalityStats ms = locality_stats(pos, morton);
  LocalityStats rs = locality_stats(pos, shuffled);
  CHECK(ms.median > 0.0);
  CHECK(ms.median < 0.1 * rs.median);
  CHECK(ms.p90 < rs.p90);
}
