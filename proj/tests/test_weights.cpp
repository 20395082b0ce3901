#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "doctest.h"
#include "lcm/arch.hpp"
#include "lcm/bytes.hpp"
#include "lcm/common.hpp"
#include "lcm/tensor.hpp"
#include "lcm/weights.hpp"

using namespace lcm;

namespace {

WeightMap<float> small_map() {
  WeightMap<float> wm;
  Tensor a = Tensor::zeros2(2, 3);
  for (size_t i = 0; i < a.v.size(); ++i) a.v[i] = float(i) * 0.25f - 0.5f;
  wm.tensors["alpha"] = a;
  Tensor b = Tensor::zeros1(4);
  b.v = {1.5f, -2.25f, 0.f, 1e-20f};
  wm.tensors["beta.bias"] = b;
  set_arch_id(wm, kArchToy);
  return wm;
}

bool maps_equal(const WeightMap<float>& x, const WeightMap<float>& y) {
  if (x.tensors.size() != y.tensors.size()) return false;
  for (const auto& [name, t] : x.tensors) {
    auto it = y.tensors.find(name);
    if (it == y.tensors.end()) return false;
    const Tensor& u = it->second;
    if (t.rank != u.rank || t.v != u.v) return false;
    for (int d = 0; d < t.rank; ++d)
      if (t.dim[d] != u.dim[d]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("weight container roundtrips bit-exactly and deterministically") {
  const WeightMap<float> wm = small_map();
  const std::vector<uint8_t> bytes = serialize_weights(wm);
  const WeightMap<float> back = deserialize_weights(bytes.data(), bytes.size());
  CHECK(maps_equal(wm, back));
  CHECK(get_arch_id(back) == kArchToy);
  // Same map, same bytes: the container orders tensors by name.
  CHECK(serialize_weights(back) == bytes);

  // A full architecture's weights survive the trip too.
  const WeightMap<float> big = init_weights(arch_config(kArchToy), 3);
  const std::vector<uint8_t> bb = serialize_weights(big);
  CHECK(maps_equal(big, deserialize_weights(bb.data(), bb.size())));
}

TEST_CASE("weight container header layout is stable") {
  const std::vector<uint8_t> bytes = serialize_weights(small_map());
  REQUIRE(bytes.size() > 10);
  CHECK(bytes[0] == 'L');
  CHECK(bytes[1] == 'C');
  CHECK(bytes[2] == 'M');
  CHECK(bytes[3] == 'W');
  CHECK((uint32_t(bytes[4]) | (uint32_t(bytes[5]) << 8)) == kWeightsVersion);
  const uint32_t count =
      uint32_t(bytes[6]) | (uint32_t(bytes[7]) << 8) | (uint32_t(bytes[8]) << 16) | (uint32_t(bytes[9]) << 24);
  CHECK(count == 3);  // alpha, beta.bias, meta.arch
}

TEST_CASE("weight container rejects corruption") {
  const WeightMap<float> wm = small_map();
  std::vector<uint8_t> bytes = serialize_weights(wm);

  // Every single-byte flip must be caught by the checksum.
  for (size_t at : {size_t(0), size_t(5), bytes.size() / 2, bytes.size() - 5}) {
    std::vector<uint8_t> bad = bytes;
    bad[at] ^= 0x40;
    CHECK_THROWS_AS(deserialize_weights(bad.data(), bad.size()), CorruptStreamError);
  }

  // Truncation and padding both fail.
  CHECK_THROWS_AS(deserialize_weights(bytes.data(), bytes.size() - 1), CorruptStreamError);
  CHECK_THROWS_AS(deserialize_weights(bytes.data(), 8), CorruptStreamError);
  std::vector<uint8_t> padded = bytes;
  padded.push_back(0);
  CHECK_THROWS_AS(deserialize_weights(padded.data(), padded.size()), CorruptStreamError);

  // Wrong magic with a recomputed checksum still fails.
  std::vector<uint8_t> remagic = bytes;
  remagic[3] = 'X';
  const uint32_t crc = crc32(remagic.data(), remagic.size() - 4);
  for (int i = 0; i < 4; ++i) remagic[remagic.size() - 4 + size_t(i)] = uint8_t(crc >> (8 * i));
  CHECK_THROWS_AS(deserialize_weights(remagic.data(), remagic.size()), CorruptStreamError);
}

TEST_CASE("weight serializer rejects non-finite values and bad names") {
  WeightMap<float> wm = small_map();
  wm.tensors["alpha"].v[1] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(serialize_weights(wm), InvariantError);

  WeightMap<float> wm2 = small_map();
  wm2.tensors[""] = Tensor::zeros1(1);
  CHECK_THROWS_AS(serialize_weights(wm2), InvariantError);
}

TEST_CASE("weight files survive a disk trip") {
  const std::string path = "/tmp/lcm_test_weights.bin";
  const WeightMap<float> wm = small_map();
  save_weights(path, wm);
  CHECK(maps_equal(wm, load_weights(path)));
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_weights(path), Error);
}

TEST_CASE("arch id travels as a tensor") {
  WeightMap<float> wm;
  CHECK_THROWS_AS(get_arch_id(wm), CorruptStreamError);
  set_arch_id(wm, kArchToyRandomOrder);
  CHECK(get_arch_id(wm) == kArchToyRandomOrder);
  set_arch_id(wm, kArchDefault);
  CHECK(get_arch_id(wm) == kArchDefault);
}

TEST_CASE("weight validation pins the registry exactly") {
  const ArchConfig cfg = arch_config(kArchToy);
  WeightMap<float> wm = init_weights(cfg, 11);
  validate_weights(wm, cfg);  // fresh init passes

  // Missing tensor.
  WeightMap<float> missing = wm;
  missing.tensors.erase(missing.tensors.begin()->first);
  CHECK_THROWS_AS(validate_weights(missing, cfg), InvariantError);

  // Extra tensor.
  WeightMap<float> extra = wm;
  extra.tensors["stray"] = Tensor::zeros1(2);
  CHECK_THROWS_AS(validate_weights(extra, cfg), InvariantError);

  // Misshaped tensor: transpose the dims of some rank-2 tensor.
  WeightMap<float> shaped = wm;
  for (auto& [name, t] : shaped.tensors) {
    if (t.rank == 2 && t.dim[0] != t.dim[1]) {
      std::swap(t.dim[0], t.dim[1]);
      break;
    }
  }
  CHECK_THROWS_AS(validate_weights(shaped, cfg), InvariantError);

  // The registry itself matches the init tensor-for-tensor.
  const auto shapes = weight_shapes(cfg);
  CHECK(shapes.size() == wm.tensors.size());
  for (const auto& [name, dims] : shapes) {
    auto it = wm.tensors.find(name);
    REQUIRE(it != wm.tensors.end());
    REQUIRE(it->second.rank == int(dims.size()));
    for (size_t d = 0; d < dims.size(); ++d) CHECK(it->second.dim[d] == dims[d]);
  }
}

TEST_CASE("different profiles declare different registries") {
  const auto toy = weight_shapes(arch_config(kArchToy));
  const auto full = weight_shapes(arch_config(kArchDefault));
  CHECK(toy.size() == full.size());  // same structure, different widths
  bool any_differs = false;
  for (const auto& [name, dims] : toy) {
    auto it = full.find(name);
    REQUIRE(it != full.end());
    if (dims != it->second) any_differs = true;
  }
  CHECK(any_differs);

  // Ablation profiles stay loadable and self-consistent.
  for (uint32_t id : {kArchToyNoSpaceCtx, kArchToyNoChannelCtx, kArchToyRandomOrder, kArchToyMlpBackbone}) {
    const ArchConfig cfg = arch_config(id);
    WeightMap<float> wm = init_weights(cfg, 5);
    validate_weights(wm, cfg);
    CHECK(get_arch_id(wm) == id);
  }
}

TEST_CASE("seeded init is reproducible and seed-sensitive") {
  const ArchConfig cfg = arch_config(kArchToy);
  const std::vector<uint8_t> a = serialize_weights(init_weights(cfg, 42));
  const std::vector<uint8_t> b = serialize_weights(init_weights(cfg, 42));
  const std::vector<uint8_t> c = serialize_weights(init_weights(cfg, 43));
  CHECK(a == b);
  CHECK(a != c);
}
