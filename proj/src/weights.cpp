#include "lcm/weights.hpp"

#include <cmath>

#include "lcm/bytes.hpp"

namespace lcm {
namespace {
constexpr char kMagic[4] = {'L', 'C', 'M', 'W'};
}

std::vector<uint8_t> serialize_weights(const WeightMap<float>& wm) {
  ByteWriter w;
  w.put_bytes(kMagic, 4);
  w.put_u16(kWeightsVersion);
  if (wm.tensors.size() > 0xFFFFFFFFull) throw InvariantError("too many tensors");
  w.put_u32(uint32_t(wm.tensors.size()));
  for (const auto& [name, t] : wm.tensors) {
    if (name.empty() || name.size() > 0xFFFF) throw InvariantError("bad tensor name: " + name);
    w.put_u16(uint16_t(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put_u8(uint8_t(t.rank));
    for (int d = 0; d < t.rank; ++d) w.put_u32(uint32_t(t.dim[d]));
    for (float v : t.v) {
      if (!std::isfinite(v)) throw InvariantError("non-finite value in tensor " + name);
      w.put_f32(v);
    }
  }
  const uint32_t crc = crc32(w.bytes().data(), w.size());
  w.put_u32(crc);
  return w.take();
}

WeightMap<float> deserialize_weights(const uint8_t* data, size_t size) {
  if (size < 4 + 2 + 4 + 4) throw CorruptStreamError("weight file too small");
  const size_t body = size - 4;
  ByteReader crc_r(data + body, 4);
  if (crc_r.get_u32() != crc32(data, body)) throw CorruptStreamError("weight file checksum mismatch");

  ByteReader r(data, body);
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw CorruptStreamError("not a weight file");
  const uint16_t version = r.get_u16();
  if (version != kWeightsVersion)
    throw CorruptStreamError("unsupported weight file version " + std::to_string(version));
  const uint32_t count = r.get_u32();

  WeightMap<float> wm;
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t name_len = r.get_u16();
    if (name_len == 0) throw CorruptStreamError("empty tensor name");
    const std::string name = r.get_string(name_len);
    const uint8_t rank = r.get_u8();
    if (rank < 1 || rank > 3) throw CorruptStreamError("tensor rank out of range: " + name);
    Tensor t;
    t.rank = rank;
    size_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      t.dim[d] = int(r.get_u32());
      if (t.dim[d] <= 0 || size_t(t.dim[d]) > (1u << 28)) throw CorruptStreamError("tensor dim out of range: " + name);
      numel *= size_t(t.dim[d]);
    }
    if (numel > (1u << 28)) throw CorruptStreamError("tensor too large: " + name);
    t.v.resize(numel);
    for (size_t e = 0; e < numel; ++e) t.v[e] = r.get_f32();
    if (!all_finite(t)) throw CorruptStreamError("non-finite value in tensor " + name);
    if (!wm.tensors.emplace(name, std::move(t)).second)
      throw CorruptStreamError("duplicate tensor name: " + name);
  }
  if (r.remaining() != 0) throw CorruptStreamError("weight file has trailing bytes");
  return wm;
}

void save_weights(const std::string& path, const WeightMap<float>& wm) {
  write_file_bytes(path, serialize_weights(wm));
}

WeightMap<float> load_weights(const std::string& path) {
  const std::vector<uint8_t> bytes = read_file_bytes(path);
  return deserialize_weights(bytes.data(), bytes.size());
}

void set_arch_id(WeightMap<float>& wm, uint32_t id) {
  Tensor t = Tensor::zeros1(1);
  t.v[0] = float(id);
  wm.tensors["meta.arch"] = std::move(t);
}

uint32_t get_arch_id(const WeightMap<float>& wm) {
  auto it = wm.tensors.find("meta.arch");
  if (it == wm.tensors.end()) throw CorruptStreamError("weight file lacks architecture id");
  return uint32_t(it->second.v[0]);
}

}  // namespace lcm
