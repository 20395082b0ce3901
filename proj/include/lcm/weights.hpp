#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lcm/layers.hpp"
#include "lcm/tensor.hpp"

namespace lcm {

// Weight container: "LCMW", version u16, tensor count u32, then per tensor
// {name_len u16, name, rank u8, dims u32 x rank, f32 payload}, and a trailing
// CRC-32 of everything before it. Tensors are written in name order, so a
// given WeightMap always serializes to identical bytes.
inline constexpr uint16_t kWeightsVersion = 1;

std::vector<uint8_t> serialize_weights(const WeightMap<float>& wm);
WeightMap<float> deserialize_weights(const uint8_t* data, size_t size);

void save_weights(const std::string& path, const WeightMap<float>& wm);
WeightMap<float> load_weights(const std::string& path);

// The architecture id rides inside the container as tensor "meta.arch".
void set_arch_id(WeightMap<float>& wm, uint32_t id);
uint32_t get_arch_id(const WeightMap<float>& wm);

}  // namespace lcm
