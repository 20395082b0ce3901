#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lcm/layers.hpp"

namespace lcm {

// Channel widths shared by every profile. Geometry rows are
// [scale x3, rotation x4, opacity]; colors are 48 SH coefficients (DC first).
inline constexpr int kLossyLatentChannels = 128;
inline constexpr int kGeomHyperChannels = 8;
inline constexpr int kLossyHyperChannels = 32;
inline constexpr int kColorHyperChannels = 48;

std::vector<int> geometry_subgroups();   // {3, 4, 1}
std::vector<int> lossy_subgroups();      // {32, 32, 64}
std::vector<int> lossless_subgroups();   // {8, 8, 16, 16}

// Architecture ids are stored in both weight files and bitstreams; encode and
// decode must agree on one id to share a byte-exact model.
inline constexpr uint32_t kArchDefault = 1;
inline constexpr uint32_t kArchToy = 2;
inline constexpr uint32_t kArchToyNoSpaceCtx = 16;
inline constexpr uint32_t kArchToyNoChannelCtx = 17;
inline constexpr uint32_t kArchToyRandomOrder = 18;
inline constexpr uint32_t kArchToyMlpBackbone = 19;

struct ArchConfig {
  uint32_t id = kArchDefault;
  int feature_width = 64;
  int heads = 4;
  int ffn_mult = 2;
  int dgcnn_hidden = 32;
  int dgcnn_k = 8;
  int mixture_k = 3;
  int window_len = 1024;
  int position_bits = 16;
  bool space_ctx = true;
  bool channel_ctx = true;
  bool attention_backbone = true;
  // Nonzero replaces the space-filling-curve order with a seeded shuffle.
  uint64_t serialization_shuffle_seed = 0;
};

ArchConfig arch_config(uint32_t id);
uint32_t arch_id_for_profile(const std::string& profile);  // "default" | "toy"

// One coded attribute section. `value_channels` is the width of the rows the
// context nets consume; `sym_channels` the number of coded symbol channels.
struct SectionSpec {
  std::string prefix;
  int value_channels = 0;
  int sym_channels = 0;
  int hyper_channels = 0;
  std::vector<int> subgroups;
  bool mixture = true;     // logistic mixtures; false = discretized gaussian
  bool has_transform = false;
};

SectionSpec geom_section();
SectionSpec lossy_color_section();
SectionSpec lossless_color_section();

// Quantization step defaults. Geometry steps stay fixed through training;
// color steps are trainable in the joint stage. The toy profiles use coarser
// steps sized so typical symbol magnitudes fit the coder's table window.
std::vector<float> default_geometry_steps(const ArchConfig& cfg);
std::vector<float> default_color_steps(const ArchConfig& cfg);

// Full tensor-shape registry for an architecture. Keys are tensor names,
// values the expected dims.
std::map<std::string, std::vector<int>> weight_shapes(const ArchConfig& cfg);

// Fresh seeded weights matching weight_shapes(cfg); includes meta.arch.
WeightMap<float> init_weights(const ArchConfig& cfg, uint64_t seed);

// Throws InvariantError when a tensor is missing, extra, or misshaped.
void validate_weights(const WeightMap<float>& wm, const ArchConfig& cfg);

}  // namespace lcm
