#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "lcm/arch.hpp"
#include "lcm/coder.hpp"
#include "lcm/context.hpp"
#include "lcm/gaussian.hpp"

namespace lcm {

// Container layout ("LCM1"): header, then self-describing sections located
// by a table of {id, offset, length, crc32}. Every coded section starts with
// a chunk index (count u32, lengths u32[]); chunks map 1:1 to context
// windows so they decode independently.
inline constexpr uint16_t kContainerVersion = 1;

enum SectionId : uint8_t {
  kSecPositions = 1,
  kSecGeomHyper = 2,
  kSecGeomSymbols = 3,
  kSecDivMask = 4,
  kSecLossyHyper = 5,
  kSecLossyLatent = 6,
  kSecLosslessHyper = 7,
  kSecLosslessSymbols = 8,
};
inline constexpr int kSectionCount = 8;

// Profile flag bits stored in the header.
inline constexpr uint8_t kProfileForcedLossless = 1;
inline constexpr uint8_t kProfileForcedLossy = 2;

struct EncodeOptions {
  int threads = 1;
  int window_len = 0;     // 0 = architecture default
  int position_bits = 0;  // 0 = architecture default
  bool force_lossless = false;
  bool force_lossy = false;
};

struct SectionStats {
  uint64_t bytes = 0;       // payload incl. chunk index
  double model_bits = 0;    // sum of table codelengths of all coded symbols
  int64_t symbols = 0;
};

struct EncodeStats {
  int64_t n = 0;
  uint64_t total_bytes = 0;
  uint64_t header_bytes = 0;
  double model_bits = 0;
  double attribute_bits = 0;  // model bits excluding positions
  std::map<std::string, SectionStats> sections;
  int64_t lossy_tokens = 0;
  int64_t lossless_tokens = 0;
  int64_t clamped_positions = 0;
  double color_mse = 0;  // lossy reconstruction MSE over SH coefficients
};

std::vector<uint8_t> compress(const GaussianCloud& cloud, WeightMap<float>& wm, const EncodeOptions& opt,
                              EncodeStats* stats = nullptr);
GaussianCloud decompress(const std::vector<uint8_t>& bytes, WeightMap<float>& wm, int threads = 1);

// Header-only view, no weights required.
struct ContainerInfo {
  uint16_t version = 0;
  uint8_t profile_flags = 0;
  int position_bits = 0;
  int64_t n = 0;
  uint32_t window_len = 0;
  uint32_t arch_id = 0;
  std::array<double, 3> bbox_min{}, bbox_max{};
  struct Section {
    uint8_t id;
    uint64_t offset;
    uint64_t length;
    uint32_t crc;
    uint32_t chunks;
  };
  std::vector<Section> sections;
};
ContainerInfo inspect_container(const std::vector<uint8_t>& bytes);

// --- coding tables ------------------------------------------------------------

// Per-cell mixture table over the symbol window [lo, hi] (subset of the
// channel support [cmin, cmax]) with exact tail masses on up to two escape
// slots; escapes code the residual uniformly over the excluded range.
struct MixtureTable {
  CdfTable table;
  int32_t lo = 0, hi = 0;
  int32_t cmin = 0, cmax = 0;
  bool esc_left = false, esc_right = false;
};
MixtureTable build_mixture_table(const LogisticMixtureParams& p, int32_t cmin, int32_t cmax, int half_width);
inline constexpr int kMixtureHalfWidth = 32;

void encode_mixture_symbol(RangeEncoder& enc, const MixtureTable& t, int32_t sym);
int32_t decode_mixture_symbol(RangeDecoder& dec, const MixtureTable& t);

// Discretized-gaussian residual tables indexed by a geometric sigma grid and
// a quantized fractional mean offset; residuals live in [-R, R].
class GaussianTables {
 public:
  explicit GaussianTables(int32_t R);

  static int sigma_level(double sigma);  // 0..63 on [kSigmaMin, 256]
  static double level_sigma(int level);
  static int offset_bin(double frac);  // frac in [-0.5, 0.5] -> 0..3
  static double bin_offset(int bin);

  const CdfTable& table(int level, int bin);
  int32_t radius() const { return R_; }

 private:
  int32_t R_;
  std::array<std::unique_ptr<CdfTable>, 64 * 4> cache_;
};

// Full-support factorized tables for one hyper section.
std::vector<CdfTable> factorized_tables(const WeightMap<float>& wm, const std::string& prefix, int channels,
                                        const std::vector<int32_t>& support_min,
                                        const std::vector<int32_t>& support_max);

}  // namespace lcm
