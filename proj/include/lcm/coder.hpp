#pragma once

#include <cstdint>
#include <vector>

#include "lcm/probability.hpp"

namespace lcm {

// Byte-oriented range coder with 64-bit range and carry propagation. All
// probabilities are CdfTable entries over a total of kProbTotal (1 << 16).
// Per-symbol precision loss is below 2^-30 bits, so coded length tracks
// rate_bits() to within the stream flush (~10 bytes).
class RangeEncoder {
 public:
  RangeEncoder() = default;

  void encode(uint32_t cum, uint32_t freq);
  void encode_symbol(const CdfTable& table, int32_t slot) {
    encode(table.cum[size_t(slot)], table.counts[size_t(slot)]);
  }

  // Flushes the state; the encoder must not be reused afterwards.
  std::vector<uint8_t> finish();

 private:
  void shift_low();

  unsigned __int128 low_ = 0;
  uint64_t range_ = ~0ull;
  uint8_t cache_ = 0;
  int64_t cache_size_ = 1;
  std::vector<uint8_t> bytes_;
  bool finished_ = false;
};

class RangeDecoder {
 public:
  RangeDecoder(const uint8_t* data, size_t size);

  // Scaled cumulative value of the next symbol, in [0, kProbTotal).
  uint32_t decode_cum();
  // Commit the symbol chosen from decode_cum()'s value.
  void consume(uint32_t cum, uint32_t freq);

  int32_t decode_symbol(const CdfTable& table);

  // True once the decoder has read past the available bytes beyond the
  // encoder's flush slop; indicates a truncated or corrupt chunk.
  bool overran() const { return overrun_ > 8; }
  size_t consumed() const { return pos_; }

 private:
  uint8_t read_byte();

  const uint8_t* data_;
  size_t size_;
  size_t pos_ = 0;
  int64_t overrun_ = 0;
  uint64_t code_ = 0;
  uint64_t range_ = ~0ull;
  uint64_t r_ = 0;
};

// LEB128 of the first code followed by LEB128 deltas of the ascending
// remainder. Throws InvariantError if codes are not ascending.
std::vector<uint8_t> varint_encode_deltas(const std::vector<uint64_t>& sorted_codes);
// Needs the element count up front (carried by the container header).
std::vector<uint64_t> varint_decode_deltas(const uint8_t* data, size_t size, int64_t count);

}  // namespace lcm
