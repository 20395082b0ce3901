#include "lcm/coder.hpp"

#include <algorithm>

#include "lcm/common.hpp"

namespace lcm {
namespace {

// Renormalize while range < 2^48; with 16-bit totals the scaled range keeps
// at least 32 bits of headroom per symbol.
constexpr uint64_t kTopValue = 1ull << 48;

}  // namespace

void RangeEncoder::shift_low() {
  const uint64_t lo = uint64_t(low_);
  const uint32_t carry = uint32_t(low_ >> 64);
  if (lo < 0xFF00000000000000ull || carry != 0) {
    uint8_t byte = cache_;
    do {
      bytes_.push_back(uint8_t(byte + carry));
      byte = 0xFF;
    } while (--cache_size_ != 0);
    cache_ = uint8_t(lo >> 56);
  }
  ++cache_size_;
  low_ = (unsigned __int128)(lo << 8);
}

void RangeEncoder::encode(uint32_t cum, uint32_t freq) {
  if (finished_) throw InvariantError("range encoder reused after finish");
  if (freq == 0 || cum + freq > kProbTotal)
    throw InvariantError("range encoder slot outside probability total");
  const uint64_t r = range_ >> kProbBits;
  low_ += (unsigned __int128)r * cum;
  range_ = r * freq;
  while (range_ < kTopValue) {
    shift_low();
    range_ <<= 8;
  }
}

std::vector<uint8_t> RangeEncoder::finish() {
  if (finished_) throw InvariantError("range encoder reused after finish");
  finished_ = true;
  for (int i = 0; i < 9; ++i) shift_low();
  return std::move(bytes_);
}

RangeDecoder::RangeDecoder(const uint8_t* data, size_t size) : data_(data), size_(size) {
  // Nine init bytes: the leading flush byte falls off the 64-bit window.
  for (int i = 0; i < 9; ++i) code_ = (code_ << 8) | read_byte();
}

uint8_t RangeDecoder::read_byte() {
  if (pos_ < size_) return data_[pos_++];
  ++overrun_;
  if (overrun_ > 8) throw CorruptStreamError("coded chunk truncated");
  return 0;
}

uint32_t RangeDecoder::decode_cum() {
  r_ = range_ >> kProbBits;
  const uint64_t dv = code_ / r_;
  return uint32_t(std::min<uint64_t>(dv, kProbTotal - 1));
}

void RangeDecoder::consume(uint32_t cum, uint32_t freq) {
  code_ -= uint64_t(cum) * r_;
  range_ = r_ * freq;
  if (code_ >= range_) throw CorruptStreamError("coded chunk state out of range");
  while (range_ < kTopValue) {
    code_ = (code_ << 8) | read_byte();
    range_ <<= 8;
  }
}

int32_t RangeDecoder::decode_symbol(const CdfTable& table) {
  const uint32_t dv = decode_cum();
  // cum is ascending with cum.front()==0 and cum.back()==kProbTotal; pick the
  // slot whose [cum[i], cum[i+1]) interval holds dv.
  auto it = std::upper_bound(table.cum.begin(), table.cum.end(), dv);
  const int32_t slot = int32_t(it - table.cum.begin()) - 1;
  if (slot < 0 || size_t(slot) >= table.counts.size())
    throw CorruptStreamError("decoded value outside table support");
  consume(table.cum[size_t(slot)], table.counts[size_t(slot)]);
  return slot;
}

std::vector<uint8_t> varint_encode_deltas(const std::vector<uint64_t>& sorted_codes) {
  std::vector<uint8_t> out;
  out.reserve(sorted_codes.size() * 3 + 8);
  uint64_t prev = 0;
  for (size_t i = 0; i < sorted_codes.size(); ++i) {
    const uint64_t code = sorted_codes[i];
    if (i > 0 && code < prev) throw InvariantError("position codes not ascending");
    uint64_t delta = code - (i > 0 ? prev : 0);
    prev = code;
    while (delta >= 0x80) {
      out.push_back(uint8_t(delta) | 0x80);
      delta >>= 7;
    }
    out.push_back(uint8_t(delta));
  }
  return out;
}

std::vector<uint64_t> varint_decode_deltas(const uint8_t* data, size_t size, int64_t count) {
  if (count < 0) throw InputError("negative element count");
  std::vector<uint64_t> out;
  out.reserve(size_t(count));
  size_t pos = 0;
  uint64_t prev = 0;
  for (int64_t i = 0; i < count; ++i) {
    uint64_t value = 0;
    int shift = 0;
    while (true) {
      if (pos >= size) throw CorruptStreamError("position stream truncated");
      const uint8_t byte = data[pos++];
      if (shift == 63 && (byte & 0x7E) != 0)
        throw CorruptStreamError("position delta exceeds 64 bits");
      value |= uint64_t(byte & 0x7F) << shift;
      if ((byte & 0x80) == 0) break;
      shift += 7;
      if (shift > 63) throw CorruptStreamError("position delta exceeds 64 bits");
    }
    const uint64_t code = (i == 0) ? value : prev + value;
    if (i > 0 && code < prev) throw CorruptStreamError("position delta overflows");
    out.push_back(code);
    prev = code;
  }
  if (pos != size) throw CorruptStreamError("position stream has trailing bytes");
  return out;
}

}  // namespace lcm
