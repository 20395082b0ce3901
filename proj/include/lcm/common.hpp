#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace lcm {

// Error taxonomy. The CLI maps these onto exit codes, so throw the most
// specific one that applies.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Bad user input: malformed PLY, missing file, invalid arguments.
struct InputError : Error {
  using Error::Error;
};
// Damaged or inconsistent bitstream (checksum mismatch, coder state violation).
struct CorruptStreamError : Error {
  using Error::Error;
};
// Internal contract violation (shape mismatch, non-finite activation, ...).
struct InvariantError : Error {
  using Error::Error;
};
// Training produced NaN/Inf loss.
struct DivergenceError : Error {
  using Error::Error;
};

// Round half to even, the single rounding rule used for every quantizer in
// the codec. nearbyint honours the current FP environment, which is
// round-to-nearest-even unless somebody changed it; do not rely on that.
inline float round_even(float x) {
  float r = std::nearbyint(x);
  // nearbyint follows the dynamic rounding mode; enforce ties-to-even by
  // reconstructing the tie case explicitly.
  float d = x - std::trunc(x);
  if (d == 0.5f || d == -0.5f) {
    float lo = std::floor(x), hi = std::ceil(x);
    r = (std::fmod(std::fabs(lo), 2.0f) == 0.0f) ? lo : hi;
  }
  return r;
}

inline double round_even(double x) {
  double r = std::nearbyint(x);
  double d = x - std::trunc(x);
  if (d == 0.5 || d == -0.5) {
    double lo = std::floor(x), hi = std::ceil(x);
    r = (std::fmod(std::fabs(lo), 2.0) == 0.0) ? lo : hi;
  }
  return r;
}

// Deterministic RNG. std::mt19937_64 has a pinned algorithm in the standard,
// but the distributions do not, so sampling is hand-rolled here and stays
// reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : s_(splitmix(seed)) {}

  uint64_t next_u64() {
    // xorshift64* keeps the state tiny and the stream well mixed.
    s_ ^= s_ >> 12;
    s_ ^= s_ << 25;
    s_ ^= s_ >> 27;
    return s_ * 0x2545F4914F6CDD1Dull;
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

  double normal() {
    // Marsaglia polar method; loop terminates with probability 1.
    for (;;) {
      double u = uniform(-1.0, 1.0), v = uniform(-1.0, 1.0);
      double q = u * u + v * v;
      if (q > 0.0 && q < 1.0) return u * std::sqrt(-2.0 * std::log(q) / q);
    }
  }

  // Derive an independent stream, e.g. one per scene or per tensor.
  Rng fork(uint64_t salt) { return Rng(splitmix(s_ ^ (salt * 0x9E3779B97F4A7C15ull))); }

 private:
  static uint64_t splitmix(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  }
  uint64_t s_;
};

// CRC-32 (IEEE 802.3 polynomial, reflected), used by the weight file and the
// container section table.
uint32_t crc32(const uint8_t* data, size_t n, uint32_t seed = 0);
inline uint32_t crc32(const std::vector<uint8_t>& v, uint32_t seed = 0) {
  return crc32(v.data(), v.size(), seed);
}

// FNV-1a 64-bit, for hashing probability streams in tests and diagnostics.
struct Fnv1a {
  uint64_t h = 0xcbf29ce484222325ull;
  void update(const void* data, size_t n) {
    const uint8_t* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ull;
    }
  }
  template <typename T>
  void update_pod(const T& v) {
    update(&v, sizeof(T));
  }
};

// Run fn(i) for i in [0, n) on up to `threads` workers. Results must not
// depend on scheduling; callers index into preallocated slots.
void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn);

// Thread count resolution: explicit argument > LCM_THREADS env > hardware.
int resolve_threads(int requested);

}  // namespace lcm
