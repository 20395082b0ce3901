#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lcm {

struct SelfTestResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Built-in invariant suite on toy-sized data (runs in seconds). Includes a
// negative control that injects a single-count fault into a probability
// table and passes only if the corruption is detected, so a vacuous suite
// cannot report green. `seed` varies the randomized probes.
//
// `inject_fault` is a debug switch that deliberately corrupts one CDF count
// inside the coder roundtrip check; the suite must then report that named
// check as failed.
std::vector<SelfTestResult> run_selftest(uint64_t seed, int threads, bool inject_fault = false);

inline bool all_passed(const std::vector<SelfTestResult>& r) {
  for (const auto& x : r)
    if (!x.pass) return false;
  return true;
}

}  // namespace lcm
