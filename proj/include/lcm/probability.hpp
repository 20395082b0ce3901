#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "lcm/common.hpp"
#include "lcm/layers.hpp"

namespace lcm {

// Probability precision of the entropy coder: all coded distributions are
// integer tables summing to exactly 1 << 16 with every slot >= 1.
constexpr uint32_t kProbBits = 16;
constexpr uint32_t kProbTotal = 1u << kProbBits;

constexpr int kMixtureK = 3;        // logistic mixture component count
constexpr double kSigmaMin = 0.11;  // floor for the discretized-gaussian scale
constexpr double kScaleMin = 1e-6;  // floor for logistic component scales

// Parameters of one K-component logistic mixture over a value-domain grid
// with spacing `bin` (mu, s in value units).
struct LogisticMixtureParams {
  std::array<float, kMixtureK> logit_pi;
  std::array<float, kMixtureK> mu;
  std::array<float, kMixtureK> log_s;
};

// CDF of the mixture at value v (double precision; weights softmaxed here).
double logistic_mixture_cdf(const LogisticMixtureParams& p, double v);
// P(symbol) for value grid x = symbol * bin, integrating the open-tailed
// density over [x - bin/2, x + bin/2].
double logistic_mixture_pmf(const LogisticMixtureParams& p, int32_t symbol, double bin);

// Discretized gaussian on a value grid with spacing `bin`:
// P(k) = Phi((k*bin + bin/2 - mu)/s) - Phi((k*bin - bin/2 - mu)/s), with s
// floored at kSigmaMin.
double discretized_gaussian_pmf(double mu, double sigma, int32_t symbol, double bin = 1.0);
double gaussian_cdf(double mu, double sigma, double v);

// Non-parametric factorized density (monotone CDF built from 4 softplus
// layers of hidden width 3 with tanh gates, sigmoid on the output). One
// parameter set per channel; used for the hyper latents.
struct FactorizedChannel {
  // layer k: weights hk, bias bk, gate ak (gate absent on the last layer)
  std::array<double, 3> h0, b0, a0;
  std::array<double, 9> h1, h2;
  std::array<double, 3> b1, a1, b2, a2;
  std::array<double, 3> h3;
  double b3;

  double logit_cdf(double x) const;  // pre-sigmoid CDF value
  double cdf(double x) const;
  double pmf(int32_t symbol) const;  // stable c(x+1/2) - c(x-1/2)
};

// Extracts per-channel factorized parameters from weight tensors named
// prefix.h0/.b0/.a0/.h1/... (see the weight registry).
std::vector<FactorizedChannel> factorized_channels(const WeightMap<float>& wm, const std::string& prefix,
                                                   int channels);

// Integer probability table. counts[i] >= 1, sum == kProbTotal; cum has
// counts.size() + 1 entries with cum.front() == 0, cum.back() == kProbTotal.
struct CdfTable {
  std::vector<uint32_t> counts;
  std::vector<uint32_t> cum;

  size_t size() const { return counts.size(); }
};

// Quantize a PMF (any nonnegative vector with positive sum) to a CdfTable by
// largest-remainder rounding with a floor of 1 count per slot. Throws if the
// support exceeds kProbTotal slots or the mass is not positive and finite.
CdfTable build_cdf_table(const std::vector<double>& pmf);

// Uniform table over `width` slots.
CdfTable uniform_cdf_table(uint32_t width);

// Ideal codelength of `slots` under the quantized table: sum of
// -log2(count / kProbTotal). This is exactly what the range coder targets.
double rate_bits(const CdfTable& table, const std::vector<int32_t>& slots);
inline double slot_bits(const CdfTable& table, int32_t slot) {
  return -std::log2(double(table.counts[size_t(slot)]) / double(kProbTotal));
}

}  // namespace lcm
