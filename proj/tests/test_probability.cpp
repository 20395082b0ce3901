#include <cmath>
#include <vector>

#include "doctest.h"
#include "lcm/arch.hpp"
#include "lcm/probability.hpp"

using namespace lcm;

namespace {

LogisticMixtureParams single_logistic(float mu, float log_s) {
  LogisticMixtureParams p;
  p.logit_pi = {0.f, -700.f, -700.f};
  p.mu = {mu, 0.f, 0.f};
  p.log_s = {log_s, 0.f, 0.f};
  return p;
}

}  // namespace

TEST_CASE("single logistic pmf at the mode") {
  // sigma(0.5) - sigma(-0.5) = tanh(0.25)
  const double got = logistic_mixture_pmf(single_logistic(0.f, 0.f), 0, 1.0);
  CHECK(got == doctest::Approx(0.2449187).epsilon(0).scale(1).epsilon(1e-6));
  CHECK(got == doctest::Approx(std::tanh(0.25)).epsilon(1e-9));
}

TEST_CASE("logistic mixture pmf sums to one and matches cdf differences") {
  LogisticMixtureParams p;
  p.logit_pi = {0.3f, -0.4f, 1.1f};
  p.mu = {-2.0f, 0.5f, 3.0f};
  p.log_s = {0.0f, -0.7f, 0.4f};

  double sum = 0;
  for (int32_t s = -200; s <= 200; ++s) sum += logistic_mixture_pmf(p, s, 0.25);
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));

  for (int32_t s : {-3, 0, 1, 7}) {
    double direct = logistic_mixture_pmf(p, s, 0.5);
    double via_cdf = logistic_mixture_cdf(p, s * 0.5 + 0.25) - logistic_mixture_cdf(p, s * 0.5 - 0.25);
    CHECK(direct == doctest::Approx(via_cdf).epsilon(1e-12));
  }

  // cdf monotone with the right limits
  double prev = 0.0;
  for (double v = -50; v <= 50; v += 0.5) {
    double c = logistic_mixture_cdf(p, v);
    CHECK(c >= prev);
    prev = c;
  }
  CHECK(logistic_mixture_cdf(p, -1e6) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(logistic_mixture_cdf(p, 1e6) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("logistic scale floor keeps tiny scales usable") {
  // log_s = -100 floors at kScaleMin; nearly all mass lands in the mode bin
  const double got = logistic_mixture_pmf(single_logistic(0.f, -100.f), 0, 1.0);
  CHECK(got == doctest::Approx(1.0).epsilon(1e-9));
  const double off = logistic_mixture_pmf(single_logistic(0.f, -100.f), 3, 1.0);
  CHECK(off >= 0.0);
  CHECK(off < 1e-12);
}

TEST_CASE("discretized gaussian center mass equals 2*Phi(0.5)-1") {
  const double oracle = std::erf(0.5 / std::sqrt(2.0));  // 2*Phi(0.5) - 1
  CHECK(discretized_gaussian_pmf(0.0, 1.0, 0, 1.0) == doctest::Approx(oracle).epsilon(1e-9));
  CHECK(discretized_gaussian_pmf(0.0, 1.0, 0, 1.0) == doctest::Approx(0.3829249).epsilon(1e-6));

  // symmetric around the mean; sums to ~1
  CHECK(discretized_gaussian_pmf(0.0, 2.0, 5, 1.0) ==
        doctest::Approx(discretized_gaussian_pmf(0.0, 2.0, -5, 1.0)).epsilon(1e-12));
  double sum = 0;
  for (int32_t s = -60; s <= 60; ++s) sum += discretized_gaussian_pmf(1.3, 3.0, s, 1.0);
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("gaussian sigma floor") {
  // sigma below the floor behaves exactly like the floor
  CHECK(discretized_gaussian_pmf(0.2, 1e-9, 0, 1.0) ==
        doctest::Approx(discretized_gaussian_pmf(0.2, kSigmaMin, 0, 1.0)).epsilon(1e-12));
  // a far-off symbol keeps nonzero mass after table quantization
  std::vector<double> pmf;
  for (int32_t s = -30; s <= 30; ++s) pmf.push_back(discretized_gaussian_pmf(0.0, 1e-6, s, 1.0));
  CdfTable t = build_cdf_table(pmf);
  for (uint32_t c : t.counts) CHECK(c >= 1);
}

TEST_CASE("freshly initialized factorized density is a broad unimodal prior") {
  WeightMap<float> wm = init_weights(arch_config(kArchToy), 7);
  const std::vector<FactorizedChannel> fc = factorized_channels(wm, "geom.fz", 8);
  REQUIRE(int(fc.size()) == 8);
  const int B = 200;  // fresh init concentrates well inside this span
  for (const FactorizedChannel& ch : fc) {
    double sum = 0, peak = -1;
    int peak_at = -9999;
    std::vector<double> pmf;
    for (int32_t s = -B; s <= B; ++s) {
      double p = ch.pmf(s);
      CHECK(p >= 0.0);
      // the stable pmf path must agree with raw cdf differencing
      CHECK(std::abs(p - (ch.cdf(s + 0.5) - ch.cdf(s - 0.5))) <= 1e-10);
      sum += p;
      pmf.push_back(p);
      if (p > peak) {
        peak = p;
        peak_at = s;
      }
    }
    CHECK(sum >= 0.999);
    CHECK(std::abs(peak_at) <= 24);
    // non-increasing away from the peak
    for (size_t i = size_t(peak_at + B); i + 1 < pmf.size(); ++i) CHECK(pmf[i + 1] <= pmf[i] * (1 + 1e-9));
    for (size_t i = size_t(peak_at + B); i > 0; --i) CHECK(pmf[i - 1] <= pmf[i] * (1 + 1e-9));
    // CDF monotone and bounded
    double prev = ch.cdf(-40.0);
    for (double x = -39.5; x <= 40.0; x += 0.5) {
      double c = ch.cdf(x);
      CHECK(c >= prev);
      prev = c;
    }
    CHECK(ch.cdf(-1e4) < 1e-6);
    CHECK(ch.cdf(1e4) > 1.0 - 1e-6);
  }
}

TEST_CASE("cdf table invariants under fuzz") {
  Rng rng(77);
  for (int rep = 0; rep < 200; ++rep) {
    int width = 1 + int(rng.below(3000));
    std::vector<double> pmf(static_cast<size_t>(width));
    for (auto& p : pmf) p = rng.uniform() < 0.3 ? 0.0 : rng.uniform();
    pmf[rng.below(uint64_t(width))] = 1.0;  // guarantee positive mass
    CdfTable t = build_cdf_table(pmf);
    REQUIRE(t.counts.size() == size_t(width));
    REQUIRE(t.cum.size() == size_t(width) + 1);
    CHECK(t.cum.front() == 0);
    CHECK(t.cum.back() == kProbTotal);
    uint64_t sum = 0;
    for (size_t i = 0; i < t.counts.size(); ++i) {
      CHECK(t.counts[i] >= 1);
      CHECK(t.cum[i + 1] == t.cum[i] + t.counts[i]);
      sum += t.counts[i];
    }
    CHECK(sum == kProbTotal);
  }
}

TEST_CASE("cdf table rejects bad input") {
  CHECK_THROWS_AS(build_cdf_table({}), Error);
  CHECK_THROWS_AS(build_cdf_table({0.0, 0.0}), Error);
  CHECK_THROWS_AS(build_cdf_table({-1.0, 2.0}), Error);
  CHECK_THROWS_AS(build_cdf_table({std::nan(""), 1.0}), Error);
  CHECK_THROWS_AS(build_cdf_table(std::vector<double>(size_t(kProbTotal) + 1, 1.0)), Error);
}

TEST_CASE("cdf quantization stays close to the true entropy on smooth pmfs") {
  for (double sigma : {2.0, 8.0, 40.0}) {
    int half = std::max(128, int(sigma * 8));
    std::vector<double> pmf;
    for (int s = -half; s <= half; ++s) pmf.push_back(discretized_gaussian_pmf(0.4, sigma, s, 1.0));
    REQUIRE(int(pmf.size()) >= 256);
    CdfTable t = build_cdf_table(pmf);
    double mass = 0;
    for (double p : pmf) mass += p;
    double entropy = 0, cross = 0;
    for (size_t i = 0; i < pmf.size(); ++i) {
      double p = pmf[i] / mass;
      if (p <= 0) continue;
      entropy -= p * std::log2(p);
      cross -= p * std::log2(double(t.counts[i]) / double(kProbTotal));
    }
    CHECK(cross >= entropy - 1e-9);       // quantization never beats the source
    CHECK(cross - entropy <= 0.01);       // and wastes under 0.01 bits/symbol
  }
}

TEST_CASE("uniform table splits counts evenly") {
  for (uint32_t w : {1u, 2u, 3u, 255u, 65536u}) {
    CdfTable t = uniform_cdf_table(w);
    REQUIRE(t.counts.size() == w);
    uint64_t sum = 0;
    uint32_t lo = kProbTotal, hi = 0;
    for (uint32_t c : t.counts) {
      sum += c;
      lo = std::min(lo, c);
      hi = std::max(hi, c);
    }
    CHECK(sum == kProbTotal);
    CHECK(hi - lo <= 1);
  }
}

TEST_CASE("rate_bits matches the floor arithmetic") {
  // one certain symbol, 255 floored slots: each event costs
  // log2(65536 / 65281) bits
  std::vector<double> pmf(256, 0.0);
  pmf[0] = 1.0;
  CdfTable t = build_cdf_table(pmf);
  CHECK(t.counts[0] == kProbTotal - 255);
  std::vector<int32_t> syms(1000, 0);
  const double expect = 1000.0 * std::log2(65536.0 / 65281.0);
  CHECK(rate_bits(t, syms) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(slot_bits(t, 0) == doctest::Approx(expect / 1000.0).epsilon(1e-12));
  CHECK(slot_bits(t, 5) == doctest::Approx(16.0).epsilon(1e-12));  // floored slot
}
