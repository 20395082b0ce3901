#include "lcm/probability.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace lcm {

namespace {
double sigmoid_d(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_d(double x) {
  if (x > 30) return x;
  if (x < -30) return std::exp(x);
  return std::log1p(std::exp(x));
}

// sigmoid(b) - sigmoid(a) for a <= b, stable in both tails: reflect so the
// difference is evaluated on the side where sigmoid is small.
double sigmoid_diff(double a, double b) {
  double sign = (a + b > 0) ? -1.0 : 1.0;
  double d = std::fabs(sigmoid_d(sign * b) - sigmoid_d(sign * a));
  return d;
}
}  // namespace

double logistic_mixture_cdf(const LogisticMixtureParams& p, double v) {
  // Softmax of mixture logits in double.
  double mx = p.logit_pi[0];
  for (int k = 1; k < kMixtureK; ++k) mx = std::max(mx, double(p.logit_pi[k]));
  double z = 0, w[kMixtureK];
  for (int k = 0; k < kMixtureK; ++k) {
    w[k] = std::exp(double(p.logit_pi[k]) - mx);
    z += w[k];
  }
  double acc = 0;
  for (int k = 0; k < kMixtureK; ++k) {
    double s = std::max(std::exp(double(p.log_s[k])), kScaleMin);
    acc += (w[k] / z) * sigmoid_d((v - double(p.mu[k])) / s);
  }
  return acc;
}

double logistic_mixture_pmf(const LogisticMixtureParams& p, int32_t symbol, double bin) {
  if (!(bin > 0)) throw InvariantError("logistic_mixture_pmf: bin must be positive");
  double mx = p.logit_pi[0];
  for (int k = 1; k < kMixtureK; ++k) mx = std::max(mx, double(p.logit_pi[k]));
  double z = 0, w[kMixtureK];
  for (int k = 0; k < kMixtureK; ++k) {
    w[k] = std::exp(double(p.logit_pi[k]) - mx);
    z += w[k];
  }
  double x = double(symbol) * bin;
  double acc = 0;
  for (int k = 0; k < kMixtureK; ++k) {
    double s = std::max(std::exp(double(p.log_s[k])), kScaleMin);
    double a = (x - bin * 0.5 - double(p.mu[k])) / s;
    double b = (x + bin * 0.5 - double(p.mu[k])) / s;
    acc += (w[k] / z) * sigmoid_diff(a, b);
  }
  return acc;
}

double gaussian_cdf(double mu, double sigma, double v) {
  double s = std::max(sigma, kSigmaMin);
  return 0.5 * std::erfc(-(v - mu) / (s * std::sqrt(2.0)));
}

double discretized_gaussian_pmf(double mu, double sigma, int32_t symbol, double bin) {
  if (!(bin > 0)) throw InvariantError("discretized_gaussian_pmf: bin must be positive");
  double s = std::max(sigma, kSigmaMin);
  double x = double(symbol) * bin;
  // Difference of normal CDFs via erfc on the favourable side for stability.
  double a = (x - bin * 0.5 - mu) / (s * std::sqrt(2.0));
  double b = (x + bin * 0.5 - mu) / (s * std::sqrt(2.0));
  double pa, pb;
  if (a + b > 0) {
    pa = 0.5 * std::erfc(a);
    pb = 0.5 * std::erfc(b);
    return pa - pb;
  }
  pa = 0.5 * std::erfc(-a);
  pb = 0.5 * std::erfc(-b);
  return pb - pa;
}

double FactorizedChannel::logit_cdf(double x) const {
  double v[3], u[3];
  // layer 0: 1 -> 3
  for (int i = 0; i < 3; ++i) {
    double t = softplus_d(h0[size_t(i)]) * x + b0[size_t(i)];
    v[i] = t + std::tanh(a0[size_t(i)]) * std::tanh(t);
  }
  // layer 1: 3 -> 3
  for (int i = 0; i < 3; ++i) {
    double t = b1[size_t(i)];
    for (int j = 0; j < 3; ++j) t += softplus_d(h1[size_t(i * 3 + j)]) * v[j];
    u[i] = t + std::tanh(a1[size_t(i)]) * std::tanh(t);
  }
  // layer 2: 3 -> 3
  for (int i = 0; i < 3; ++i) {
    double t = b2[size_t(i)];
    for (int j = 0; j < 3; ++j) t += softplus_d(h2[size_t(i * 3 + j)]) * u[j];
    v[i] = t + std::tanh(a2[size_t(i)]) * std::tanh(t);
  }
  // layer 3: 3 -> 1, no gate
  double t = b3;
  for (int j = 0; j < 3; ++j) t += softplus_d(h3[size_t(j)]) * v[j];
  return t;
}

double FactorizedChannel::cdf(double x) const { return sigmoid_d(logit_cdf(x)); }

double FactorizedChannel::pmf(int32_t symbol) const {
  double la = logit_cdf(double(symbol) - 0.5);
  double lb = logit_cdf(double(symbol) + 0.5);
  return sigmoid_diff(la, lb);
}

std::vector<FactorizedChannel> factorized_channels(const WeightMap<float>& wm, const std::string& prefix,
                                                   int channels) {
  auto row = [&](const std::string& name, int c, int width, double* out) {
    const Tensor& t = wm.get(name);
    if (t.rows() != channels || t.cols() != width)
      throw InvariantError("factorized_channels: bad shape for " + name);
    for (int j = 0; j < width; ++j) out[j] = double(t.at(c, j));
  };
  std::vector<FactorizedChannel> out(static_cast<size_t>(channels));
  for (int c = 0; c < channels; ++c) {
    FactorizedChannel& f = out[size_t(c)];
    row(prefix + ".h0", c, 3, f.h0.data());
    row(prefix + ".b0", c, 3, f.b0.data());
    row(prefix + ".a0", c, 3, f.a0.data());
    row(prefix + ".h1", c, 9, f.h1.data());
    row(prefix + ".b1", c, 3, f.b1.data());
    row(prefix + ".a1", c, 3, f.a1.data());
    row(prefix + ".h2", c, 9, f.h2.data());
    row(prefix + ".b2", c, 3, f.b2.data());
    row(prefix + ".a2", c, 3, f.a2.data());
    row(prefix + ".h3", c, 3, f.h3.data());
    double b3v;
    row(prefix + ".b3", c, 1, &b3v);
    f.b3 = b3v;
  }
  return out;
}

CdfTable build_cdf_table(const std::vector<double>& pmf) {
  size_t n = pmf.size();
  if (n == 0) throw InvariantError("build_cdf_table: empty pmf");
  if (n > size_t(kProbTotal)) throw InvariantError("build_cdf_table: support too large (" + std::to_string(n) + ")");
  double total = 0;
  for (double p : pmf) {
    if (!(p >= 0) || !std::isfinite(p)) throw InvariantError("build_cdf_table: pmf has negative or non-finite mass");
    total += p;
  }
  if (!(total > 0)) throw InvariantError("build_cdf_table: zero total mass");

  CdfTable t;
  t.counts.assign(n, 0);
  std::vector<std::pair<double, size_t>> frac(n);
  uint64_t assigned = 0;
  for (size_t i = 0; i < n; ++i) {
    double scaled = pmf[i] / total * double(kProbTotal);
    double fl = std::floor(scaled);
    t.counts[i] = uint32_t(fl);
    assigned += uint64_t(fl);
    frac[i] = {scaled - fl, i};
  }
  // Distribute the remainder to the largest fractional parts; ties resolve
  // toward the smaller index so both coder sides agree.
  int64_t deficit = int64_t(kProbTotal) - int64_t(assigned);
  std::sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (int64_t d = 0; d < deficit && d < int64_t(n); ++d) t.counts[frac[size_t(d)].second] += 1;
  // floor(scaled) can overshoot only via the remainder loop; deficit > n is
  // impossible since sum(frac) < n. Now enforce the >= 1 floor.
  for (size_t i = 0; i < n; ++i) {
    if (t.counts[i] > 0) continue;
    // Steal one count from the currently largest slot (> 1).
    size_t donor = 0;
    uint32_t best = 0;
    for (size_t j = 0; j < n; ++j)
      if (t.counts[j] > best) {
        best = t.counts[j];
        donor = j;
      }
    if (best <= 1) throw InvariantError("build_cdf_table: cannot satisfy count floor");
    t.counts[donor] -= 1;
    t.counts[i] = 1;
  }
  t.cum.assign(n + 1, 0);
  for (size_t i = 0; i < n; ++i) t.cum[i + 1] = t.cum[i] + t.counts[i];
  if (t.cum[n] != kProbTotal) throw InvariantError("build_cdf_table: counts do not sum to total");
  return t;
}

CdfTable uniform_cdf_table(uint32_t width) {
  if (width == 0) throw InvariantError("uniform_cdf_table: zero width");
  return build_cdf_table(std::vector<double>(size_t(width), 1.0));
}

double rate_bits(const CdfTable& table, const std::vector<int32_t>& slots) {
  double bits = 0;
  for (int32_t s : slots) {
    if (s < 0 || size_t(s) >= table.size()) throw InvariantError("rate_bits: slot out of range");
    bits += slot_bits(table, s);
  }
  return bits;
}

}  // namespace lcm
