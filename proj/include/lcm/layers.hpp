#pragma once

// Network building blocks composed from graph ops. Every builder works for
// float (codec, training) and double (finite-difference validation) and is
// shared verbatim between encode and decode, which is what makes entropy
// model predictions bit-identical on both sides.

#include <algorithm>
#include <map>
#include <string>

#include "lcm/graph.hpp"

namespace lcm {

// Named parameter storage. Gradients live beside values and are accumulated
// across windows; std::map nodes give stable addresses for Graph::param.
template <typename S>
struct WeightMap {
  std::map<std::string, TensorT<S>> tensors;
  std::map<std::string, TensorT<S>> grads;
  bool training = false;

  const TensorT<S>& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw InvariantError("missing weight tensor: " + name);
    return it->second;
  }

  TensorT<S>& grad_slot(const std::string& name) {
    auto it = grads.find(name);
    if (it != grads.end()) return it->second;
    const TensorT<S>& v = get(name);
    return grads.emplace(name, TensorT<S>::shaped(v.rank, v.dim[0], v.dim[1], v.dim[2])).first->second;
  }

  void zero_grads() {
    for (auto& [k, g] : grads) std::fill(g.v.begin(), g.v.end(), S(0));
  }

  template <typename T>
  WeightMap<T> cast() const {
    WeightMap<T> o;
    for (const auto& [k, t] : tensors) o.tensors.emplace(k, t.template cast<T>());
    o.training = training;
    return o;
  }
};

template <typename S>
typename Graph<S>::Id wparam(Graph<S>& g, WeightMap<S>& wm, const std::string& name) {
  const TensorT<S>* v = &wm.get(name);
  TensorT<S>* gr = wm.training ? &wm.grad_slot(name) : nullptr;
  return g.param(v, gr);
}

// y = x @ W + b. W is (in x out); b rank-1 [out].
template <typename S>
typename Graph<S>::Id linear(Graph<S>& g, typename Graph<S>::Id x, WeightMap<S>& wm, const std::string& prefix) {
  auto W = wparam(g, wm, prefix + ".w");
  auto b = wparam(g, wm, prefix + ".b");
  return g.add_rowvec(g.matmul(x, W), b);
}

// Two-layer MLP with ReLU: prefix.l0, prefix.l1.
template <typename S>
typename Graph<S>::Id mlp2(Graph<S>& g, typename Graph<S>::Id x, WeightMap<S>& wm, const std::string& prefix) {
  auto h = g.relu(linear(g, x, wm, prefix + ".l0"));
  return linear(g, h, wm, prefix + ".l1");
}

template <typename S>
typename Graph<S>::Id layer_norm_w(Graph<S>& g, typename Graph<S>::Id x, WeightMap<S>& wm, const std::string& prefix) {
  return g.layer_norm(x, wparam(g, wm, prefix + ".g"), wparam(g, wm, prefix + ".b"));
}

// Optional capture of attention probabilities for tests.
template <typename S>
struct AttnProbe {
  std::vector<TensorT<S>> head_probs;  // one (n x n) matrix per head
};

// Multi-head softmax self-attention over one window. `tokens` already carry
// any normalization; `pe` is added before the q/k/v projections. The output
// is the Wo-projected head concat WITHOUT the residual; callers add it to
// whatever their residual stream is.
//
// `mask_add` (optional, (n x n) constant of 0 / -inf) is added to the score
// matrix of every head; row i must keep at least one finite entry.
template <typename S>
typename Graph<S>::Id attention_core(Graph<S>& g, typename Graph<S>::Id tokens, typename Graph<S>::Id pe,
                                     WeightMap<S>& wm, const std::string& prefix, int heads,
                                     typename Graph<S>::Id mask_add = -1, AttnProbe<S>* probe = nullptr) {
  auto h = (pe >= 0) ? g.add(tokens, pe) : tokens;
  auto q = linear(g, h, wm, prefix + ".q");
  auto k = linear(g, h, wm, prefix + ".k");
  auto v = linear(g, h, wm, prefix + ".v");
  int C = g.val(q).cols();
  if (C % heads != 0) throw InvariantError("attention: C % heads != 0");
  int dh = C / heads;
  typename Graph<S>::Id cat = -1;
  for (int hd = 0; hd < heads; ++hd) {
    auto qi = g.slice_cols(q, hd * dh, dh);
    auto ki = g.slice_cols(k, hd * dh, dh);
    auto vi = g.slice_cols(v, hd * dh, dh);
    auto scores = g.scale(g.matmul_nt(qi, ki), S(1) / std::sqrt(S(dh)));
    auto p = g.softmax_rows(scores, mask_add);
    if (probe) probe->head_probs.push_back(g.val(p));
    auto oi = g.matmul(p, vi);
    cat = (cat < 0) ? oi : g.concat_cols(cat, oi);
  }
  return linear(g, cat, wm, prefix + ".o");
}

// Attention layer with residual: out = tokens + Wo(heads(tokens + pe)).
template <typename S>
typename Graph<S>::Id self_attention(Graph<S>& g, typename Graph<S>::Id tokens, typename Graph<S>::Id pe,
                                     WeightMap<S>& wm, const std::string& prefix, int heads,
                                     typename Graph<S>::Id mask_add = -1, AttnProbe<S>* probe = nullptr) {
  return g.add(tokens, attention_core(g, tokens, pe, wm, prefix, heads, mask_add, probe));
}

// Pre-norm transformer block:
//   a = x + Attn(LN1(x) + pe)
//   y = a + FFN(LN2(a))
// When `attention_backbone` is false the attention core is replaced by a
// per-token MLP (same residual wiring), which removes all cross-token flow.
template <typename S>
typename Graph<S>::Id attention_block(Graph<S>& g, typename Graph<S>::Id x, typename Graph<S>::Id pe,
                                      WeightMap<S>& wm, const std::string& prefix, int heads,
                                      bool attention_backbone = true, typename Graph<S>::Id mask_add = -1,
                                      AttnProbe<S>* probe = nullptr) {
  auto n1 = layer_norm_w(g, x, wm, prefix + ".ln1");
  typename Graph<S>::Id core;
  if (attention_backbone) {
    core = attention_core(g, n1, pe, wm, prefix + ".attn", heads, mask_add, probe);
  } else {
    auto inp = (pe >= 0) ? g.add(n1, pe) : n1;
    core = mlp2(g, inp, wm, prefix + ".mix");
  }
  auto a = g.add(x, core);
  auto n2 = layer_norm_w(g, a, wm, prefix + ".ln2");
  auto f = mlp2(g, n2, wm, prefix + ".ffn");
  auto y = g.add(a, f);
  g.check_finite(y, prefix.c_str());
  return y;
}

// Exact k-nearest-neighbours in feature space, squared Euclidean metric.
// Ties break toward the smaller index; a point is never its own neighbour
// except for n == 1, where the only edge is the self-edge. k is clamped to
// n - 1.
inline std::vector<int> knn_feature_space(const float* feats, int n, int f, int k) {
  if (n <= 0) throw InvariantError("knn: empty point set");
  if (n == 1) return {0};
  int keff = std::max(1, std::min(k, n - 1));
  std::vector<int> out(size_t(n) * size_t(keff));
  std::vector<std::pair<float, int>> cand(static_cast<size_t>(n - 1));
  for (int i = 0; i < n; ++i) {
    size_t c = 0;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      float d = 0;
      const float* a = feats + size_t(i) * f;
      const float* b = feats + size_t(j) * f;
      for (int t = 0; t < f; ++t) {
        float diff = a[t] - b[t];
        d += diff * diff;
      }
      cand[c++] = {d, j};
    }
    std::partial_sort(cand.begin(), cand.begin() + keff, cand.end());
    for (int t = 0; t < keff; ++t) out[size_t(i) * keff + t] = cand[size_t(t)].second;
  }
  return out;
}

template <typename S>
std::vector<int> knn_of_node(Graph<S>& g, typename Graph<S>::Id feats, int k) {
  const TensorT<S>& F = g.val(feats);
  TensorT<float> ff = F.template cast<float>();
  return knn_feature_space(ff.v.data(), F.rows(), F.cols(), k);
}

// Graph-convolution positional encoding. Three edge-conv layers; the
// neighbour graph is recomputed in feature space before each layer. Edge
// feature for (i, j) is [f_i, f_i - f_j]; per-edge MLP then channel-wise max
// over the K neighbours. A global max-pool is concatenated before the final
// projection to `out_width`.
//
// The first layer consumes raw (normalized) positions, so the encoding is
// deliberately not translation-invariant.
template <typename S>
typename Graph<S>::Id dgcnn_positional_encoding(Graph<S>& g, typename Graph<S>::Id pos_norm, WeightMap<S>& wm,
                                                const std::string& prefix, int k) {
  int n = g.val(pos_norm).rows();
  auto f = pos_norm;
  for (int layer = 0; layer < 3; ++layer) {
    std::vector<int> nbr = knn_of_node(g, f, k);
    int keff = int(nbr.size()) / n;
    std::vector<int> centers(size_t(n) * size_t(keff));
    for (int i = 0; i < n; ++i)
      for (int t = 0; t < keff; ++t) centers[size_t(i) * keff + t] = i;
    auto fc = g.gather_rows(f, centers);
    auto fn = g.gather_rows(f, nbr);
    auto e = g.concat_cols(fc, g.sub(fc, fn));
    auto h = g.relu(linear(g, e, wm, prefix + ".edge" + std::to_string(layer)));
    f = g.group_rowmax(h, keff);
  }
  auto global = g.group_rowmax(f, n);  // 1 x F
  auto global_rep = g.gather_rows(global, std::vector<int>(size_t(n), 0));
  auto cat = g.concat_cols(f, global_rep);
  auto out = linear(g, cat, wm, prefix + ".proj");
  g.check_finite(out, prefix.c_str());
  return out;
}

// Per-token positional embedding used by the MLP-backbone ablation: no
// neighbourhood aggregation, just an MLP on the normalized position.
template <typename S>
typename Graph<S>::Id mlp_positional_encoding(Graph<S>& g, typename Graph<S>::Id pos_norm, WeightMap<S>& wm,
                                              const std::string& prefix) {
  return mlp2(g, pos_norm, wm, prefix + ".pos");
}

// --- gradient checking ------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::string worst;           // "tensor[i]" of the worst element
  bool suspect_nondiff = false;  // FD estimates disagree across step sizes
};

// Compares reverse-mode gradients against central finite differences in
// double precision. `build` must construct the graph and return the id of a
// scalar loss node; it is re-invoked for every probe, so it must be
// deterministic.
//
// Relative error uses max(|ad|, |fd|, floor) as the denominator. Elements
// where two FD step sizes disagree wildly are flagged as near-nondifferentiable
// instead of failing the check.
using GradCheckBuildFn = std::function<Graph<double>::Id(Graph<double>&, WeightMap<double>&)>;

inline GradCheckReport grad_check(WeightMap<double>& wm, const GradCheckBuildFn& build,
                                  int max_probes_per_tensor = 12, double h = 1e-4, uint64_t seed = 7) {
  GradCheckReport rep;
  // Analytic pass.
  wm.training = true;
  wm.grads.clear();
  {
    Graph<double> g(true);
    auto loss = build(g, wm);
    g.backward(loss);
  }
  Rng rng(seed);
  for (auto& [name, t] : wm.tensors) {
    auto git = wm.grads.find(name);
    size_t n = t.numel();
    std::vector<size_t> probes;
    if (int(n) <= max_probes_per_tensor) {
      for (size_t i = 0; i < n; ++i) probes.push_back(i);
    } else {
      for (int i = 0; i < max_probes_per_tensor; ++i) probes.push_back(size_t(rng.below(n)));
    }
    for (size_t pi : probes) {
      double orig = t.v[pi];
      double step = h * std::max(1.0, std::fabs(orig));
      auto eval = [&](double x) {
        t.v[pi] = x;
        WeightMap<double> frozen = wm;  // keep grads out of the probe
        frozen.training = false;
        frozen.grads.clear();
        Graph<double> gg(false);
        return gg.val(build(gg, frozen)).v[0];
      };
      const double fp = eval(orig + step), fm = eval(orig - step);
      double fd = (fp - fm) / (2 * step);
      double fd2 = (eval(orig + 2 * step) - eval(orig - 2 * step)) / (4 * step);
      t.v[pi] = orig;
      double ad = (git != wm.grads.end() && git->second.numel() == n) ? git->second.v[pi] : 0.0;
      double denom = std::max({std::fabs(ad), std::fabs(fd), 1e-8});
      double rel = std::fabs(ad - fd) / denom;
      double abs_err = std::fabs(ad - fd);
      // Differences below the cancellation noise of the central difference
      // itself are unmeasurable (e.g. parameters with exactly zero true
      // gradient, like an attention key bias under softmax shift
      // invariance).
      const double fd_noise = 200.0 * 2.220446049250313e-16 * std::max({std::fabs(fp), std::fabs(fm), 1.0}) / step;
      if (abs_err <= fd_noise) continue;
      // Richardson disagreement marks kinks (ReLU boundaries, max ties).
      if (std::fabs(fd - fd2) > 1e-3 * std::max(1.0, std::fabs(fd))) {
        rep.suspect_nondiff = true;
        continue;
      }
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst = name + "[" + std::to_string(pi) + "]";
      }
      rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
    }
  }
  return rep;
}

}  // namespace lcm
