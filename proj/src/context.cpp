#include "lcm/context.hpp"

#include <cmath>

#include "lcm/gaussian.hpp"

namespace lcm {

PhasePlan make_phase_plan(const std::vector<uint8_t>& coded, const std::vector<int>& subgroups, int channels) {
  PhasePlan plan;
  plan.token_count = int(coded.size());
  std::vector<int32_t> sizes(subgroups.begin(), subgroups.end());
  plan.groups = channel_split(channels, sizes);
  int32_t rank = 0;
  for (int32_t i = 0; i < plan.token_count; ++i) {
    if (!coded[size_t(i)]) continue;
    plan.coded_tokens.push_back(i);
    if ((rank & 1) == 0)
      plan.anchors.push_back(i);
    else
      plan.nonanchors.push_back(i);
    ++rank;
  }
  return plan;
}

namespace {

template <typename S>
std::vector<int> to_int(const std::vector<int32_t>& v) {
  return std::vector<int>(v.begin(), v.end());
}

// Score mask for the space-context attention of one nonanchor phase:
// nonanchor rows may attend to anchors and to fully-known uncoded rows;
// every other row attends only to itself (its output is discarded).
template <typename S>
TensorT<S> space_mask(const PhasePlan& plan, const std::vector<uint8_t>& key_full) {
  const int n = plan.token_count;
  std::vector<uint8_t> is_nonanchor(size_t(n), 0), is_key(size_t(n), 0);
  for (int32_t t : plan.nonanchors) is_nonanchor[size_t(t)] = 1;
  for (int32_t t : plan.anchors) is_key[size_t(t)] = 1;
  for (int i = 0; i < n; ++i)
    if (!key_full.empty() && key_full[size_t(i)]) is_key[size_t(i)] = 1;
  TensorT<S> m = TensorT<S>::zeros2(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      bool ok = is_nonanchor[size_t(i)] ? (is_key[size_t(j)] != 0) : (i == j);
      m.at(i, j) = ok ? S(0) : S(-1e30);
    }
  }
  return m;
}

}  // namespace

template <typename S>
typename Graph<S>::Id phase_param_rows(Graph<S>& g, SectionNets<S>& sn, const PhasePlan& plan, int phase,
                                       typename Graph<S>::Id masked_values, typename Graph<S>::Id psi,
                                       typename Graph<S>::Id pe, const std::vector<uint8_t>& key_full) {
  const ArchConfig& cfg = *sn.cfg;
  const std::string& pre = sn.spec->prefix;
  const int cf = cfg.feature_width;
  const std::vector<int32_t>& toks = plan.phase_tokens(phase);
  if (toks.empty()) throw InvariantError("phase_param_rows: empty phase");
  const int m = int(toks.size());
  const std::vector<int> toks_i = to_int<S>(toks);
  const int gi = plan.phase_group(phase);

  typename Graph<S>::Id phi_ch;
  if (!cfg.channel_ctx) {
    phi_ch = g.constant(TensorT<S>::zeros2(m, cf));
  } else if (gi == 0) {
    // no channels of these tokens are decoded yet
    auto nul = wparam(g, *sn.wm, pre + ".nullch");
    phi_ch = g.gather_rows(nul, std::vector<int>(size_t(m), 0));
  } else {
    auto own = g.gather_rows(masked_values, toks_i);
    phi_ch = mlp2(g, own, *sn.wm, pre + ".chctx");
  }

  typename Graph<S>::Id phi_sp;
  if (!cfg.space_ctx || plan.phase_anchor(phase)) {
    phi_sp = g.constant(TensorT<S>::zeros2(m, cf));
  } else if (cfg.attention_backbone) {
    // keys carry the masked values plus each row's hyper features (for
    // uncoded mixed-window rows: the reconstruction embedding)
    auto emb = g.add(mlp2(g, masked_values, *sn.wm, pre + ".spemb"), psi);
    auto mask = g.constant(space_mask<S>(plan, key_full));
    auto att = attention_core(g, emb, pe, *sn.wm, pre + ".spattn", cfg.heads, mask);
    phi_sp = g.gather_rows(att, toks_i);
  } else {
    phi_sp = mlp2(g, g.gather_rows(pe, toks_i), *sn.wm, pre + ".spmix");
  }

  auto psi_rows = g.gather_rows(psi, toks_i);
  auto fused = g.relu(mlp2(g, g.concat_cols(g.concat_cols(psi_rows, phi_ch), phi_sp), *sn.wm, pre + ".fuse"));
  auto params = mlp2(g, fused, *sn.wm, pre + ".head" + std::to_string(gi));
  g.check_finite(params, (pre + ".head").c_str());
  return params;
}

template <typename S>
typename Graph<S>::Id mixture_bits_rows(Graph<S>& g, typename Graph<S>::Id params, typename Graph<S>::Id x, int K) {
  const int m = g.val(x).rows();
  const int C = g.val(x).cols();
  const int ck = C * K;
  if (g.val(params).cols() != 3 * ck) throw InvariantError("mixture_bits: param width");
  auto pi = g.slice_cols(params, 0, ck);
  auto mu = g.slice_cols(params, ck, ck);
  auto ls = g.slice_cols(params, 2 * ck, ck);
  auto s = g.clamp_min(g.exp(ls), S(kScaleMin));
  auto inv = g.reciprocal(s);
  auto xr = g.repeat_group_cols(x, 1, K);
  auto hi = g.sigmoid(g.mul(g.sub(g.add_scalar(xr, S(0.5)), mu), inv));
  auto lo = g.sigmoid(g.mul(g.sub(g.add_scalar(xr, S(-0.5)), mu), inv));
  auto pmf = g.sub(hi, lo);
  auto w = g.reshape2(g.softmax_rows(g.reshape2(pi, m * C, K)), m, ck);
  auto probs = g.rowsum(g.reshape2(g.mul(w, pmf), m * C, K));
  auto logp = g.reshape2(g.log(g.clamp_min(probs, S(1e-12))), m, C);
  return g.scale(g.rowsum(logp), S(-1.0 / std::log(2.0)));
}

template <typename S>
typename Graph<S>::Id mixture_bits(Graph<S>& g, typename Graph<S>::Id params, typename Graph<S>::Id x, int K) {
  return g.sum_all(mixture_bits_rows(g, params, x, K));
}

template <typename S>
typename Graph<S>::Id gaussian_bits_rows(Graph<S>& g, typename Graph<S>::Id params, typename Graph<S>::Id x) {
  const int C = g.val(x).cols();
  if (g.val(params).cols() != 2 * C) throw InvariantError("gaussian_bits: param width");
  auto mu = g.slice_cols(params, 0, C);
  auto ls = g.slice_cols(params, C, C);
  auto s = g.clamp_min(g.exp(ls), S(kSigmaMin));
  auto inv = g.reciprocal(s);
  auto hi = g.ncdf(g.mul(g.sub(g.add_scalar(x, S(0.5)), mu), inv));
  auto lo = g.ncdf(g.mul(g.sub(g.add_scalar(x, S(-0.5)), mu), inv));
  auto probs = g.sub(hi, lo);
  auto logp = g.log(g.clamp_min(probs, S(1e-12)));
  return g.scale(g.rowsum(logp), S(-1.0 / std::log(2.0)));
}

template <typename S>
typename Graph<S>::Id gaussian_bits(Graph<S>& g, typename Graph<S>::Id params, typename Graph<S>::Id x) {
  return g.sum_all(gaussian_bits_rows(g, params, x));
}

namespace {

// One factorized CDF stack in logit domain: x (m x C) -> logits (m x C).
template <typename S>
typename Graph<S>::Id factorized_logit(Graph<S>& g, WeightMap<S>& wm, const std::string& prefix,
                                       typename Graph<S>::Id x, int channels) {
  const int m = g.val(x).rows();
  auto flat = [&](const std::string& name) { return g.reshape1(wparam(g, wm, prefix + name)); };
  auto gate = [&](typename Graph<S>::Id t, typename Graph<S>::Id a) {
    return g.add(t, g.mul_rowvec(g.tanh(t), g.tanh(a)));
  };
  // layer 0: 1 -> 3 per channel
  auto t = g.add_rowvec(g.mul_rowvec(g.repeat_group_cols(x, 1, 3), g.softplus(flat(".h0"))), flat(".b0"));
  t = gate(t, flat(".a0"));
  // layers 1, 2: 3 -> 3 per channel (output-major weight groups)
  for (const char* l : {"1", "2"}) {
    auto rep = g.repeat_group_cols(t, 3, 3);
    auto prod = g.mul_rowvec(rep, g.softplus(flat(std::string(".h") + l)));
    auto summed = g.reshape2(g.rowsum(g.reshape2(prod, m * channels * 3, 3)), m, channels * 3);
    t = gate(g.add_rowvec(summed, flat(std::string(".b") + l)), flat(std::string(".a") + l));
  }
  // layer 3: 3 -> 1 per channel, no gate
  auto prod = g.mul_rowvec(t, g.softplus(flat(".h3")));
  auto out = g.reshape2(g.rowsum(g.reshape2(prod, m * channels, 3)), m, channels);
  return g.add_rowvec(out, flat(".b3"));
}

}  // namespace

template <typename S>
typename Graph<S>::Id factorized_bits_rows(Graph<S>& g, WeightMap<S>& wm, const std::string& prefix,
                                           typename Graph<S>::Id x, int channels) {
  if (g.val(x).cols() != channels) throw InvariantError("factorized_bits: channel width");
  auto hi = g.sigmoid(factorized_logit(g, wm, prefix, g.add_scalar(x, S(0.5)), channels));
  auto lo = g.sigmoid(factorized_logit(g, wm, prefix, g.add_scalar(x, S(-0.5)), channels));
  auto probs = g.sub(hi, lo);
  auto logp = g.log(g.clamp_min(probs, S(1e-12)));
  return g.scale(g.rowsum(logp), S(-1.0 / std::log(2.0)));
}

template <typename S>
typename Graph<S>::Id factorized_bits(Graph<S>& g, WeightMap<S>& wm, const std::string& prefix,
                                      typename Graph<S>::Id x, int channels) {
  return g.sum_all(factorized_bits_rows(g, wm, prefix, x, channels));
}

void predict_window(SectionNets<float>& sn, const PhasePlan& plan, WindowState& w,
                    const std::vector<float>& steps, const std::vector<int32_t>* symbols_in, const PhaseFn& fn) {
  const int C = sn.spec->sym_channels;
  if (int(steps.size()) != C) throw InvariantError("predict_window: step count");
  if (w.values.rows() != w.n || w.values.cols() != C) throw InvariantError("predict_window: value shape");

  if (w.pe.numel() == 0) {
    Graph<float> gpe(false);
    w.pe = gpe.val(section_pe(gpe, sn, gpe.constant(w.pos_norm)));
  }
  const Tensor& pe_t = w.pe;

  const int K = sn.cfg->mixture_k;
  std::vector<CellRef> cells;
  std::vector<CellParams> params;
  std::vector<int32_t> syms;
  for (int p = 0; p < plan.phases(); ++p) {
    const std::vector<int32_t>& toks = plan.phase_tokens(p);
    cells.clear();
    params.clear();
    syms.clear();
    if (toks.empty()) {
      fn(p, cells, params, syms);
      continue;
    }
    Tensor pmat;
    {
      Graph<float> g(false);
      auto mv = g.constant(w.values);
      auto psi = g.constant(w.psi);
      auto pe = g.constant(pe_t);
      pmat = g.val(phase_param_rows(g, sn, plan, p, mv, psi, pe, w.key_full));
    }
    const ChannelGroup grp = plan.groups[size_t(plan.phase_group(p))];
    const int gc = grp.size;
    cells.reserve(toks.size() * size_t(gc));
    params.reserve(cells.capacity());
    for (size_t ti = 0; ti < toks.size(); ++ti) {
      for (int c = 0; c < gc; ++c) {
        CellRef ref{toks[ti], grp.begin + c};
        CellParams cp;
        if (sn.spec->mixture) {
          const int ck = gc * K;
          for (int k = 0; k < K; ++k) {
            cp.mix.logit_pi[size_t(k)] = pmat.at(int(ti), c * K + k);
            cp.mix.mu[size_t(k)] = pmat.at(int(ti), ck + c * K + k);
            cp.mix.log_s[size_t(k)] = pmat.at(int(ti), 2 * ck + c * K + k);
          }
        } else {
          cp.mu = pmat.at(int(ti), c);
          cp.sigma = float(std::max(std::exp(double(pmat.at(int(ti), gc + c))), kSigmaMin));
        }
        cells.push_back(ref);
        params.push_back(cp);
      }
    }
    syms.assign(cells.size(), 0);
    if (symbols_in) {
      for (size_t i = 0; i < cells.size(); ++i)
        syms[i] = (*symbols_in)[size_t(cells[i].token) * size_t(C) + size_t(cells[i].channel)];
    }
    fn(p, cells, params, syms);
    for (size_t i = 0; i < cells.size(); ++i)
      w.values.at(cells[i].token, cells[i].channel) = dequantize_value(syms[i], steps[size_t(cells[i].channel)]);
  }
}

template Graph<float>::Id phase_param_rows<float>(Graph<float>&, SectionNets<float>&, const PhasePlan&, int,
                                                  Graph<float>::Id, Graph<float>::Id, Graph<float>::Id,
                                                  const std::vector<uint8_t>&);
template Graph<double>::Id phase_param_rows<double>(Graph<double>&, SectionNets<double>&, const PhasePlan&, int,
                                                    Graph<double>::Id, Graph<double>::Id, Graph<double>::Id,
                                                    const std::vector<uint8_t>&);
template Graph<float>::Id mixture_bits<float>(Graph<float>&, Graph<float>::Id, Graph<float>::Id, int);
template Graph<double>::Id mixture_bits<double>(Graph<double>&, Graph<double>::Id, Graph<double>::Id, int);
template Graph<float>::Id gaussian_bits<float>(Graph<float>&, Graph<float>::Id, Graph<float>::Id);
template Graph<double>::Id gaussian_bits<double>(Graph<double>&, Graph<double>::Id, Graph<double>::Id);
template Graph<float>::Id factorized_bits<float>(Graph<float>&, WeightMap<float>&, const std::string&,
                                                 Graph<float>::Id, int);
template Graph<double>::Id factorized_bits<double>(Graph<double>&, WeightMap<double>&, const std::string&,
                                                   Graph<double>::Id, int);
template Graph<float>::Id mixture_bits_rows<float>(Graph<float>&, Graph<float>::Id, Graph<float>::Id, int);
template Graph<double>::Id mixture_bits_rows<double>(Graph<double>&, Graph<double>::Id, Graph<double>::Id, int);
template Graph<float>::Id gaussian_bits_rows<float>(Graph<float>&, Graph<float>::Id, Graph<float>::Id);
template Graph<double>::Id gaussian_bits_rows<double>(Graph<double>&, Graph<double>::Id, Graph<double>::Id);
template Graph<float>::Id factorized_bits_rows<float>(Graph<float>&, WeightMap<float>&, const std::string&,
                                                      Graph<float>::Id, int);
template Graph<double>::Id factorized_bits_rows<double>(Graph<double>&, WeightMap<double>&, const std::string&,
                                                        Graph<double>::Id, int);

}  // namespace lcm
