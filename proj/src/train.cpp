#include "lcm/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "lcm/morton.hpp"
#include "lcm/pipeline.hpp"
#include "lcm/synth.hpp"
#include "lcm/weights.hpp"

namespace lcm {

namespace {

const SectionSpec& geom_spec() {
  static const SectionSpec s = geom_section();
  return s;
}
const SectionSpec& lossy_spec() {
  static const SectionSpec s = lossy_color_section();
  return s;
}
const SectionSpec& closs_spec() {
  static const SectionSpec s = lossless_color_section();
  return s;
}

std::vector<int> to_int(const std::vector<int32_t>& v) { return std::vector<int>(v.begin(), v.end()); }

std::vector<uint8_t> all_coded(int n) { return std::vector<uint8_t>(size_t(n), 1); }

// anchor flag per token (-1 = not coded), matching phase-plan ranking
std::vector<int8_t> anchor_flags(const PhasePlan& plan) {
  std::vector<int8_t> f(size_t(plan.token_count), -1);
  int rank = 0;
  for (int32_t t : plan.coded_tokens) {
    f[size_t(t)] = (rank & 1) == 0 ? 1 : 0;
    ++rank;
  }
  return f;
}

bool group_visible(int q, bool anchor, int phase) { return 2 * q + (anchor ? 0 : 1) < phase; }

// Decoder-side value state before `phase`: coded rows hold the dequantized
// symbols of finished groups, `key_full` rows keep their full rows.
Tensor masked_state(const PhasePlan& plan, int phase, const std::vector<int32_t>& syms,
                    const std::vector<float>& steps, int C, const Tensor* key_rows,
                    const std::vector<uint8_t>& key_full) {
  Tensor t = Tensor::zeros2(plan.token_count, C);
  const std::vector<int8_t> anc = anchor_flags(plan);
  for (int i = 0; i < plan.token_count; ++i) {
    if (!key_full.empty() && key_full[size_t(i)]) {
      if (key_rows)
        for (int c = 0; c < C; ++c) t.at(i, c) = key_rows->at(i, c);
      continue;
    }
    if (anc[size_t(i)] < 0) continue;
    for (size_t q = 0; q < plan.groups.size(); ++q) {
      if (!group_visible(int(q), anc[size_t(i)] == 1, phase)) continue;
      const ChannelGroup& grp = plan.groups[q];
      for (int c = 0; c < grp.size; ++c)
        t.at(i, grp.begin + c) =
            dequantize_value(syms[size_t(i) * size_t(C) + size_t(grp.begin + c)], steps[size_t(grp.begin + c)]);
    }
  }
  return t;
}

// 0/1 mask of the same visibility pattern (for graph-valued states).
Tensor visibility_mask(const PhasePlan& plan, int phase, int C) {
  Tensor t = Tensor::zeros2(plan.token_count, C);
  const std::vector<int8_t> anc = anchor_flags(plan);
  for (int i = 0; i < plan.token_count; ++i) {
    if (anc[size_t(i)] < 0) continue;
    for (size_t q = 0; q < plan.groups.size(); ++q) {
      if (!group_visible(int(q), anc[size_t(i)] == 1, phase)) continue;
      const ChannelGroup& grp = plan.groups[q];
      for (int c = 0; c < grp.size; ++c) t.at(i, grp.begin + c) = 1.f;
    }
  }
  return t;
}

Tensor phase_symbol_rows(const PhasePlan& plan, int phase, const std::vector<int32_t>& syms, int C) {
  const std::vector<int32_t>& toks = plan.phase_tokens(phase);
  const ChannelGroup& grp = plan.groups[size_t(plan.phase_group(phase))];
  Tensor t = Tensor::zeros2(int(toks.size()), grp.size);
  for (size_t i = 0; i < toks.size(); ++i)
    for (int c = 0; c < grp.size; ++c)
      t.at(int(i), c) = float(syms[size_t(toks[i]) * size_t(C) + size_t(grp.begin + c)]);
  return t;
}

Tensor noise_tensor(Rng& rng, int m, int c) {
  Tensor t = Tensor::zeros2(m, c);
  for (float& v : t.v) v = float(rng.uniform(-0.5, 0.5));
  return t;
}

Tensor ones_col(int n) {
  Tensor t = Tensor::zeros2(n, 1);
  for (float& v : t.v) v = 1.f;
  return t;
}

std::vector<int32_t> color_symbols(const Tensor& colors, const std::vector<float>& steps) {
  const int n = colors.rows(), C = colors.cols();
  std::vector<int32_t> syms(size_t(n) * size_t(C));
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < C; ++c) syms[size_t(i) * size_t(C) + size_t(c)] = quantize_value(colors.at(i, c), steps[size_t(c)]);
  return syms;
}

}  // namespace

std::vector<TrainWindow> training_windows(const GaussianCloud& cloud, const ArchConfig& cfg,
                                          const std::vector<float>& geom_steps, int window_len) {
  if (cloud.n < 1) throw InputError("empty cloud");
  const int bits = cfg.position_bits;
  const PositionQuant q = make_position_quant(cloud, bits);
  const std::vector<uint32_t> grid = quantize_positions(cloud.positions.data(), cloud.n, q, nullptr);
  std::vector<int64_t> order = serialize_order(grid, bits);
  if (cfg.serialization_shuffle_seed != 0) {
    Rng rng(cfg.serialization_shuffle_seed ^ uint64_t(cloud.n) * 0x9E3779B97F4A7C15ull);
    for (int64_t i = cloud.n - 1; i > 0; --i) {
      const int64_t j = int64_t(rng.below(uint64_t(i) + 1));
      std::swap(order[size_t(i)], order[size_t(j)]);
    }
  }
  const std::vector<int32_t> lens = partition_windows(cloud.n, window_len);
  const double half = double(uint64_t(1) << (bits - 1));
  std::vector<TrainWindow> out;
  int64_t at = 0;
  for (int32_t len : lens) {
    TrainWindow w;
    w.n = len;
    w.pos_norm = Tensor::zeros2(len, 3);
    w.colors = Tensor::zeros2(len, GaussianCloud::kColorDims);
    w.geom_values = Tensor::zeros2(len, kGeomChannels);
    w.geom_syms.resize(size_t(len) * size_t(kGeomChannels));
    for (int32_t i = 0; i < len; ++i) {
      const int64_t src = order[size_t(at + i)];
      for (int a = 0; a < 3; ++a)
        w.pos_norm.at(i, a) = float(double(grid[size_t(src) * 3 + size_t(a)]) / half - 1.0);
      std::memcpy(&w.colors.at(i, 0), &cloud.colors[size_t(src) * size_t(GaussianCloud::kColorDims)],
                  sizeof(float) * size_t(GaussianCloud::kColorDims));
      float row[kGeomChannels];
      gather_geometry_row(cloud, src, row);
      for (int c = 0; c < kGeomChannels; ++c) {
        const int32_t s = quantize_value(row[c], geom_steps[size_t(c)]);
        w.geom_syms[size_t(i) * size_t(kGeomChannels) + size_t(c)] = s;
        w.geom_values.at(i, c) = dequantize_value(s, geom_steps[size_t(c)]);
      }
    }
    out.push_back(std::move(w));
    at += len;
  }
  return out;
}

Graph<float>::Id build_geom_loss(Graph<float>& g, WeightMap<float>& wm, const ArchConfig& cfg, const TrainWindow& w,
                                 uint64_t noise_seed) {
  SectionNets<float> sn{&geom_spec(), &cfg, &wm};
  Rng rng(noise_seed ^ 0x47E0A3B1C55Dull);
  const int n = w.n;
  auto pos = g.constant(w.pos_norm);
  auto pe = section_pe(g, sn, pos);
  auto vals = g.constant(w.geom_values);
  auto u = hyper_analysis(g, sn, pe, vals);
  auto rate = factorized_bits(g, wm, "geom.fz", g.add(u, g.constant(noise_tensor(rng, n, kGeomHyperChannels))),
                              kGeomHyperChannels);
  auto psi = hyper_synthesis(g, sn, pe, g.ste_round(u));
  const PhasePlan plan = make_phase_plan(all_coded(n), geom_spec().subgroups, kGeomChannels);
  const std::vector<float>& steps = wm.get("geom.steps").v;
  for (int p = 0; p < plan.phases(); ++p) {
    if (plan.phase_tokens(p).empty()) continue;
    auto mv = g.constant(masked_state(plan, p, w.geom_syms, steps, kGeomChannels, nullptr, {}));
    auto params = phase_param_rows(g, sn, plan, p, mv, psi, pe, {});
    Tensor x = phase_symbol_rows(plan, p, w.geom_syms, kGeomChannels);
    for (float& v : x.v) v += float(rng.uniform(-0.5, 0.5));
    rate = g.add(rate, mixture_bits(g, params, g.constant(x), cfg.mixture_k));
  }
  return g.scale(rate, 1.0f / float(n));
}

Graph<float>::Id build_color_dual_loss(Graph<float>& g, WeightMap<float>& wm, const ArchConfig& cfg,
                                       const TrainWindow& w, uint64_t noise_seed, float lambda_dist,
                                       bool trainable_steps) {
  SectionNets<float> ysn{&lossy_spec(), &cfg, &wm};
  SectionNets<float> csn{&closs_spec(), &cfg, &wm};
  Rng rng(noise_seed ^ 0xD1517C0FFEE7ull);
  const int n = w.n;
  const int C = GaussianCloud::kColorDims;
  auto pos = g.constant(w.pos_norm);
  auto colors = g.constant(w.colors);

  // soft lossy/lossless assignment from the division network
  Tensor rows56 = Tensor::zeros2(n, C + kGeomChannels);
  for (int i = 0; i < n; ++i) {
    std::memcpy(&rows56.at(i, 0), w.colors.v.data() + size_t(i) * size_t(C), sizeof(float) * size_t(C));
    std::memcpy(&rows56.at(i, C), w.geom_values.v.data() + size_t(i) * size_t(kGeomChannels),
                sizeof(float) * size_t(kGeomChannels));
  }
  auto dpe = division_pe(g, wm, cfg, pos);
  auto logits = division_logits(g, wm, cfg, dpe, g.constant(rows56));
  auto s_lossy = g.sigmoid(logits);  // n x 1
  auto s_lossless = g.sub(g.constant(ones_col(n)), s_lossy);

  // lossy path over the full window
  auto pe_y = section_pe(g, ysn, pos);
  auto y = lossy_analysis(g, ysn, pe_y, colors);
  auto yhat = g.ste_round(y);
  auto uy = hyper_analysis(g, ysn, pe_y, yhat);
  auto hyp_rows_y = factorized_bits_rows(
      g, wm, "clossy.fz", g.add(uy, g.constant(noise_tensor(rng, n, kLossyHyperChannels))), kLossyHyperChannels);
  auto psi_y = hyper_synthesis(g, ysn, pe_y, g.ste_round(uy));
  auto ynoise = g.add(y, g.constant(noise_tensor(rng, n, kLossyLatentChannels)));
  auto sg_yhat = g.stopgrad(yhat);
  auto rate_lossy = g.sum_all(g.mul(hyp_rows_y, s_lossy));
  const PhasePlan plan_y = make_phase_plan(all_coded(n), lossy_spec().subgroups, kLossyLatentChannels);
  for (int p = 0; p < plan_y.phases(); ++p) {
    const std::vector<int32_t>& toks = plan_y.phase_tokens(p);
    if (toks.empty()) continue;
    auto mv = g.mul(sg_yhat, g.constant(visibility_mask(plan_y, p, kLossyLatentChannels)));
    auto params = phase_param_rows(g, ysn, plan_y, p, mv, psi_y, pe_y, {});
    const ChannelGroup& grp = plan_y.groups[size_t(plan_y.phase_group(p))];
    auto x = g.slice_cols(g.gather_rows(ynoise, to_int(toks)), grp.begin, grp.size);
    auto rows = gaussian_bits_rows(g, params, x);
    rate_lossy = g.add(rate_lossy, g.sum_all(g.mul(rows, g.gather_rows(s_lossy, to_int(toks)))));
  }
  auto chat = lossy_synthesis(g, ysn, pe_y, yhat);
  auto dist_rows = g.rowsum(g.square(g.sub(chat, colors)));
  auto dist = g.sum_all(g.mul(dist_rows, s_lossy));

  // lossless path over the full window
  auto pe_c = section_pe(g, csn, pos);
  const std::vector<float> steps_now = wm.get("closs.steps").v;
  const std::vector<int32_t> csyms = color_symbols(w.colors, steps_now);
  Graph<float>::Id sym_expr, deq_expr;
  if (trainable_steps) {
    auto sp = wparam(g, wm, "closs.steps");
    auto inv = g.reciprocal(sp);
    auto cont = g.mul_rowvec(colors, inv);
    sym_expr = g.add(cont, g.constant(noise_tensor(rng, n, C)));
    deq_expr = g.mul_rowvec(g.ste_round(cont), sp);
    // lossless tokens pay their quantization error, which is what stops
    // rate pressure from inflating the steps
    dist = g.add(dist, g.sum_all(g.mul(g.rowsum(g.square(g.sub(deq_expr, colors))), s_lossless)));
  } else {
    Tensor symt = Tensor::zeros2(n, C), deqt = Tensor::zeros2(n, C);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < C; ++c) {
        const int32_t s = csyms[size_t(i) * size_t(C) + size_t(c)];
        symt.at(i, c) = float(s) + float(rng.uniform(-0.5, 0.5));
        deqt.at(i, c) = dequantize_value(s, steps_now[size_t(c)]);
      }
    sym_expr = g.constant(symt);
    deq_expr = g.constant(deqt);
  }
  auto uc = hyper_analysis(g, csn, pe_c, deq_expr);
  auto hyp_rows_c = factorized_bits_rows(
      g, wm, "closs.fz", g.add(uc, g.constant(noise_tensor(rng, n, kColorHyperChannels))), kColorHyperChannels);
  auto psi_c = hyper_synthesis(g, csn, pe_c, g.ste_round(uc));
  auto rate_closs = g.sum_all(g.mul(hyp_rows_c, s_lossless));
  const PhasePlan plan_c = make_phase_plan(all_coded(n), closs_spec().subgroups, C);
  for (int p = 0; p < plan_c.phases(); ++p) {
    const std::vector<int32_t>& toks = plan_c.phase_tokens(p);
    if (toks.empty()) continue;
    auto mv = g.constant(masked_state(plan_c, p, csyms, steps_now, C, nullptr, {}));
    auto params = phase_param_rows(g, csn, plan_c, p, mv, psi_c, pe_c, {});
    const ChannelGroup& grp = plan_c.groups[size_t(plan_c.phase_group(p))];
    auto x = g.slice_cols(g.gather_rows(sym_expr, to_int(toks)), grp.begin, grp.size);
    auto rows = mixture_bits_rows(g, params, x, cfg.mixture_k);
    rate_closs = g.add(rate_closs, g.sum_all(g.mul(rows, g.gather_rows(s_lossless, to_int(toks)))));
  }

  auto loss = g.add(g.add(rate_lossy, rate_closs), g.scale(dist, lambda_dist));
  return g.scale(loss, 1.0f / float(n));
}

Graph<float>::Id build_mixed_lossless_loss(Graph<float>& g, WeightMap<float>& wm, const ArchConfig& cfg,
                                           const TrainWindow& w, uint64_t noise_seed, bool mixed) {
  SectionNets<float> csn{&closs_spec(), &cfg, &wm};
  SectionNets<float> ysn{&lossy_spec(), &cfg, &wm};
  Rng rng(noise_seed ^ 0x3C0FFEE5EED1ull);
  const int n = w.n;
  const int C = GaussianCloud::kColorDims;

  std::vector<uint8_t> key(size_t(n), 0);
  if (mixed && n >= 2) {
    for (int i = 0; i < n; ++i) key[size_t(i)] = uint8_t(rng.below(2));
    // keep both classes populated
    bool any_key = false, any_coded = false;
    for (uint8_t k : key) (k ? any_key : any_coded) = true;
    if (!any_key) key[size_t(n - 1)] = 1;
    if (!any_coded) key[0] = 0;
  }
  std::vector<uint8_t> coded(static_cast<size_t>(n));
  bool any_key = false;
  for (int i = 0; i < n; ++i) {
    coded[size_t(i)] = key[size_t(i)] ? 0 : 1;
    any_key = any_key || key[size_t(i)];
  }

  const std::vector<float> steps_now = wm.get("closs.steps").v;
  const std::vector<int32_t> csyms = color_symbols(w.colors, steps_now);

  // stand-in reconstructions for conditioning rows: current lossy round
  // trip, treated as data
  Tensor recon = Tensor::zeros2(n, C);
  if (any_key) {
    Graph<float> gi(false);
    auto posc = gi.constant(w.pos_norm);
    auto pei = section_pe(gi, ysn, posc);
    const Tensor yv = gi.val(lossy_analysis(gi, ysn, pei, gi.constant(w.colors)));
    Tensor yr = yv;
    for (float& v : yr.v) v = float(round_even(double(v)));
    recon = gi.val(lossy_synthesis(gi, ysn, pei, gi.constant(yr)));
  }

  // hyper runs on the coded subset, exactly as the format codes it
  std::vector<int64_t> sub;
  for (int i = 0; i < n; ++i)
    if (coded[size_t(i)]) sub.push_back(i);
  const int m = int(sub.size());
  if (m == 0) return g.constant(Tensor::zeros2(1, 1));
  Tensor sub_pos = Tensor::zeros2(m, 3), sub_vals = Tensor::zeros2(m, C);
  for (int i = 0; i < m; ++i) {
    for (int a = 0; a < 3; ++a) sub_pos.at(i, a) = w.pos_norm.at(int(sub[size_t(i)]), a);
    for (int c = 0; c < C; ++c)
      sub_vals.at(i, c) = dequantize_value(csyms[size_t(sub[size_t(i)]) * size_t(C) + size_t(c)], steps_now[size_t(c)]);
  }
  auto pe_sub = section_pe(g, csn, g.constant(sub_pos));
  auto u = hyper_analysis(g, csn, pe_sub, g.constant(sub_vals));
  auto rate = factorized_bits(g, wm, "closs.fz", g.add(u, g.constant(noise_tensor(rng, m, kColorHyperChannels))),
                              kColorHyperChannels);
  auto psi_sub = hyper_synthesis(g, csn, pe_sub, g.ste_round(u));

  // full-window features: scattered subset rows plus the reconstruction
  // embedding on conditioning rows
  Graph<float>::Id psi_full;
  auto pe_full = section_pe(g, csn, g.constant(w.pos_norm));
  {
    std::vector<int> map(size_t(n), 0);
    int rank = 0;
    for (int i = 0; i < n; ++i)
      if (coded[size_t(i)]) map[size_t(i)] = rank++;
    Tensor coded_col = Tensor::zeros2(n, 1), key_col = Tensor::zeros2(n, 1);
    for (int i = 0; i < n; ++i) (coded[size_t(i)] ? coded_col : key_col).at(i, 0) = 1.f;
    psi_full = g.mul_colvec(g.gather_rows(psi_sub, map), g.constant(coded_col));
    if (any_key) {
      auto emb = mlp2(g, g.constant(recon), wm, "closs.lembed");
      psi_full = g.add(psi_full, g.mul_colvec(emb, g.constant(key_col)));
    }
  }

  const PhasePlan plan = make_phase_plan(coded, closs_spec().subgroups, C);
  for (int p = 0; p < plan.phases(); ++p) {
    if (plan.phase_tokens(p).empty()) continue;
    auto mv = g.constant(masked_state(plan, p, csyms, steps_now, C, &recon, key));
    auto params = phase_param_rows(g, csn, plan, p, mv, psi_full, pe_full, key);
    Tensor x = phase_symbol_rows(plan, p, csyms, C);
    for (float& v : x.v) v += float(rng.uniform(-0.5, 0.5));
    rate = g.add(rate, mixture_bits(g, params, g.constant(x), cfg.mixture_k));
  }
  return g.scale(rate, 1.0f / float(m));
}

double AdamOptimizer::step(WeightMap<float>& wm, const std::vector<std::string>& names) {
  double norm2 = 0;
  for (const std::string& nm : names) {
    auto it = wm.grads.find(nm);
    if (it == wm.grads.end()) continue;
    for (float gv : it->second.v) norm2 += double(gv) * double(gv);
  }
  const double norm = std::sqrt(norm2);
  const double gscale = (clip > 0 && norm > double(clip)) ? double(clip) / norm : 1.0;
  ++t;
  const double bc1 = 1.0 - std::pow(double(beta1), double(t));
  const double bc2 = 1.0 - std::pow(double(beta2), double(t));
  for (const std::string& nm : names) {
    auto it = wm.grads.find(nm);
    if (it == wm.grads.end()) continue;
    auto& param = wm.tensors.at(nm);
    if (param.v.size() != it->second.v.size()) throw InvariantError("gradient shape mismatch: " + nm);
    auto& mv = m[nm];
    auto& vv = v[nm];
    mv.resize(param.v.size(), 0.f);
    vv.resize(param.v.size(), 0.f);
    for (size_t i = 0; i < param.v.size(); ++i) {
      const double gv = double(it->second.v[i]) * gscale;
      mv[i] = float(double(beta1) * double(mv[i]) + (1.0 - double(beta1)) * gv);
      vv[i] = float(double(beta2) * double(vv[i]) + (1.0 - double(beta2)) * gv * gv);
      const double mh = double(mv[i]) / bc1;
      const double vh = double(vv[i]) / bc2;
      param.v[i] -= float(double(lr) * mh / (std::sqrt(vh) + double(eps)));
    }
  }
  return norm;
}

std::vector<std::string> trainable_params(const WeightMap<float>& wm, const std::string& stage) {
  if (stage != "lossy_init" && stage != "lossless_init" && stage != "joint")
    throw InputError("unknown training stage: " + stage);
  std::vector<std::string> out;
  for (const auto& [name, t] : wm.tensors) {
    (void)t;
    if (name == "meta.arch" || name == "geom.steps") continue;
    bool pick = false;
    if (stage == "lossy_init")
      pick = name.rfind("clossy.", 0) == 0 || name.rfind("div.", 0) == 0;
    else if (stage == "lossless_init")
      pick = (name.rfind("geom.", 0) == 0 || name.rfind("closs.", 0) == 0) && name != "closs.steps";
    else
      pick = true;
    if (pick) out.push_back(name);
  }
  return out;
}

TrainReport train_stage(WeightMap<float>& wm, const TrainOptions& opt) {
  const ArchConfig cfg = arch_config(get_arch_id(wm));
  validate_weights(wm, cfg);
  if (opt.steps < 1) throw InputError("training needs at least one step");
  const int L = opt.window_len > 0 ? opt.window_len : cfg.window_len;

  const std::vector<std::string> names = trainable_params(wm, opt.stage);

  AdamOptimizer adam;
  adam.lr = opt.lr;
  adam.clip = opt.clip;

  const bool was_training = wm.training;
  wm.training = true;
  TrainReport rep;
  // Fresh scene every step: the model must learn mechanisms that transfer
  // across scenes (neighbour copying, shared-latent channel structure), not
  // the statistics of one fixed window.
  std::vector<TrainWindow> windows;
  for (int step = 0; step < opt.steps; ++step) {
    if (step % 4 == 0 || windows.empty()) {
      SynthOptions so;
      so.n = opt.points;
      so.seed = opt.seed * 977 + 13 + uint64_t(step / 4) * 0x9E37ull;
      const GaussianCloud cloud = synth_cloud(so);
      windows = training_windows(cloud, cfg, wm.get("geom.steps").v, L);
    }
    const TrainWindow& tw = windows[size_t(step) % windows.size()];
    const uint64_t ns = opt.seed * 1000003ull + uint64_t(step);
    wm.zero_grads();
    Graph<float> g(true);
    Graph<float>::Id loss;
    if (opt.stage == "lossy_init") {
      loss = build_color_dual_loss(g, wm, cfg, tw, ns, opt.lambda_dist, false);
    } else if (opt.stage == "lossless_init") {
      const bool mixed = opt.mixed_period > 0 && (step % opt.mixed_period) == opt.mixed_period - 1;
      loss = g.add(build_geom_loss(g, wm, cfg, tw, ns),
                   build_mixed_lossless_loss(g, wm, cfg, tw, ns ^ 0x5A5A5A5Aull, mixed));
    } else {
      loss = g.add(build_geom_loss(g, wm, cfg, tw, ns),
                   build_color_dual_loss(g, wm, cfg, tw, ns, opt.lambda_dist, true));
    }
    g.backward(loss);
    const double lv = double(g.val(loss).at1(0));
    if (!std::isfinite(lv))
      throw DivergenceError("training loss not finite at step " + std::to_string(step) + " (stage " + opt.stage + ")");
    rep.losses.push_back(lv);
    rep.grad_norm_last = adam.step(wm, names);
    // keep quantization steps usable
    auto& steps = wm.tensors.at("closs.steps");
    for (float& s : steps.v) s = std::max(1e-4f, std::min(1e6f, s));
  }
  wm.training = was_training;
  rep.first = rep.losses.front();
  rep.last = rep.losses.back();
  return rep;
}

double eval_bits_per_token(WeightMap<float>& wm, const GaussianCloud& cloud, int window_len, int threads) {
  EncodeOptions eo;
  eo.threads = threads;
  eo.window_len = window_len;
  eo.force_lossless = true;
  EncodeStats st;
  compress(cloud, wm, eo, &st);
  return st.attribute_bits / double(st.n);
}

std::vector<AblationResult> run_ablations(int steps, int64_t points, uint64_t seed, int threads,
                                          const std::vector<std::string>& only) {
  const auto wanted = [&](const std::string& name) {
    if (only.empty() || name == "baseline") return true;
    return std::find(only.begin(), only.end(), name) != only.end();
  };
  struct Variant {
    const char* name;
    uint32_t arch;
  };
  const Variant variants[] = {{"baseline", kArchToy},
                              {"no_space_ctx", kArchToyNoSpaceCtx},
                              {"no_channel_ctx", kArchToyNoChannelCtx},
                              {"random_order", kArchToyRandomOrder},
                              {"mlp_backbone", kArchToyMlpBackbone}};
  SynthOptions ho;
  ho.n = points;
  ho.seed = seed + 9999;  // held out from training
  const GaussianCloud eval_cloud = synth_cloud(ho);

  // Windows must be much shorter than the scene for serialization and space
  // context to matter at all; 64 gives every scene a dozen windows.
  const int kAblationWindow = 64;
  std::vector<AblationResult> out;
  WeightMap<float> baseline;
  for (const Variant& v : variants) {
    if (!wanted(v.name)) continue;
    WeightMap<float> wm = init_weights(arch_config(v.arch), seed);
    TrainOptions to;
    to.stage = "lossless_init";  // the compared metric is forced-lossless
    to.steps = steps;
    to.points = points;
    to.seed = seed;
    to.window_len = kAblationWindow;
    train_stage(wm, to);
    AblationResult r;
    r.name = v.name;
    r.arch_id = v.arch;
    r.window_len = kAblationWindow;
    r.bits_per_token = eval_bits_per_token(wm, eval_cloud, kAblationWindow, threads);
    out.push_back(r);
    if (v.arch == kArchToy) baseline = wm;
  }
  for (int L : {16, 1024}) {
    const std::string name = "window_" + std::to_string(L);
    if (!wanted(name)) continue;
    AblationResult r;
    r.name = name;
    r.arch_id = kArchToy;
    r.window_len = L;
    r.bits_per_token = eval_bits_per_token(baseline, eval_cloud, L, threads);
    out.push_back(r);
  }
  return out;
}

}  // namespace lcm
