#pragma once

// Entropy context model. One window of serialized tokens is coded in
// 2 * G serial phases (G = channel subgroup count): for each subgroup,
// anchor tokens (even coded rank) first, then nonanchors. Every phase
// predicts per-cell distributions from
//   psi    - per-token hyper feature (or lossy-reconstruction embedding)
//   phi_ch - channel context from the token's own already-decoded channels
//   phi_sp - space context: attention from nonanchors over anchor tokens
//            (plus fully-known neighbour rows in mixed windows)
// fused by an MLP and mapped through a per-subgroup head.
//
// Every builder is templated so float (codec) and double (finite-difference
// validation) share one code path; encode and decode run the same graphs on
// the same inputs, which makes their predictions bit-identical.

#include <cstdint>
#include <functional>
#include <vector>

#include "lcm/arch.hpp"
#include "lcm/morton.hpp"
#include "lcm/probability.hpp"

namespace lcm {

template <typename S>
struct SectionNets {
  const SectionSpec* spec;
  const ArchConfig* cfg;
  WeightMap<S>* wm;
};

// Phase layout of one window. `coded` marks the tokens this section codes
// (in mixed color windows the lossy rows are present but not coded); anchors
// are the even ranks among coded tokens.
struct PhasePlan {
  std::vector<ChannelGroup> groups;
  std::vector<int32_t> coded_tokens;
  std::vector<int32_t> anchors;
  std::vector<int32_t> nonanchors;
  int token_count = 0;

  int phases() const { return int(groups.size()) * 2; }
  bool phase_anchor(int p) const { return (p & 1) == 0; }
  int phase_group(int p) const { return p / 2; }
  const std::vector<int32_t>& phase_tokens(int p) const { return phase_anchor(p) ? anchors : nonanchors; }
};

PhasePlan make_phase_plan(const std::vector<uint8_t>& coded, const std::vector<int>& subgroups, int channels);

// Positional encoding for one window of normalized positions.
template <typename S>
typename Graph<S>::Id section_pe(Graph<S>& g, SectionNets<S>& sn, typename Graph<S>::Id pos_norm) {
  if (sn.cfg->attention_backbone)
    return dgcnn_positional_encoding(g, pos_norm, *sn.wm, sn.spec->prefix + ".pe", sn.cfg->dgcnn_k);
  return mlp_positional_encoding(g, pos_norm, *sn.wm, sn.spec->prefix + ".pe");
}

// Hyper transforms: values -> continuous hyper latents (n x hyper_channels),
// and quantized hyper latents -> per-token features (n x feature_width).
template <typename S>
typename Graph<S>::Id hyper_analysis(Graph<S>& g, SectionNets<S>& sn, typename Graph<S>::Id pe,
                                     typename Graph<S>::Id values) {
  const std::string p = sn.spec->prefix + ".ht";
  auto h = mlp2(g, values, *sn.wm, p + ".in");
  h = attention_block(g, h, pe, *sn.wm, p + ".blk", sn.cfg->heads, sn.cfg->attention_backbone);
  return mlp2(g, h, *sn.wm, p + ".out");
}

template <typename S>
typename Graph<S>::Id hyper_synthesis(Graph<S>& g, SectionNets<S>& sn, typename Graph<S>::Id pe,
                                      typename Graph<S>::Id u_hat) {
  const std::string p = sn.spec->prefix + ".hs";
  auto h = mlp2(g, u_hat, *sn.wm, p + ".in");
  h = attention_block(g, h, pe, *sn.wm, p + ".blk", sn.cfg->heads, sn.cfg->attention_backbone);
  return mlp2(g, h, *sn.wm, p + ".out");
}

// Learned color transform (lossy path): colors -> latents and back.
template <typename S>
typename Graph<S>::Id lossy_analysis(Graph<S>& g, SectionNets<S>& sn, typename Graph<S>::Id pe,
                                     typename Graph<S>::Id colors) {
  const std::string p = sn.spec->prefix + ".at";
  auto h = mlp2(g, colors, *sn.wm, p + ".in");
  h = attention_block(g, h, pe, *sn.wm, p + ".blk", sn.cfg->heads, sn.cfg->attention_backbone);
  return mlp2(g, h, *sn.wm, p + ".out");
}

template <typename S>
typename Graph<S>::Id lossy_synthesis(Graph<S>& g, SectionNets<S>& sn, typename Graph<S>::Id pe,
                                      typename Graph<S>::Id y_hat) {
  const std::string p = sn.spec->prefix + ".st";
  auto h = mlp2(g, y_hat, *sn.wm, p + ".in");
  h = attention_block(g, h, pe, *sn.wm, p + ".blk", sn.cfg->heads, sn.cfg->attention_backbone);
  return mlp2(g, h, *sn.wm, p + ".out");
}

// Division network: per-token lossy/lossless logits (n x 1) from joint
// [color, geometry] value rows; positive logit = lossy.
template <typename S>
typename Graph<S>::Id division_pe(Graph<S>& g, WeightMap<S>& wm, const ArchConfig& cfg,
                                  typename Graph<S>::Id pos_norm) {
  if (cfg.attention_backbone) return dgcnn_positional_encoding(g, pos_norm, wm, "div.pe", cfg.dgcnn_k);
  return mlp_positional_encoding(g, pos_norm, wm, "div.pe");
}

template <typename S>
typename Graph<S>::Id division_logits(Graph<S>& g, WeightMap<S>& wm, const ArchConfig& cfg,
                                      typename Graph<S>::Id pe, typename Graph<S>::Id rows) {
  auto h = mlp2(g, rows, wm, "div.in");
  h = attention_block(g, h, pe, wm, "div.blk", cfg.heads, cfg.attention_backbone);
  return linear(g, h, wm, "div.head");
}

// Distribution parameter rows for one phase, one row per coded token of the
// phase (window order). Output width: subgroup_size * 3K for mixture
// sections ([logit_pi xK | mu xK | log_s xK] per channel), subgroup_size * 2
// for gaussian sections ([mu | log_sigma] per channel).
//
// `masked_values` must hold, for every token, exactly the channels decoded
// before this phase (zeros elsewhere); uncoded tokens listed in `key_full`
// keep their full rows and act as extra attention keys.
template <typename S>
typename Graph<S>::Id phase_param_rows(Graph<S>& g, SectionNets<S>& sn, const PhasePlan& plan, int phase,
                                       typename Graph<S>::Id masked_values, typename Graph<S>::Id psi,
                                       typename Graph<S>::Id pe, const std::vector<uint8_t>& key_full);

// --- rate graphs -------------------------------------------------------------

// Total bits of `x` (continuous, symbol domain) under per-cell logistic
// mixtures. `params` as produced by phase_param_rows (mixture layout), `x`
// of shape (m x channels). The _rows variants return per-token bits (m x 1)
// for losses that weight tokens individually.
template <typename S>
typename Graph<S>::Id mixture_bits_rows(Graph<S>& g, typename Graph<S>::Id params, typename Graph<S>::Id x, int K);
template <typename S>
typename Graph<S>::Id mixture_bits(Graph<S>& g, typename Graph<S>::Id params, typename Graph<S>::Id x, int K);

// Same for discretized gaussians with the sigma floor.
template <typename S>
typename Graph<S>::Id gaussian_bits_rows(Graph<S>& g, typename Graph<S>::Id params, typename Graph<S>::Id x);
template <typename S>
typename Graph<S>::Id gaussian_bits(Graph<S>& g, typename Graph<S>::Id params, typename Graph<S>::Id x);

// Total bits of `x` (m x channels) under the per-channel factorized density
// read from wm at `prefix` (4 softplus layers, width 3, tanh gates).
template <typename S>
typename Graph<S>::Id factorized_bits_rows(Graph<S>& g, WeightMap<S>& wm, const std::string& prefix,
                                           typename Graph<S>::Id x, int channels);
template <typename S>
typename Graph<S>::Id factorized_bits(Graph<S>& g, WeightMap<S>& wm, const std::string& prefix,
                                      typename Graph<S>::Id x, int channels);

// --- codec-side prediction ----------------------------------------------------

// One window's state for coding. `values` starts with coded cells zeroed and
// is filled in place as phases complete; `psi` rows come from the hyper path
// (or the lossy-reconstruction embedding for uncoded rows of mixed windows).
struct WindowState {
  int n = 0;
  Tensor pos_norm;              // n x 3
  Tensor pe;                    // n x feature_width; computed on demand if empty
  Tensor values;                // n x C
  Tensor psi;                   // n x feature_width
  std::vector<uint8_t> coded;   // size n
  std::vector<uint8_t> key_full;  // size n; uncoded rows with valid full values
};

struct CellRef {
  int32_t token;
  int32_t channel;
};

// Per-cell distribution parameters in symbol domain.
struct CellParams {
  LogisticMixtureParams mix;  // mixture sections
  float mu = 0;               // gaussian sections
  float sigma = 1;
};

// Receives one phase's cells and predicted parameters. Encode sinks already
// know `symbols` and must leave them unchanged; decode sinks fill them.
using PhaseFn = std::function<void(int phase, const std::vector<CellRef>& cells,
                                   const std::vector<CellParams>& params, std::vector<int32_t>& symbols)>;

// Runs all phases of one window: per phase builds the parameter graph from
// the current masked values, hands cells to `fn`, then writes the returned
// symbols back as value-domain entries (symbol * step). Shared by encode
// (symbols known up front) and decode (symbols produced by the sink).
//
// `symbols_in` is required for encode sinks (row-major n x C, coded rows
// only are read) and ignored when null.
void predict_window(SectionNets<float>& sn, const PhasePlan& plan, WindowState& w,
                    const std::vector<float>& steps, const std::vector<int32_t>* symbols_in, const PhaseFn& fn);

// FNV-1a hash of the quantized tables a sink builds, one running hash per
// phase; encode and decode streams must agree exactly.
struct PhaseHasher {
  std::vector<uint64_t> hashes;

  void start_phase() { hashes.push_back(Fnv1a().h); }
  void add_table(const CdfTable& t) {
    Fnv1a f;
    f.h = hashes.back();
    for (uint32_t c : t.counts) f.update_pod(c);
    hashes.back() = f.h;
  }
  // For table families selected by a small key (scale level, offset bin,
  // integer base) the key stands in for the table contents.
  void add_ref(int32_t a, int32_t b, int32_t c) {
    Fnv1a f;
    f.h = hashes.back();
    f.update_pod(a);
    f.update_pod(b);
    f.update_pod(c);
    hashes.back() = f.h;
  }
};

}  // namespace lcm
