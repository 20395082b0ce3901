#include "lcm/arch.hpp"

#include <cmath>

#include "lcm/gaussian.hpp"
#include "lcm/weights.hpp"

namespace lcm {

std::vector<int> geometry_subgroups() { return {3, 4, 1}; }
std::vector<int> lossy_subgroups() { return {32, 32, 64}; }
std::vector<int> lossless_subgroups() { return {8, 8, 16, 16}; }

ArchConfig arch_config(uint32_t id) {
  ArchConfig c;
  c.id = id;
  auto toy = [&] {
    c.feature_width = 32;
    c.window_len = 256;
  };
  switch (id) {
    case kArchDefault:
      break;
    case kArchToy:
      toy();
      break;
    case kArchToyNoSpaceCtx:
      toy();
      c.space_ctx = false;
      break;
    case kArchToyNoChannelCtx:
      toy();
      c.channel_ctx = false;
      break;
    case kArchToyRandomOrder:
      toy();
      c.serialization_shuffle_seed = 0x5EED5EEDu;
      break;
    case kArchToyMlpBackbone:
      toy();
      c.attention_backbone = false;
      break;
    default:
      throw InputError("unknown architecture id " + std::to_string(id));
  }
  return c;
}

uint32_t arch_id_for_profile(const std::string& profile) {
  if (profile == "default") return kArchDefault;
  if (profile == "toy") return kArchToy;
  throw InputError("unknown profile '" + profile + "' (expected default or toy)");
}

SectionSpec geom_section() {
  SectionSpec s;
  s.prefix = "geom";
  s.value_channels = kGeomChannels;
  s.sym_channels = kGeomChannels;
  s.hyper_channels = kGeomHyperChannels;
  s.subgroups = geometry_subgroups();
  s.mixture = true;
  return s;
}

SectionSpec lossy_color_section() {
  SectionSpec s;
  s.prefix = "clossy";
  s.value_channels = kLossyLatentChannels;
  s.sym_channels = kLossyLatentChannels;
  s.hyper_channels = kLossyHyperChannels;
  s.subgroups = lossy_subgroups();
  s.mixture = false;
  s.has_transform = true;
  return s;
}

SectionSpec lossless_color_section() {
  SectionSpec s;
  s.prefix = "closs";
  s.value_channels = GaussianCloud::kColorDims;
  s.sym_channels = GaussianCloud::kColorDims;
  s.hyper_channels = kColorHyperChannels;
  s.subgroups = lossless_subgroups();
  s.mixture = true;
  return s;
}

std::vector<float> default_geometry_steps(const ArchConfig& cfg) {
  // [scale x3, rotation x4, opacity] in raw attribute units.
  std::vector<float> s(static_cast<size_t>(kGeomChannels));
  if (cfg.id == kArchDefault) {
    for (int i = 0; i < 3; ++i) s[size_t(i)] = 0.01f;
    for (int i = 3; i < 7; ++i) s[size_t(i)] = 1.0f / 1024.0f;
    s[7] = 0.01f;
  } else {
    for (int i = 0; i < 3; ++i) s[size_t(i)] = 0.04f;
    for (int i = 3; i < 7; ++i) s[size_t(i)] = 1.0f / 64.0f;
    s[7] = 0.08f;
  }
  return s;
}

std::vector<float> default_color_steps(const ArchConfig& cfg) {
  const float step = cfg.id == kArchDefault ? 1.0f / 128.0f : 0.25f;
  return std::vector<float>(size_t(GaussianCloud::kColorDims), step);
}

namespace {

using ShapeMap = std::map<std::string, std::vector<int>>;

void add(ShapeMap& m, const std::string& name, std::vector<int> dims) {
  if (!m.emplace(name, std::move(dims)).second) throw InvariantError("duplicate tensor spec: " + name);
}

void add_linear(ShapeMap& m, const std::string& prefix, int in, int out) {
  add(m, prefix + ".w", {in, out});
  add(m, prefix + ".b", {out});
}

void add_mlp2(ShapeMap& m, const std::string& prefix, int in, int hid, int out) {
  add_linear(m, prefix + ".l0", in, hid);
  add_linear(m, prefix + ".l1", hid, out);
}

void add_block(ShapeMap& m, const std::string& prefix, int width, const ArchConfig& cfg) {
  add(m, prefix + ".ln1.g", {width});
  add(m, prefix + ".ln1.b", {width});
  if (cfg.attention_backbone) {
    for (const char* s : {".attn.q", ".attn.k", ".attn.v", ".attn.o"}) add_linear(m, prefix + s, width, width);
  } else {
    add_mlp2(m, prefix + ".mix", width, width, width);
  }
  add(m, prefix + ".ln2.g", {width});
  add(m, prefix + ".ln2.b", {width});
  add_mlp2(m, prefix + ".ffn", width, width * cfg.ffn_mult, width);
}

void add_pe(ShapeMap& m, const std::string& prefix, int out, const ArchConfig& cfg) {
  if (cfg.attention_backbone) {
    const int h = cfg.dgcnn_hidden;
    add_linear(m, prefix + ".edge0", 6, h);
    add_linear(m, prefix + ".edge1", 2 * h, h);
    add_linear(m, prefix + ".edge2", 2 * h, h);
    add_linear(m, prefix + ".proj", 2 * h, out);
  } else {
    add_mlp2(m, prefix + ".pos", 3, out, out);
  }
}

void add_factorized(ShapeMap& m, const std::string& prefix, int channels) {
  add(m, prefix + ".h0", {channels, 3});
  add(m, prefix + ".b0", {channels, 3});
  add(m, prefix + ".a0", {channels, 3});
  add(m, prefix + ".h1", {channels, 9});
  add(m, prefix + ".b1", {channels, 3});
  add(m, prefix + ".a1", {channels, 3});
  add(m, prefix + ".h2", {channels, 9});
  add(m, prefix + ".b2", {channels, 3});
  add(m, prefix + ".a2", {channels, 3});
  add(m, prefix + ".h3", {channels, 3});
  add(m, prefix + ".b3", {channels, 1});
}

void add_section(ShapeMap& m, const SectionSpec& sec, const ArchConfig& cfg) {
  const int cf = cfg.feature_width;
  add_pe(m, sec.prefix + ".pe", cf, cfg);
  if (sec.has_transform) {
    add_mlp2(m, sec.prefix + ".at.in", GaussianCloud::kColorDims, cf, cf);
    add_block(m, sec.prefix + ".at.blk", cf, cfg);
    add_mlp2(m, sec.prefix + ".at.out", cf, cf, sec.sym_channels);
    add_mlp2(m, sec.prefix + ".st.in", sec.sym_channels, cf, cf);
    add_block(m, sec.prefix + ".st.blk", cf, cfg);
    add_mlp2(m, sec.prefix + ".st.out", cf, cf, GaussianCloud::kColorDims);
  }
  add_mlp2(m, sec.prefix + ".ht.in", sec.value_channels, cf, cf);
  add_block(m, sec.prefix + ".ht.blk", cf, cfg);
  add_mlp2(m, sec.prefix + ".ht.out", cf, cf, sec.hyper_channels);
  add_mlp2(m, sec.prefix + ".hs.in", sec.hyper_channels, cf, cf);
  add_block(m, sec.prefix + ".hs.blk", cf, cfg);
  add_mlp2(m, sec.prefix + ".hs.out", cf, cf, cf);
  add_factorized(m, sec.prefix + ".fz", sec.hyper_channels);

  if (cfg.channel_ctx) {
    add(m, sec.prefix + ".nullch", {1, cf});
    add_mlp2(m, sec.prefix + ".chctx", sec.sym_channels, cf, cf);
  }
  if (cfg.space_ctx) {
    add_mlp2(m, sec.prefix + ".spemb", sec.sym_channels, cf, cf);
    if (cfg.attention_backbone) {
      for (const char* s : {".spattn.q", ".spattn.k", ".spattn.v", ".spattn.o"}) add_linear(m, sec.prefix + s, cf, cf);
    } else {
      add_mlp2(m, sec.prefix + ".spmix", cf, cf, cf);
    }
  }
  add_mlp2(m, sec.prefix + ".fuse", 3 * cf, cf, cf);
  const int per_channel = sec.mixture ? 3 * cfg.mixture_k : 2;
  for (size_t gi = 0; gi < sec.subgroups.size(); ++gi)
    add_mlp2(m, sec.prefix + ".head" + std::to_string(gi), cf, cf, sec.subgroups[gi] * per_channel);
}

}  // namespace

std::map<std::string, std::vector<int>> weight_shapes(const ArchConfig& cfg) {
  ShapeMap m;
  add(m, "meta.arch", {1});
  add(m, "geom.steps", {kGeomChannels});
  add(m, "closs.steps", {GaussianCloud::kColorDims});
  add_section(m, geom_section(), cfg);
  add_section(m, lossy_color_section(), cfg);
  add_section(m, lossless_color_section(), cfg);
  // Mixed color windows: reconstructed lossy rows enter the lossless context
  // through this embedding in place of a hyper feature.
  add_mlp2(m, "closs.lembed", GaussianCloud::kColorDims, cfg.feature_width, cfg.feature_width);
  // Division network: per-token lossy/lossless logits from the joint
  // geometry+color rows, attention at fixed width 128.
  const int dw = 128;
  add_pe(m, "div.pe", dw, cfg);
  add_mlp2(m, "div.in", GaussianCloud::kColorDims + kGeomChannels, dw, dw);
  add_block(m, "div.blk", dw, cfg);
  add_linear(m, "div.head", dw, 1);
  return m;
}

namespace {

bool ends_with(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

bool contains(const std::string& s, const std::string& sub) { return s.find(sub) != std::string::npos; }

void fill_normal(Tensor& t, Rng& rng, double stddev) {
  for (float& v : t.v) v = float(rng.normal() * stddev);
}

// Head output layout over a subgroup of C channels (channel-major blocks):
//   mixture:  [logit_pi (C*K) | mu (C*K) | log_s (C*K)], K per channel
//   gaussian: [mu (C) | log_sigma (C)]
// Final head layers start at zero weights; the bias carries the prior
// (component means spread over {-2, 0, 2} symbols, scales 5 resp. 2).
void head_bias(Tensor& b, bool mixture, int k) {
  if (mixture) {
    const int ck = b.dim[0] / 3;
    const int channels = ck / k;
    for (int c = 0; c < channels; ++c) {
      for (int i = 0; i < k; ++i) {
        b.v[size_t(c * k + i)] = 0.0f;
        b.v[size_t(ck + c * k + i)] = 2.0f * (float(i) - float(k - 1) / 2.0f);
        b.v[size_t(2 * ck + c * k + i)] = std::log(5.0f);
      }
    }
  } else {
    const int channels = b.dim[0] / 2;
    for (int c = 0; c < channels; ++c) {
      b.v[size_t(c)] = 0.0f;
      b.v[size_t(channels + c)] = std::log(2.0f);
    }
  }
}

// Factorized density init: layer scales follow a geometric schedule so the
// initial CDF is a smooth unimodal sigmoid over roughly [-10, 10].
void factorized_init(WeightMap<float>& wm, const std::string& prefix, int channels, Rng& rng) {
  const double init_scale = 10.0;
  const double scale = std::pow(init_scale, 1.0 / 4.0);
  const int fan_out[4] = {3, 3, 3, 1};
  const char* hn[4] = {".h0", ".h1", ".h2", ".h3"};
  const char* bn[4] = {".b0", ".b1", ".b2", ".b3"};
  const char* an[3] = {".a0", ".a1", ".a2"};
  for (int l = 0; l < 4; ++l) {
    const double hval = std::log(std::expm1(1.0 / scale / double(fan_out[l])));
    Tensor& h = wm.tensors.at(prefix + hn[l]);
    std::fill(h.v.begin(), h.v.end(), float(hval));
    Tensor& b = wm.tensors.at(prefix + bn[l]);
    for (float& v : b.v) v = float(rng.uniform(-0.5, 0.5));
    (void)channels;
  }
  for (int l = 0; l < 3; ++l) {
    Tensor& a = wm.tensors.at(prefix + an[l]);
    std::fill(a.v.begin(), a.v.end(), 0.0f);
  }
}

}  // namespace

WeightMap<float> init_weights(const ArchConfig& cfg, uint64_t seed) {
  const ShapeMap shapes = weight_shapes(cfg);
  WeightMap<float> wm;
  Rng root(seed ^ 0x9E3779B97F4A7C15ull);

  for (const auto& [name, dims] : shapes) {
    Tensor t;
    t.rank = int(dims.size());
    size_t numel = 1;
    for (size_t d = 0; d < dims.size(); ++d) {
      t.dim[d] = dims[d];
      numel *= size_t(dims[d]);
    }
    t.v.assign(numel, 0.0f);
    wm.tensors.emplace(name, std::move(t));
  }

  for (auto& [name, t] : wm.tensors) {
    Fnv1a h;
    h.update(name.data(), name.size());
    Rng rng = root.fork(h.h);

    if (name == "meta.arch") {
      t.v[0] = float(cfg.id);
    } else if (name == "geom.steps") {
      t.v = default_geometry_steps(cfg);
    } else if (name == "closs.steps") {
      t.v = default_color_steps(cfg);
    } else if (contains(name, ".fz.")) {
      continue;  // handled below, per density
    } else if (ends_with(name, ".ln1.g") || ends_with(name, ".ln2.g")) {
      std::fill(t.v.begin(), t.v.end(), 1.0f);
    } else if (name == "geom.nullch" || name == "clossy.nullch" || name == "closs.nullch") {
      fill_normal(t, rng, 0.02);
    } else if (ends_with(name, ".w")) {
      const int fan_in = t.dim[0];
      const int fan_out = t.dim[1];
      const bool head_final = (contains(name, ".head") && ends_with(name, ".l1.w")) || name == "div.head.w";
      const bool relu_next = ends_with(name, ".l0.w") || contains(name, ".edge");
      if (head_final) {
        std::fill(t.v.begin(), t.v.end(), 0.0f);
      } else if (relu_next) {
        fill_normal(t, rng, std::sqrt(2.0 / double(fan_in)));
      } else {
        fill_normal(t, rng, std::sqrt(2.0 / double(fan_in + fan_out)));
      }
    } else if (ends_with(name, ".b")) {
      const bool head_final = contains(name, ".head") && ends_with(name, ".l1.b");
      if (head_final) {
        const bool mixture = !contains(name, "clossy.head");
        head_bias(t, mixture, cfg.mixture_k);
      }
      // all other biases (incl. div.head.b and LN betas) stay zero
    }
  }

  for (const SectionSpec& sec : {geom_section(), lossy_color_section(), lossless_color_section()}) {
    Fnv1a h;
    const std::string fp = sec.prefix + ".fz";
    h.update(fp.data(), fp.size());
    Rng rng = root.fork(h.h);
    factorized_init(wm, fp, sec.hyper_channels, rng);
  }
  return wm;
}

void validate_weights(const WeightMap<float>& wm, const ArchConfig& cfg) {
  const ShapeMap shapes = weight_shapes(cfg);
  for (const auto& [name, dims] : shapes) {
    auto it = wm.tensors.find(name);
    if (it == wm.tensors.end()) throw InvariantError("weights missing tensor " + name);
    const Tensor& t = it->second;
    bool ok = t.rank == int(dims.size());
    for (size_t d = 0; ok && d < dims.size(); ++d) ok = t.dim[d] == dims[d];
    if (!ok) throw InvariantError("weights tensor " + name + " has shape " + t.shape_str());
  }
  for (const auto& [name, t] : wm.tensors) {
    (void)t;
    if (shapes.find(name) == shapes.end()) throw InvariantError("weights have unknown tensor " + name);
  }
  if (get_arch_id(wm) != cfg.id) throw InvariantError("weights architecture id mismatch");
}

}  // namespace lcm
