#include "lcm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "lcm/bytes.hpp"
#include "lcm/morton.hpp"
#include "lcm/weights.hpp"

namespace lcm {

// --- coding tables ------------------------------------------------------------

MixtureTable build_mixture_table(const LogisticMixtureParams& p, int32_t cmin, int32_t cmax, int half_width) {
  if (cmin > cmax) throw InvariantError("mixture table: empty channel support");
  MixtureTable t;
  t.cmin = cmin;
  t.cmax = cmax;
  double wmax = p.logit_pi[0], mean = 0, wsum = 0;
  for (int k = 1; k < kMixtureK; ++k) wmax = std::max(wmax, double(p.logit_pi[size_t(k)]));
  for (int k = 0; k < kMixtureK; ++k) {
    double w = std::exp(double(p.logit_pi[size_t(k)]) - wmax);
    wsum += w;
    mean += w * double(p.mu[size_t(k)]);
  }
  mean /= wsum;
  int64_t center = int64_t(round_even(mean));
  center = std::max<int64_t>(cmin, std::min<int64_t>(cmax, center));
  t.lo = int32_t(std::max<int64_t>(cmin, center - half_width));
  t.hi = int32_t(std::min<int64_t>(cmax, center + half_width));
  t.esc_left = t.lo > cmin;
  t.esc_right = t.hi < cmax;

  std::vector<double> pmf;
  pmf.reserve(size_t(t.hi - t.lo + 1) + 2);
  if (t.esc_left) pmf.push_back(std::max(0.0, logistic_mixture_cdf(p, double(t.lo) - 0.5)));
  for (int32_t s = t.lo; s <= t.hi; ++s) pmf.push_back(logistic_mixture_pmf(p, s, 1.0));
  if (t.esc_right) pmf.push_back(std::max(0.0, 1.0 - logistic_mixture_cdf(p, double(t.hi) + 0.5)));
  t.table = build_cdf_table(pmf);
  return t;
}

namespace {

// Residuals escaping the mixture window are coded as fixed-width binary.
int residual_digits(int64_t width) {
  int d = 0;
  while ((int64_t(1) << d) < width) ++d;
  return d;
}

void encode_bits(RangeEncoder& enc, int64_t value, int digits) {
  for (int i = digits - 1; i >= 0; --i) {
    uint32_t b = (value >> i) & 1;
    enc.encode(b ? kProbTotal / 2 : 0, kProbTotal / 2);
  }
}

int64_t decode_bits(RangeDecoder& dec, int digits) {
  int64_t v = 0;
  for (int i = 0; i < digits; ++i) {
    uint32_t dv = dec.decode_cum();
    uint32_t b = dv >= kProbTotal / 2 ? 1 : 0;
    dec.consume(b ? kProbTotal / 2 : 0, kProbTotal / 2);
    v = (v << 1) | b;
  }
  return v;
}

}  // namespace

void encode_mixture_symbol(RangeEncoder& enc, const MixtureTable& t, int32_t sym) {
  if (sym < t.cmin || sym > t.cmax) throw InvariantError("symbol outside channel support");
  if (sym < t.lo) {
    enc.encode_symbol(t.table, 0);
    const int64_t width = int64_t(t.lo) - t.cmin;
    encode_bits(enc, sym - t.cmin, residual_digits(width));
  } else if (sym > t.hi) {
    enc.encode_symbol(t.table, int32_t(t.table.size()) - 1);
    const int64_t width = int64_t(t.cmax) - t.hi;
    encode_bits(enc, sym - t.hi - 1, residual_digits(width));
  } else {
    enc.encode_symbol(t.table, (t.esc_left ? 1 : 0) + (sym - t.lo));
  }
}

int32_t decode_mixture_symbol(RangeDecoder& dec, const MixtureTable& t) {
  const int32_t slot = dec.decode_symbol(t.table);
  const int32_t first = t.esc_left ? 1 : 0;
  const int32_t span = t.hi - t.lo + 1;
  if (t.esc_left && slot == 0) {
    const int64_t width = int64_t(t.lo) - t.cmin;
    const int64_t r = decode_bits(dec, residual_digits(width));
    if (r >= width) throw CorruptStreamError("escape residual out of range");
    return int32_t(t.cmin + r);
  }
  if (t.esc_right && slot == first + span) {
    const int64_t width = int64_t(t.cmax) - t.hi;
    const int64_t r = decode_bits(dec, residual_digits(width));
    if (r >= width) throw CorruptStreamError("escape residual out of range");
    return int32_t(t.hi + 1 + r);
  }
  return t.lo + (slot - first);
}

// Codelength of one mixture-coded symbol under its table (escape digits
// count as whole bits).
static double mixture_symbol_bits(const MixtureTable& t, int32_t sym) {
  if (sym < t.lo) return slot_bits(t.table, 0) + residual_digits(int64_t(t.lo) - t.cmin);
  if (sym > t.hi)
    return slot_bits(t.table, int32_t(t.table.size()) - 1) + residual_digits(int64_t(t.cmax) - t.hi);
  return slot_bits(t.table, (t.esc_left ? 1 : 0) + (sym - t.lo));
}

GaussianTables::GaussianTables(int32_t R) : R_(R) {
  if (R < 0 || R > 32000) throw InvariantError("gaussian residual radius out of range");
}

int GaussianTables::sigma_level(double sigma) {
  const double s = std::max(sigma, kSigmaMin);
  const double t = std::log(s / kSigmaMin) / std::log(256.0 / kSigmaMin) * 63.0;
  return std::max(0, std::min(63, int(std::lround(t))));
}

double GaussianTables::level_sigma(int level) {
  return kSigmaMin * std::exp(double(level) / 63.0 * std::log(256.0 / kSigmaMin));
}

int GaussianTables::offset_bin(double frac) {
  return std::max(0, std::min(3, int(std::floor((frac + 0.5) * 4.0))));
}

double GaussianTables::bin_offset(int bin) { return -0.375 + 0.25 * double(bin); }

const CdfTable& GaussianTables::table(int level, int bin) {
  auto& slot = cache_[size_t(level * 4 + bin)];
  if (!slot) {
    std::vector<double> pmf;
    pmf.reserve(size_t(2 * R_ + 1));
    const double mu = bin_offset(bin);
    const double sigma = level_sigma(level);
    for (int32_t s = -R_; s <= R_; ++s) pmf.push_back(discretized_gaussian_pmf(mu, sigma, s, 1.0));
    slot = std::make_unique<CdfTable>(build_cdf_table(pmf));
  }
  return *slot;
}

std::vector<CdfTable> factorized_tables(const WeightMap<float>& wm, const std::string& prefix, int channels,
                                        const std::vector<int32_t>& support_min,
                                        const std::vector<int32_t>& support_max) {
  const std::vector<FactorizedChannel> fc = factorized_channels(wm, prefix, channels);
  std::vector<CdfTable> out(static_cast<size_t>(channels));
  for (int c = 0; c < channels; ++c) {
    if (support_min[size_t(c)] > support_max[size_t(c)]) continue;  // channel never coded
    std::vector<double> pmf;
    pmf.reserve(size_t(support_max[size_t(c)] - support_min[size_t(c)] + 1));
    for (int32_t s = support_min[size_t(c)]; s <= support_max[size_t(c)]; ++s)
      pmf.push_back(fc[size_t(c)].pmf(s));
    out[size_t(c)] = build_cdf_table(pmf);
  }
  return out;
}

// --- container header -----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'L', 'C', 'M', '1'};

struct Range32 {
  int32_t lo = 0;
  int32_t hi = -1;
};

struct Supports {
  std::vector<Range32> geom_sym;    // 8
  std::vector<Range32> geom_hyp;    // 8
  std::vector<Range32> lossy_hyp;   // 32
  std::vector<Range32> closs_sym;   // 48
  std::vector<Range32> closs_hyp;   // 48

  Supports()
      : geom_sym(8), geom_hyp(8), lossy_hyp(32), closs_sym(GaussianCloud::kColorDims),
        closs_hyp(GaussianCloud::kColorDims) {}
};

void scan_range(std::vector<Range32>& r, size_t c, int32_t v) {
  if (r[c].lo > r[c].hi) {
    r[c].lo = r[c].hi = v;
  } else {
    r[c].lo = std::min(r[c].lo, v);
    r[c].hi = std::max(r[c].hi, v);
  }
}

std::vector<int32_t> mins_of(const std::vector<Range32>& r) {
  std::vector<int32_t> v(r.size());
  for (size_t i = 0; i < r.size(); ++i) v[i] = r[i].lo;
  return v;
}
std::vector<int32_t> maxs_of(const std::vector<Range32>& r) {
  std::vector<int32_t> v(r.size());
  for (size_t i = 0; i < r.size(); ++i) v[i] = r[i].hi;
  return v;
}

struct Header {
  uint8_t profile_flags = 0;
  int position_bits = 16;
  int64_t n = 0;
  uint32_t window_len = 0;
  PositionQuant quant;
  std::vector<float> geom_steps;   // 8
  std::vector<float> color_steps;  // 48
  Supports supports;
  uint32_t arch_id = 0;
};

struct SectionEntry {
  uint8_t id = 0;
  uint64_t offset = 0;
  uint64_t length = 0;
  uint32_t crc = 0;
};

void put_ranges(ByteWriter& w, const std::vector<Range32>& r) {
  for (const Range32& x : r) {
    w.put_u32(uint32_t(x.lo));
    w.put_u32(uint32_t(x.hi));
  }
}

void get_ranges(ByteReader& r, std::vector<Range32>& out) {
  for (Range32& x : out) {
    x.lo = int32_t(r.get_u32());
    x.hi = int32_t(r.get_u32());
  }
}

std::vector<uint8_t> write_header(const Header& h, const std::vector<SectionEntry>& sections) {
  ByteWriter w;
  w.put_bytes(kMagic, 4);
  w.put_u16(kContainerVersion);
  w.put_u8(h.profile_flags);
  w.put_u8(uint8_t(h.position_bits));
  w.put_u64(uint64_t(h.n));
  w.put_u32(h.window_len);
  for (int a = 0; a < 3; ++a) w.put_f64(h.quant.bbox_min[size_t(a)]);
  for (int a = 0; a < 3; ++a) w.put_f64(h.quant.bbox_max[size_t(a)]);
  for (float s : h.geom_steps) w.put_f32(s);
  for (float s : h.color_steps) w.put_f32(s);
  put_ranges(w, h.supports.geom_sym);
  put_ranges(w, h.supports.geom_hyp);
  put_ranges(w, h.supports.lossy_hyp);
  put_ranges(w, h.supports.closs_sym);
  put_ranges(w, h.supports.closs_hyp);
  w.put_u32(h.arch_id);
  w.put_u8(uint8_t(sections.size()));
  for (const SectionEntry& s : sections) {
    w.put_u8(s.id);
    w.put_u64(s.offset);
    w.put_u64(s.length);
    w.put_u32(s.crc);
  }
  return w.take();
}

Header read_header(ByteReader& r, std::vector<SectionEntry>& sections) {
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw CorruptStreamError("not a compressed splat container");
  const uint16_t version = r.get_u16();
  if (version != kContainerVersion)
    throw CorruptStreamError("unsupported container version " + std::to_string(version));
  Header h;
  h.profile_flags = r.get_u8();
  h.position_bits = r.get_u8();
  if (h.position_bits < 1 || h.position_bits > 21) throw CorruptStreamError("position bits out of range");
  h.n = int64_t(r.get_u64());
  if (h.n < 0 || h.n > (int64_t(1) << 40)) throw CorruptStreamError("element count out of range");
  h.window_len = r.get_u32();
  if (h.window_len < 1) throw CorruptStreamError("window length out of range");
  h.quant.bits = h.position_bits;
  for (int a = 0; a < 3; ++a) h.quant.bbox_min[size_t(a)] = r.get_f64();
  for (int a = 0; a < 3; ++a) h.quant.bbox_max[size_t(a)] = r.get_f64();
  for (int a = 0; a < 3; ++a) {
    if (!std::isfinite(h.quant.bbox_min[size_t(a)]) || !std::isfinite(h.quant.bbox_max[size_t(a)]) ||
        !(h.quant.bbox_min[size_t(a)] < h.quant.bbox_max[size_t(a)]))
      throw CorruptStreamError("degenerate bounding box");
  }
  h.geom_steps.resize(size_t(kGeomChannels));
  for (float& s : h.geom_steps) s = r.get_f32();
  h.color_steps.resize(size_t(GaussianCloud::kColorDims));
  for (float& s : h.color_steps) s = r.get_f32();
  for (float s : h.geom_steps)
    if (!(s > 0) || !std::isfinite(s)) throw CorruptStreamError("invalid geometry step");
  for (float s : h.color_steps)
    if (!(s > 0) || !std::isfinite(s)) throw CorruptStreamError("invalid color step");
  get_ranges(r, h.supports.geom_sym);
  get_ranges(r, h.supports.geom_hyp);
  get_ranges(r, h.supports.lossy_hyp);
  get_ranges(r, h.supports.closs_sym);
  get_ranges(r, h.supports.closs_hyp);
  h.arch_id = r.get_u32();
  const uint8_t count = r.get_u8();
  if (count != kSectionCount) throw CorruptStreamError("unexpected section count");
  sections.resize(count);
  for (SectionEntry& s : sections) {
    s.id = r.get_u8();
    s.offset = r.get_u64();
    s.length = r.get_u64();
    s.crc = r.get_u32();
  }
  return h;
}

void put_varint(ByteWriter& w, uint64_t v) {
  while (v >= 0x80) {
    w.put_u8(uint8_t(v) | 0x80);
    v >>= 7;
  }
  w.put_u8(uint8_t(v));
}

uint64_t get_varint(ByteReader& r) {
  uint64_t v = 0;
  int shift = 0;
  while (true) {
    const uint8_t b = r.get_u8();
    v |= uint64_t(b & 0x7F) << shift;
    if ((b & 0x80) == 0) return v;
    shift += 7;
    if (shift > 63) throw CorruptStreamError("varint exceeds 64 bits");
  }
}

std::vector<uint8_t> pack_chunks(const std::vector<uint8_t>& prefix, const std::vector<std::vector<uint8_t>>& chunks) {
  ByteWriter w;
  w.put_bytes(prefix.data(), prefix.size());
  w.put_u32(uint32_t(chunks.size()));
  for (const auto& c : chunks) {
    if (c.size() > 0xFFFFFFFFull) throw InvariantError("chunk too large");
    w.put_u32(uint32_t(c.size()));
  }
  for (const auto& c : chunks) w.put_bytes(c.data(), c.size());
  return w.take();
}

// Chunk views into a section payload after the fixed prefix.
std::vector<std::pair<const uint8_t*, size_t>> unpack_chunks(const uint8_t* data, size_t size, size_t prefix) {
  ByteReader r(data, size);
  r.seek(prefix);
  const uint32_t count = r.get_u32();
  if (count > (1u << 26)) throw CorruptStreamError("chunk count out of range");
  std::vector<uint32_t> lens(count);
  uint64_t total = 0;
  for (uint32_t i = 0; i < count; ++i) {
    lens[i] = r.get_u32();
    total += lens[i];
  }
  if (r.pos() + total != size) throw CorruptStreamError("chunk lengths do not match section size");
  std::vector<std::pair<const uint8_t*, size_t>> out(count);
  size_t off = r.pos();
  for (uint32_t i = 0; i < count; ++i) {
    out[i] = {data + off, lens[i]};
    off += lens[i];
  }
  return out;
}

// --- window bookkeeping ---------------------------------------------------------

// Coding-order token lists per window. `subset` maps subset rank -> coding
// index (empty = identity over [0, n)).
std::vector<std::vector<int64_t>> window_token_lists(int64_t count, int32_t window_len,
                                                     const std::vector<int64_t>* subset) {
  std::vector<std::vector<int64_t>> out;
  const std::vector<int32_t> lens = partition_windows(count, window_len);
  int64_t at = 0;
  for (int32_t len : lens) {
    std::vector<int64_t> toks(static_cast<size_t>(len));
    for (int32_t i = 0; i < len; ++i) toks[size_t(i)] = subset ? (*subset)[size_t(at + i)] : at + i;
    out.push_back(std::move(toks));
    at += len;
  }
  return out;
}

Tensor window_pos_norm(const std::vector<uint32_t>& grid, const std::vector<int64_t>& toks, int bits) {
  Tensor t = Tensor::zeros2(int(toks.size()), 3);
  const double half = double(uint64_t(1) << (bits - 1));
  for (size_t i = 0; i < toks.size(); ++i)
    for (int a = 0; a < 3; ++a) t.at(int(i), a) = float(double(grid[size_t(toks[i]) * 3 + size_t(a)]) / half - 1.0);
  return t;
}

Tensor gather_rows_tensor(const std::vector<float>& src, int stride, const std::vector<int64_t>& toks) {
  Tensor t = Tensor::zeros2(int(toks.size()), stride);
  for (size_t i = 0; i < toks.size(); ++i)
    std::memcpy(&t.at(int(i), 0), &src[size_t(toks[i]) * size_t(stride)], sizeof(float) * size_t(stride));
  return t;
}

// --- coding sinks ----------------------------------------------------------------

struct SinkStats {
  double bits = 0;
  int64_t symbols = 0;
};

// Encode sink for mixture sections; hashes every quantized table.
PhaseFn mixture_encode_sink(RangeEncoder& enc, const std::vector<Range32>& sup, PhaseHasher& hash, SinkStats& st) {
  return [&enc, &sup, &hash, &st](int, const std::vector<CellRef>& cells, const std::vector<CellParams>& params,
                                  std::vector<int32_t>& syms) {
    hash.start_phase();
    for (size_t i = 0; i < cells.size(); ++i) {
      const Range32& r = sup[size_t(cells[i].channel)];
      const MixtureTable t = build_mixture_table(params[i].mix, r.lo, r.hi, kMixtureHalfWidth);
      hash.add_table(t.table);
      encode_mixture_symbol(enc, t, syms[i]);
      st.bits += mixture_symbol_bits(t, syms[i]);
      ++st.symbols;
    }
  };
}

PhaseFn mixture_decode_sink(RangeDecoder& dec, const std::vector<Range32>& sup, PhaseHasher& hash) {
  return [&dec, &sup, &hash](int, const std::vector<CellRef>& cells, const std::vector<CellParams>& params,
                             std::vector<int32_t>& syms) {
    hash.start_phase();
    for (size_t i = 0; i < cells.size(); ++i) {
      const Range32& r = sup[size_t(cells[i].channel)];
      if (r.lo > r.hi) throw CorruptStreamError("coded channel has empty header support");
      const MixtureTable t = build_mixture_table(params[i].mix, r.lo, r.hi, kMixtureHalfWidth);
      hash.add_table(t.table);
      syms[i] = decode_mixture_symbol(dec, t);
    }
  };
}

// Gaussian phases record parameters on a scan pass (also yielding the
// residual radius), then encode from the records without re-running the
// model.
struct GaussianRecord {
  std::vector<std::vector<CellRef>> cells;
  std::vector<std::vector<CellParams>> params;
  std::vector<std::vector<int32_t>> syms;
  int32_t radius = 0;
};

PhaseFn gaussian_scan_sink(GaussianRecord& rec) {
  return [&rec](int, const std::vector<CellRef>& cells, const std::vector<CellParams>& params,
                std::vector<int32_t>& syms) {
    for (size_t i = 0; i < cells.size(); ++i) {
      const int64_t base = int64_t(round_even(double(params[i].mu)));
      const int64_t r = std::llabs(int64_t(syms[i]) - base);
      rec.radius = std::max(rec.radius, int32_t(std::min<int64_t>(r, 32000)));
      if (r > 32000) throw InvariantError("lossy latent residual out of range");
    }
    rec.cells.push_back(cells);
    rec.params.push_back(params);
    rec.syms.push_back(syms);
  };
}

void gaussian_encode_recorded(RangeEncoder& enc, const GaussianRecord& rec, GaussianTables& tables,
                              PhaseHasher& hash, SinkStats& st) {
  for (size_t p = 0; p < rec.cells.size(); ++p) {
    hash.start_phase();
    for (size_t i = 0; i < rec.cells[p].size(); ++i) {
      const CellParams& cp = rec.params[p][i];
      const int64_t base = int64_t(round_even(double(cp.mu)));
      const int level = GaussianTables::sigma_level(double(cp.sigma));
      const int bin = GaussianTables::offset_bin(double(cp.mu) - double(base));
      const CdfTable& t = tables.table(level, bin);
      const int32_t slot = int32_t(int64_t(rec.syms[p][i]) - base + tables.radius());
      if (slot < 0 || size_t(slot) >= t.size()) throw InvariantError("lossy latent slot out of range");
      hash.add_ref(int32_t(level), int32_t(bin), int32_t(base));
      enc.encode_symbol(t, slot);
      st.bits += slot_bits(t, slot);
      ++st.symbols;
    }
  }
}

PhaseFn gaussian_decode_sink(RangeDecoder& dec, GaussianTables& tables, PhaseHasher& hash) {
  return [&dec, &tables, &hash](int, const std::vector<CellRef>& cells, const std::vector<CellParams>& params,
                                std::vector<int32_t>& syms) {
    hash.start_phase();
    for (size_t i = 0; i < cells.size(); ++i) {
      const CellParams& cp = params[i];
      const int64_t base = int64_t(round_even(double(cp.mu)));
      const int level = GaussianTables::sigma_level(double(cp.sigma));
      const int bin = GaussianTables::offset_bin(double(cp.mu) - double(base));
      const CdfTable& t = tables.table(level, bin);
      hash.add_ref(int32_t(level), int32_t(bin), int32_t(base));
      const int32_t slot = dec.decode_symbol(t);
      syms[i] = int32_t(base + int64_t(slot) - tables.radius());
    }
  };
}

// Factorized hyper coding, token-major.
void encode_factorized(RangeEncoder& enc, const std::vector<CdfTable>& tables, const std::vector<Range32>& sup,
                       const std::vector<int32_t>& syms, int channels, SinkStats& st) {
  const int64_t tokens = int64_t(syms.size()) / channels;
  for (int64_t t = 0; t < tokens; ++t) {
    for (int c = 0; c < channels; ++c) {
      const int32_t sym = syms[size_t(t * channels + c)];
      const int32_t slot = sym - sup[size_t(c)].lo;
      const CdfTable& tab = tables[size_t(c)];
      if (slot < 0 || size_t(slot) >= tab.size()) throw InvariantError("hyper symbol outside header support");
      enc.encode_symbol(tab, slot);
      st.bits += slot_bits(tab, slot);
      ++st.symbols;
    }
  }
}

void decode_factorized(RangeDecoder& dec, const std::vector<CdfTable>& tables, const std::vector<Range32>& sup,
                       std::vector<int32_t>& syms, int channels, int64_t tokens) {
  syms.resize(size_t(tokens * channels));
  for (int64_t t = 0; t < tokens; ++t)
    for (int c = 0; c < channels; ++c)
      syms[size_t(t * channels + c)] = sup[size_t(c)].lo + dec.decode_symbol(tables[size_t(c)]);
}

// --- shared model passes ---------------------------------------------------------

// Quantized hyper latents and the features their dequantized values produce.
struct HyperResult {
  std::vector<int32_t> syms;  // tokens x hyper_channels
  Tensor psi;                 // tokens x feature_width
};

HyperResult hyper_forward(SectionNets<float>& sn, const Tensor& pe, const Tensor& values) {
  Graph<float> g(false);
  auto pev = g.constant(pe);
  auto u = hyper_analysis(g, sn, pev, g.constant(values));
  const Tensor& uv = g.val(u);
  HyperResult r;
  r.syms.resize(uv.v.size());
  Tensor uq = uv;
  for (size_t i = 0; i < uv.v.size(); ++i) {
    r.syms[i] = int32_t(round_even(double(uv.v[i])));
    uq.v[i] = float(r.syms[i]);
  }
  r.psi = g.val(hyper_synthesis(g, sn, pev, g.constant(uq)));
  return r;
}

Tensor hyper_features_from_syms(SectionNets<float>& sn, const Tensor& pe, const std::vector<int32_t>& syms,
                                int channels) {
  const int tokens = int(int64_t(syms.size()) / channels);
  Tensor u = Tensor::zeros2(tokens, channels);
  for (size_t i = 0; i < syms.size(); ++i) u.v[i] = float(syms[i]);
  Graph<float> g(false);
  return g.val(hyper_synthesis(g, sn, g.constant(pe), g.constant(u)));
}

Tensor section_pe_tensor(SectionNets<float>& sn, const Tensor& pos_norm) {
  Graph<float> g(false);
  return g.val(section_pe(g, sn, g.constant(pos_norm)));
}

}  // namespace

// --- encode ----------------------------------------------------------------------

std::vector<uint8_t> compress(const GaussianCloud& cloud, WeightMap<float>& wm, const EncodeOptions& opt,
                              EncodeStats* stats) {
  if (cloud.n < 1) throw InputError("empty point cloud");
  if (opt.force_lossless && opt.force_lossy) throw InputError("conflicting division overrides");
  const ArchConfig cfg = arch_config(get_arch_id(wm));
  validate_weights(wm, cfg);
  const bool was_training = wm.training;
  wm.training = false;

  const int threads = resolve_threads(opt.threads);
  const int bits = opt.position_bits > 0 ? opt.position_bits : cfg.position_bits;
  const int32_t L = opt.window_len > 0 ? int32_t(opt.window_len) : int32_t(cfg.window_len);
  if (bits < 1 || bits > 21) throw InputError("position bits out of range [1, 21]");
  if (L < 2) throw InputError("window length must be at least 2");

  Header h;
  h.position_bits = bits;
  h.n = cloud.n;
  h.window_len = uint32_t(L);
  h.arch_id = cfg.id;
  h.profile_flags = (opt.force_lossless ? kProfileForcedLossless : 0) | (opt.force_lossy ? kProfileForcedLossy : 0);
  h.quant = make_position_quant(cloud, bits);
  h.geom_steps = wm.get("geom.steps").v;
  h.color_steps = wm.get("closs.steps").v;

  // 1. serialize: quantize positions, sort by interleaved code.
  int64_t clamped = 0;
  const std::vector<uint32_t> grid_orig = quantize_positions(cloud.positions.data(), cloud.n, h.quant, &clamped);
  std::vector<int64_t> order = serialize_order(grid_orig, bits);
  std::vector<uint64_t> codes_sorted(static_cast<size_t>(cloud.n));
  for (int64_t i = 0; i < cloud.n; ++i) {
    const int64_t src = order[size_t(i)];
    codes_sorted[size_t(i)] =
        morton_code(grid_orig[size_t(src) * 3], grid_orig[size_t(src) * 3 + 1], grid_orig[size_t(src) * 3 + 2], bits);
  }
  if (cfg.serialization_shuffle_seed != 0) {
    // ablation: seeded shuffle of the coding order (positions stay sorted)
    Rng rng(cfg.serialization_shuffle_seed ^ uint64_t(cloud.n) * 0x9E3779B97F4A7C15ull);
    for (int64_t i = cloud.n - 1; i > 0; --i) {
      const int64_t j = int64_t(rng.below(uint64_t(i) + 1));
      std::swap(order[size_t(i)], order[size_t(j)]);
    }
  }
  std::vector<uint32_t> grid(size_t(cloud.n) * 3);
  for (int64_t i = 0; i < cloud.n; ++i) {
    const int64_t src = order[size_t(i)];
    for (int a = 0; a < 3; ++a) grid[size_t(i) * 3 + size_t(a)] = grid_orig[size_t(src) * 3 + size_t(a)];
  }

  const int64_t n = cloud.n;
  const int C48 = GaussianCloud::kColorDims;

  // attributes in coding order
  std::vector<float> colors(size_t(n) * size_t(C48));
  std::vector<float> geom_vals(size_t(n) * size_t(kGeomChannels));
  std::vector<int32_t> geom_syms(size_t(n) * size_t(kGeomChannels));
  for (int64_t i = 0; i < n; ++i) {
    const int64_t src = order[size_t(i)];
    std::memcpy(&colors[size_t(i) * size_t(C48)], &cloud.colors[size_t(src) * size_t(C48)],
                sizeof(float) * size_t(C48));
    float row[kGeomChannels];
    gather_geometry_row(cloud, src, row);
    for (int c = 0; c < kGeomChannels; ++c) {
      const int32_t s = quantize_value(row[c], h.geom_steps[size_t(c)]);
      geom_syms[size_t(i) * kGeomChannels + size_t(c)] = s;
      geom_vals[size_t(i) * kGeomChannels + size_t(c)] = dequantize_value(s, h.geom_steps[size_t(c)]);
    }
  }

  const SectionSpec geom_spec = geom_section();
  const SectionSpec lossy_spec = lossy_color_section();
  const SectionSpec closs_spec = lossless_color_section();
  SectionNets<float> geom_nets{&geom_spec, &cfg, &wm};
  SectionNets<float> lossy_nets{&lossy_spec, &cfg, &wm};
  SectionNets<float> closs_nets{&closs_spec, &cfg, &wm};

  const std::vector<std::vector<int64_t>> full_windows = window_token_lists(n, L, nullptr);
  const size_t W = full_windows.size();

  // 2. division mask.
  std::vector<uint8_t> mask(size_t(n), 0);  // 1 = lossy
  if (opt.force_lossy) {
    std::fill(mask.begin(), mask.end(), uint8_t(1));
  } else if (!opt.force_lossless) {
    parallel_for(W, threads, [&](size_t w) {
      const std::vector<int64_t>& toks = full_windows[w];
      Tensor rows = Tensor::zeros2(int(toks.size()), C48 + kGeomChannels);
      for (size_t i = 0; i < toks.size(); ++i) {
        std::memcpy(&rows.at(int(i), 0), &colors[size_t(toks[i]) * size_t(C48)], sizeof(float) * size_t(C48));
        std::memcpy(&rows.at(int(i), C48), &geom_vals[size_t(toks[i]) * size_t(kGeomChannels)],
                    sizeof(float) * size_t(kGeomChannels));
      }
      Graph<float> g(false);
      auto pe = division_pe(g, wm, cfg, g.constant(window_pos_norm(grid, toks, bits)));
      const Tensor& logits = g.val(division_logits(g, wm, cfg, pe, g.constant(rows)));
      for (size_t i = 0; i < toks.size(); ++i) mask[size_t(toks[i])] = logits.at(int(i), 0) > 0 ? 1 : 0;
    });
  }
  std::vector<int64_t> lossy_idx, lossless_idx;
  for (int64_t i = 0; i < n; ++i) (mask[size_t(i)] ? lossy_idx : lossless_idx).push_back(i);

  // lossless color symbols
  std::vector<int32_t> closs_syms(size_t(n) * size_t(C48), 0);
  std::vector<float> closs_vals(size_t(n) * size_t(C48), 0.f);
  for (int64_t i : lossless_idx) {
    for (int c = 0; c < C48; ++c) {
      const int32_t s = quantize_value(colors[size_t(i) * size_t(C48) + size_t(c)], h.color_steps[size_t(c)]);
      closs_syms[size_t(i) * size_t(C48) + size_t(c)] = s;
      closs_vals[size_t(i) * size_t(C48) + size_t(c)] = dequantize_value(s, h.color_steps[size_t(c)]);
    }
  }

  // 3. per-window model passes.
  const std::vector<std::vector<int64_t>> lossy_windows = window_token_lists(int64_t(lossy_idx.size()), L, &lossy_idx);
  const std::vector<std::vector<int64_t>> lossless_windows =
      window_token_lists(int64_t(lossless_idx.size()), L, &lossless_idx);

  // geometry hyper
  std::vector<Tensor> geom_pe(W), geom_psi(W);
  std::vector<std::vector<int32_t>> geom_hyp_syms(W);
  parallel_for(W, threads, [&](size_t w) {
    const std::vector<int64_t>& toks = full_windows[w];
    geom_pe[w] = section_pe_tensor(geom_nets, window_pos_norm(grid, toks, bits));
    HyperResult hr = hyper_forward(geom_nets, geom_pe[w], gather_rows_tensor(geom_vals, kGeomChannels, toks));
    geom_hyp_syms[w] = std::move(hr.syms);
    geom_psi[w] = std::move(hr.psi);
  });

  // lossy color: transform, latent quantization, hyper, reconstruction
  const size_t LW = lossy_windows.size();
  std::vector<Tensor> lossy_pe(LW), lossy_psi(LW), lossy_recon(LW);
  std::vector<std::vector<int32_t>> lossy_syms(LW), lossy_hyp_syms(LW);
  std::vector<double> lossy_sqerr(LW, 0.0);
  parallel_for(LW, threads, [&](size_t w) {
    const std::vector<int64_t>& toks = lossy_windows[w];
    const Tensor cw = gather_rows_tensor(colors, C48, toks);
    lossy_pe[w] = section_pe_tensor(lossy_nets, window_pos_norm(grid, toks, bits));
    Graph<float> g(false);
    auto pe = g.constant(lossy_pe[w]);
    const Tensor& y = g.val(lossy_analysis(g, lossy_nets, pe, g.constant(cw)));
    std::vector<int32_t> ys(y.v.size());
    Tensor yq = y;
    for (size_t i = 0; i < y.v.size(); ++i) {
      ys[i] = int32_t(round_even(double(y.v[i])));
      yq.v[i] = float(ys[i]);
    }
    lossy_syms[w] = std::move(ys);
    auto yqc = g.constant(yq);
    HyperResult hr = hyper_forward(lossy_nets, lossy_pe[w], yq);
    lossy_hyp_syms[w] = std::move(hr.syms);
    lossy_psi[w] = std::move(hr.psi);
    lossy_recon[w] = g.val(lossy_synthesis(g, lossy_nets, pe, yqc));
    double se = 0;
    for (int i = 0; i < int(toks.size()); ++i)
      for (int c = 0; c < C48; ++c) {
        const double d = double(lossy_recon[w].at(i, c)) - double(cw.at(i, c));
        se += d * d;
      }
    lossy_sqerr[w] = se;
  });

  // reconstructed lossy colors by coding index (mixed-window conditioning)
  std::vector<float> recon_colors(size_t(n) * size_t(C48), 0.f);
  for (size_t w = 0; w < LW; ++w)
    for (size_t i = 0; i < lossy_windows[w].size(); ++i)
      std::memcpy(&recon_colors[size_t(lossy_windows[w][i]) * size_t(C48)], &lossy_recon[w].at(int(i), 0),
                  sizeof(float) * size_t(C48));

  // lossless color hyper (subset windows)
  const size_t SW = lossless_windows.size();
  std::vector<Tensor> closs_hyp_psi(SW);
  std::vector<std::vector<int32_t>> closs_hyp_syms(SW);
  parallel_for(SW, threads, [&](size_t w) {
    const std::vector<int64_t>& toks = lossless_windows[w];
    const Tensor pe = section_pe_tensor(closs_nets, window_pos_norm(grid, toks, bits));
    HyperResult hr = hyper_forward(closs_nets, pe, gather_rows_tensor(closs_vals, C48, toks));
    closs_hyp_syms[w] = std::move(hr.syms);
    closs_hyp_psi[w] = std::move(hr.psi);
  });
  std::vector<float> psi_lossless(size_t(lossless_idx.size()) * size_t(cfg.feature_width));
  {
    int64_t rank = 0;
    for (size_t w = 0; w < SW; ++w)
      for (size_t i = 0; i < lossless_windows[w].size(); ++i, ++rank)
        std::memcpy(&psi_lossless[size_t(rank) * size_t(cfg.feature_width)], &closs_hyp_psi[w].at(int(i), 0),
                    sizeof(float) * size_t(cfg.feature_width));
  }

  // 4. channel supports.
  for (int64_t i = 0; i < n; ++i)
    for (int c = 0; c < kGeomChannels; ++c)
      scan_range(h.supports.geom_sym, size_t(c), geom_syms[size_t(i) * kGeomChannels + size_t(c)]);
  for (const auto& ws : geom_hyp_syms)
    for (size_t i = 0; i < ws.size(); ++i)
      scan_range(h.supports.geom_hyp, i % size_t(kGeomHyperChannels), ws[i]);
  for (const auto& ws : lossy_hyp_syms)
    for (size_t i = 0; i < ws.size(); ++i)
      scan_range(h.supports.lossy_hyp, i % size_t(kLossyHyperChannels), ws[i]);
  for (int64_t i : lossless_idx)
    for (int c = 0; c < C48; ++c)
      scan_range(h.supports.closs_sym, size_t(c), closs_syms[size_t(i) * size_t(C48) + size_t(c)]);
  for (const auto& ws : closs_hyp_syms)
    for (size_t i = 0; i < ws.size(); ++i)
      scan_range(h.supports.closs_hyp, i % size_t(kColorHyperChannels), ws[i]);

  // 5. section payloads.
  EncodeStats st;
  st.n = n;
  st.clamped_positions = clamped;
  st.lossy_tokens = int64_t(lossy_idx.size());
  st.lossless_tokens = int64_t(lossless_idx.size());
  {
    double se = 0;
    for (double s : lossy_sqerr) se += s;
    st.color_mse = lossy_idx.empty() ? 0.0 : se / (double(lossy_idx.size()) * double(C48));
  }

  std::map<uint8_t, std::vector<uint8_t>> payloads;

  {  // positions
    std::vector<uint8_t> v = varint_encode_deltas(codes_sorted);
    payloads[kSecPositions] = pack_chunks({}, {std::move(v)});
    st.sections["positions"].symbols = n;
  }

  {  // division mask
    uint64_t ones = uint64_t(lossy_idx.size());
    ByteWriter prefix;
    prefix.put_u64(ones);
    RangeEncoder enc;
    const CdfTable t = build_cdf_table({double(n) - double(ones), double(ones)});
    SinkStats ms;
    for (int64_t i = 0; i < n; ++i) {
      enc.encode_symbol(t, mask[size_t(i)]);
      ms.bits += slot_bits(t, mask[size_t(i)]);
      ++ms.symbols;
    }
    payloads[kSecDivMask] = pack_chunks(prefix.take(), {enc.finish()});
    st.sections["div_mask"].model_bits = ms.bits;
    st.sections["div_mask"].symbols = ms.symbols;
  }

  const std::vector<CdfTable> geom_hyp_tables =
      factorized_tables(wm, "geom.fz", kGeomHyperChannels, mins_of(h.supports.geom_hyp), maxs_of(h.supports.geom_hyp));
  const std::vector<CdfTable> lossy_hyp_tables = factorized_tables(
      wm, "clossy.fz", kLossyHyperChannels, mins_of(h.supports.lossy_hyp), maxs_of(h.supports.lossy_hyp));
  const std::vector<CdfTable> closs_hyp_tables = factorized_tables(
      wm, "closs.fz", kColorHyperChannels, mins_of(h.supports.closs_hyp), maxs_of(h.supports.closs_hyp));

  const std::vector<int>& geom_groups = geom_spec.subgroups;
  const std::vector<int>& lossy_groups = lossy_spec.subgroups;
  const std::vector<int>& closs_groups = closs_spec.subgroups;

  {  // geometry: hyper chunks + context-coded symbol chunks
    std::vector<std::vector<uint8_t>> hyp_chunks(W), sym_chunks(W);
    std::vector<SinkStats> hyp_stats(W), sym_stats(W);
    parallel_for(W, threads, [&](size_t w) {
      const std::vector<int64_t>& toks = full_windows[w];
      {
        RangeEncoder enc;
        encode_factorized(enc, geom_hyp_tables, h.supports.geom_hyp, geom_hyp_syms[w], kGeomHyperChannels,
                          hyp_stats[w]);
        hyp_chunks[w] = enc.finish();
      }
      WindowState ws;
      ws.n = int(toks.size());
      ws.pos_norm = window_pos_norm(grid, toks, bits);
      ws.pe = geom_pe[w];
      ws.psi = geom_psi[w];
      ws.values = Tensor::zeros2(ws.n, kGeomChannels);
      ws.coded.assign(size_t(ws.n), 1);
      const PhasePlan plan = make_phase_plan(ws.coded, geom_groups, kGeomChannels);
      std::vector<int32_t> local_syms(size_t(ws.n) * size_t(kGeomChannels));
      for (size_t i = 0; i < toks.size(); ++i)
        std::memcpy(&local_syms[i * size_t(kGeomChannels)], &geom_syms[size_t(toks[i]) * size_t(kGeomChannels)],
                    sizeof(int32_t) * size_t(kGeomChannels));
      RangeEncoder enc;
      PhaseHasher hash;
      predict_window(geom_nets, plan, ws, std::vector<float>(h.geom_steps.begin(), h.geom_steps.end()), &local_syms,
                     mixture_encode_sink(enc, h.supports.geom_sym, hash, sym_stats[w]));
      sym_chunks[w] = enc.finish();
    });
    payloads[kSecGeomHyper] = pack_chunks({}, hyp_chunks);
    payloads[kSecGeomSymbols] = pack_chunks({}, sym_chunks);
    for (size_t w = 0; w < W; ++w) {
      st.sections["geom_hyper"].model_bits += hyp_stats[w].bits;
      st.sections["geom_hyper"].symbols += hyp_stats[w].symbols;
      st.sections["geom_symbols"].model_bits += sym_stats[w].bits;
      st.sections["geom_symbols"].symbols += sym_stats[w].symbols;
    }
  }

  {  // lossy color: hyper + latent chunks
    std::vector<std::vector<uint8_t>> hyp_chunks(LW), lat_chunks(LW);
    std::vector<SinkStats> hyp_stats(LW), lat_stats(LW);
    parallel_for(LW, threads, [&](size_t w) {
      const std::vector<int64_t>& toks = lossy_windows[w];
      {
        RangeEncoder enc;
        encode_factorized(enc, lossy_hyp_tables, h.supports.lossy_hyp, lossy_hyp_syms[w], kLossyHyperChannels,
                          hyp_stats[w]);
        hyp_chunks[w] = enc.finish();
      }
      WindowState ws;
      ws.n = int(toks.size());
      ws.pos_norm = window_pos_norm(grid, toks, bits);
      ws.pe = lossy_pe[w];
      ws.psi = lossy_psi[w];
      ws.values = Tensor::zeros2(ws.n, kLossyLatentChannels);
      ws.coded.assign(size_t(ws.n), 1);
      const PhasePlan plan = make_phase_plan(ws.coded, lossy_groups, kLossyLatentChannels);
      GaussianRecord rec;
      predict_window(lossy_nets, plan, ws, std::vector<float>(size_t(kLossyLatentChannels), 1.0f), &lossy_syms[w],
                     gaussian_scan_sink(rec));
      GaussianTables tables(rec.radius);
      RangeEncoder enc;
      PhaseHasher hash;
      SinkStats ss;
      gaussian_encode_recorded(enc, rec, tables, hash, ss);
      ByteWriter prefix;
      put_varint(prefix, uint64_t(rec.radius));
      std::vector<uint8_t> chunk = prefix.take();
      std::vector<uint8_t> coded = enc.finish();
      chunk.insert(chunk.end(), coded.begin(), coded.end());
      lat_chunks[w] = std::move(chunk);
      lat_stats[w] = ss;
    });
    payloads[kSecLossyHyper] = pack_chunks({}, hyp_chunks);
    payloads[kSecLossyLatent] = pack_chunks({}, lat_chunks);
    for (size_t w = 0; w < LW; ++w) {
      st.sections["lossy_hyper"].model_bits += hyp_stats[w].bits;
      st.sections["lossy_hyper"].symbols += hyp_stats[w].symbols;
      st.sections["lossy_latent"].model_bits += lat_stats[w].bits;
      st.sections["lossy_latent"].symbols += lat_stats[w].symbols;
    }
  }

  {  // lossless color: hyper on subset windows, symbols on mixed full windows
    std::vector<std::vector<uint8_t>> hyp_chunks(SW);
    std::vector<SinkStats> hyp_stats(SW);
    parallel_for(SW, threads, [&](size_t w) {
      RangeEncoder enc;
      encode_factorized(enc, closs_hyp_tables, h.supports.closs_hyp, closs_hyp_syms[w], kColorHyperChannels,
                        hyp_stats[w]);
      hyp_chunks[w] = enc.finish();
    });
    payloads[kSecLosslessHyper] = pack_chunks({}, hyp_chunks);
    for (size_t w = 0; w < SW; ++w) {
      st.sections["lossless_hyper"].model_bits += hyp_stats[w].bits;
      st.sections["lossless_hyper"].symbols += hyp_stats[w].symbols;
    }

    // lossless rank per coding index
    std::vector<int64_t> lossless_rank(size_t(n), -1);
    for (size_t r = 0; r < lossless_idx.size(); ++r) lossless_rank[size_t(lossless_idx[r])] = int64_t(r);

    std::vector<std::vector<uint8_t>> sym_chunks(W);
    std::vector<SinkStats> sym_stats(W);
    parallel_for(W, threads, [&](size_t w) {
      const std::vector<int64_t>& toks = full_windows[w];
      WindowState ws;
      ws.n = int(toks.size());
      ws.coded.resize(size_t(ws.n));
      ws.key_full.resize(size_t(ws.n));
      bool any = false;
      for (size_t i = 0; i < toks.size(); ++i) {
        const bool lossy = mask[size_t(toks[i])] != 0;
        ws.coded[i] = lossy ? 0 : 1;
        ws.key_full[i] = lossy ? 1 : 0;
        any = any || !lossy;
      }
      if (!any) return;  // no lossless tokens here; empty chunk
      ws.pos_norm = window_pos_norm(grid, toks, bits);
      ws.values = Tensor::zeros2(ws.n, C48);
      ws.psi = Tensor::zeros2(ws.n, cfg.feature_width);
      std::vector<int> lossy_local;
      for (size_t i = 0; i < toks.size(); ++i) {
        if (ws.key_full[i]) {
          lossy_local.push_back(int(i));
          std::memcpy(&ws.values.at(int(i), 0), &recon_colors[size_t(toks[i]) * size_t(C48)],
                      sizeof(float) * size_t(C48));
        } else {
          std::memcpy(&ws.psi.at(int(i), 0),
                      &psi_lossless[size_t(lossless_rank[size_t(toks[i])]) * size_t(cfg.feature_width)],
                      sizeof(float) * size_t(cfg.feature_width));
        }
      }
      if (!lossy_local.empty()) {
        Graph<float> g(false);
        auto rows = g.gather_rows(g.constant(ws.values), lossy_local);
        const Tensor& emb = g.val(mlp2(g, rows, wm, "closs.lembed"));
        for (size_t i = 0; i < lossy_local.size(); ++i)
          std::memcpy(&ws.psi.at(lossy_local[i], 0), emb.v.data() + i * size_t(cfg.feature_width),
                      sizeof(float) * size_t(cfg.feature_width));
      }
      const PhasePlan plan = make_phase_plan(ws.coded, closs_groups, C48);
      std::vector<int32_t> local_syms(size_t(ws.n) * size_t(C48), 0);
      for (size_t i = 0; i < toks.size(); ++i)
        if (ws.coded[i])
          std::memcpy(&local_syms[i * size_t(C48)], &closs_syms[size_t(toks[i]) * size_t(C48)],
                      sizeof(int32_t) * size_t(C48));
      RangeEncoder enc;
      PhaseHasher hash;
      predict_window(closs_nets, plan, ws, std::vector<float>(h.color_steps.begin(), h.color_steps.end()),
                     &local_syms, mixture_encode_sink(enc, h.supports.closs_sym, hash, sym_stats[w]));
      sym_chunks[w] = enc.finish();
    });
    payloads[kSecLosslessSymbols] = pack_chunks({}, sym_chunks);
    for (size_t w = 0; w < W; ++w) {
      st.sections["lossless_symbols"].model_bits += sym_stats[w].bits;
      st.sections["lossless_symbols"].symbols += sym_stats[w].symbols;
    }
  }

  // 6. assemble container (header written twice to learn section offsets).
  std::vector<SectionEntry> entries;
  for (uint8_t id = 1; id <= kSectionCount; ++id) {
    SectionEntry e;
    e.id = id;
    e.length = payloads[id].size();
    e.crc = crc32(payloads[id].data(), payloads[id].size());
    entries.push_back(e);
  }
  const size_t header_size = write_header(h, entries).size();
  uint64_t off = header_size;
  for (SectionEntry& e : entries) {
    e.offset = off;
    off += e.length;
  }
  std::vector<uint8_t> out = write_header(h, entries);
  for (uint8_t id = 1; id <= kSectionCount; ++id)
    out.insert(out.end(), payloads[id].begin(), payloads[id].end());

  wm.training = was_training;

  if (stats) {
    static const std::map<uint8_t, std::string> names = {
        {kSecPositions, "positions"},          {kSecGeomHyper, "geom_hyper"},
        {kSecGeomSymbols, "geom_symbols"},     {kSecDivMask, "div_mask"},
        {kSecLossyHyper, "lossy_hyper"},       {kSecLossyLatent, "lossy_latent"},
        {kSecLosslessHyper, "lossless_hyper"}, {kSecLosslessSymbols, "lossless_symbols"}};
    for (const SectionEntry& e : entries) st.sections[names.at(e.id)].bytes = e.length;
    st.total_bytes = out.size();
    st.header_bytes = header_size;
    for (const auto& [k, s] : st.sections) {
      st.model_bits += s.model_bits;
      if (k != "positions" && k != "div_mask") st.attribute_bits += s.model_bits;
    }
    *stats = st;
  }
  return out;
}

// --- decode ----------------------------------------------------------------------

GaussianCloud decompress(const std::vector<uint8_t>& bytes, WeightMap<float>& wm, int threads) {
  ByteReader r(bytes.data(), bytes.size());
  std::vector<SectionEntry> entries;
  const Header h = read_header(r, entries);

  const ArchConfig cfg = arch_config(h.arch_id);
  if (get_arch_id(wm) != h.arch_id)
    throw InputError("weights architecture id " + std::to_string(get_arch_id(wm)) +
                     " does not match stream architecture " + std::to_string(h.arch_id));
  validate_weights(wm, cfg);
  const bool was_training = wm.training;
  wm.training = false;
  threads = resolve_threads(threads);

  // section slices + integrity
  std::map<uint8_t, std::pair<const uint8_t*, size_t>> secs;
  for (const SectionEntry& e : entries) {
    if (e.offset + e.length > bytes.size() || e.offset < 1)
      throw CorruptStreamError("section extends past end of container");
    if (secs.count(e.id)) throw CorruptStreamError("duplicate section id");
    const uint8_t* p = bytes.data() + e.offset;
    if (crc32(p, size_t(e.length)) != e.crc)
      throw CorruptStreamError("section " + std::to_string(int(e.id)) + " checksum mismatch");
    secs[e.id] = {p, size_t(e.length)};
  }
  for (uint8_t id = 1; id <= kSectionCount; ++id)
    if (!secs.count(id)) throw CorruptStreamError("missing section id " + std::to_string(int(id)));

  const int64_t n = h.n;
  if (n < 1) throw CorruptStreamError("container has no points");
  // every coded token costs at least one position byte, so this bounds
  // allocations by the input size
  if (uint64_t(n) > bytes.size()) throw CorruptStreamError("element count exceeds container size");
  const int bits = h.position_bits;
  const int32_t L = int32_t(h.window_len);
  const int C48 = GaussianCloud::kColorDims;

  // positions
  auto pos_chunks = unpack_chunks(secs[kSecPositions].first, secs[kSecPositions].second, 0);
  if (pos_chunks.size() != 1) throw CorruptStreamError("position section must hold one chunk");
  const std::vector<uint64_t> codes = varint_decode_deltas(pos_chunks[0].first, pos_chunks[0].second, n);
  std::vector<uint32_t> grid_sorted(size_t(n) * 3);
  for (int64_t i = 0; i < n; ++i) {
    uint32_t x, y, z;
    morton_decode(codes[size_t(i)], bits, x, y, z);
    grid_sorted[size_t(i) * 3] = x;
    grid_sorted[size_t(i) * 3 + 1] = y;
    grid_sorted[size_t(i) * 3 + 2] = z;
  }
  // coding order (identity, or the seeded shuffle of the order ablation)
  std::vector<int64_t> perm(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) perm[size_t(i)] = i;
  if (cfg.serialization_shuffle_seed != 0) {
    Rng rng(cfg.serialization_shuffle_seed ^ uint64_t(n) * 0x9E3779B97F4A7C15ull);
    for (int64_t i = n - 1; i > 0; --i) {
      const int64_t j = int64_t(rng.below(uint64_t(i) + 1));
      std::swap(perm[size_t(i)], perm[size_t(j)]);
    }
  }
  std::vector<uint32_t> grid(size_t(n) * 3);
  for (int64_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) grid[size_t(i) * 3 + size_t(a)] = grid_sorted[size_t(perm[size_t(i)]) * 3 + size_t(a)];

  // mask
  std::vector<uint8_t> mask(size_t(n), 0);
  {
    ByteReader mr(secs[kSecDivMask].first, secs[kSecDivMask].second);
    const uint64_t ones = mr.get_u64();
    if (ones > uint64_t(n)) throw CorruptStreamError("division mask count out of range");
    auto chunks = unpack_chunks(secs[kSecDivMask].first, secs[kSecDivMask].second, 8);
    if (chunks.size() != 1) throw CorruptStreamError("division mask must hold one chunk");
    const CdfTable t = build_cdf_table({double(n) - double(ones), double(ones)});
    RangeDecoder dec(chunks[0].first, chunks[0].second);
    uint64_t got = 0;
    for (int64_t i = 0; i < n; ++i) {
      mask[size_t(i)] = uint8_t(dec.decode_symbol(t));
      got += mask[size_t(i)];
    }
    if (got != ones) throw CorruptStreamError("division mask count mismatch");
  }
  std::vector<int64_t> lossy_idx, lossless_idx;
  for (int64_t i = 0; i < n; ++i) (mask[size_t(i)] ? lossy_idx : lossless_idx).push_back(i);

  const SectionSpec geom_spec = geom_section();
  const SectionSpec lossy_spec = lossy_color_section();
  const SectionSpec closs_spec = lossless_color_section();
  SectionNets<float> geom_nets{&geom_spec, &cfg, &wm};
  SectionNets<float> lossy_nets{&lossy_spec, &cfg, &wm};
  SectionNets<float> closs_nets{&closs_spec, &cfg, &wm};

  const std::vector<std::vector<int64_t>> full_windows = window_token_lists(n, L, nullptr);
  const std::vector<std::vector<int64_t>> lossy_windows = window_token_lists(int64_t(lossy_idx.size()), L, &lossy_idx);
  const std::vector<std::vector<int64_t>> lossless_windows =
      window_token_lists(int64_t(lossless_idx.size()), L, &lossless_idx);
  const size_t W = full_windows.size(), LW = lossy_windows.size(), SW = lossless_windows.size();

  const std::vector<CdfTable> geom_hyp_tables =
      factorized_tables(wm, "geom.fz", kGeomHyperChannels, mins_of(h.supports.geom_hyp), maxs_of(h.supports.geom_hyp));
  const std::vector<CdfTable> lossy_hyp_tables = factorized_tables(
      wm, "clossy.fz", kLossyHyperChannels, mins_of(h.supports.lossy_hyp), maxs_of(h.supports.lossy_hyp));
  const std::vector<CdfTable> closs_hyp_tables = factorized_tables(
      wm, "closs.fz", kColorHyperChannels, mins_of(h.supports.closs_hyp), maxs_of(h.supports.closs_hyp));

  const std::vector<int>& geom_groups = geom_spec.subgroups;
  const std::vector<int>& lossy_groups = lossy_spec.subgroups;
  const std::vector<int>& closs_groups = closs_spec.subgroups;

  GaussianCloud out;
  out.resize(n);
  {
    const std::vector<float> pos = dequantize_positions(grid.data(), n, h.quant);
    out.positions = pos;
  }

  // geometry
  auto geom_hyp_chunks = unpack_chunks(secs[kSecGeomHyper].first, secs[kSecGeomHyper].second, 0);
  auto geom_sym_chunks = unpack_chunks(secs[kSecGeomSymbols].first, secs[kSecGeomSymbols].second, 0);
  if (geom_hyp_chunks.size() != W || geom_sym_chunks.size() != W)
    throw CorruptStreamError("geometry chunk count mismatch");
  std::vector<float> geom_vals(size_t(n) * size_t(kGeomChannels));
  parallel_for(W, threads, [&](size_t w) {
    const std::vector<int64_t>& toks = full_windows[w];
    const Tensor pos_norm = window_pos_norm(grid, toks, bits);
    const Tensor pe = section_pe_tensor(geom_nets, pos_norm);
    std::vector<int32_t> usyms;
    {
      RangeDecoder dec(geom_hyp_chunks[w].first, geom_hyp_chunks[w].second);
      decode_factorized(dec, geom_hyp_tables, h.supports.geom_hyp, usyms, kGeomHyperChannels, int64_t(toks.size()));
    }
    WindowState ws;
    ws.n = int(toks.size());
    ws.pos_norm = pos_norm;
    ws.pe = pe;
    ws.psi = hyper_features_from_syms(geom_nets, pe, usyms, kGeomHyperChannels);
    ws.values = Tensor::zeros2(ws.n, kGeomChannels);
    ws.coded.assign(size_t(ws.n), 1);
    const PhasePlan plan = make_phase_plan(ws.coded, geom_groups, kGeomChannels);
    RangeDecoder dec(geom_sym_chunks[w].first, geom_sym_chunks[w].second);
    PhaseHasher hash;
    predict_window(geom_nets, plan, ws, std::vector<float>(h.geom_steps.begin(), h.geom_steps.end()), nullptr,
                   mixture_decode_sink(dec, h.supports.geom_sym, hash));
    for (size_t i = 0; i < toks.size(); ++i)
      std::memcpy(&geom_vals[size_t(toks[i]) * size_t(kGeomChannels)], &ws.values.at(int(i), 0),
                  sizeof(float) * size_t(kGeomChannels));
  });
  for (int64_t i = 0; i < n; ++i) scatter_geometry_row(out, i, &geom_vals[size_t(i) * size_t(kGeomChannels)]);

  // lossy color
  auto lossy_hyp_chunks = unpack_chunks(secs[kSecLossyHyper].first, secs[kSecLossyHyper].second, 0);
  auto lossy_lat_chunks = unpack_chunks(secs[kSecLossyLatent].first, secs[kSecLossyLatent].second, 0);
  if (lossy_hyp_chunks.size() != LW || lossy_lat_chunks.size() != LW)
    throw CorruptStreamError("lossy color chunk count mismatch");
  std::vector<float> recon_colors(size_t(n) * size_t(C48), 0.f);
  parallel_for(LW, threads, [&](size_t w) {
    const std::vector<int64_t>& toks = lossy_windows[w];
    const Tensor pos_norm = window_pos_norm(grid, toks, bits);
    const Tensor pe = section_pe_tensor(lossy_nets, pos_norm);
    std::vector<int32_t> usyms;
    {
      RangeDecoder dec(lossy_hyp_chunks[w].first, lossy_hyp_chunks[w].second);
      decode_factorized(dec, lossy_hyp_tables, h.supports.lossy_hyp, usyms, kLossyHyperChannels, int64_t(toks.size()));
    }
    WindowState ws;
    ws.n = int(toks.size());
    ws.pos_norm = pos_norm;
    ws.pe = pe;
    ws.psi = hyper_features_from_syms(lossy_nets, pe, usyms, kLossyHyperChannels);
    ws.values = Tensor::zeros2(ws.n, kLossyLatentChannels);
    ws.coded.assign(size_t(ws.n), 1);
    const PhasePlan plan = make_phase_plan(ws.coded, lossy_groups, kLossyLatentChannels);
    ByteReader pr(lossy_lat_chunks[w].first, lossy_lat_chunks[w].second);
    const uint64_t radius = get_varint(pr);
    if (radius > 32000) throw CorruptStreamError("lossy latent radius out of range");
    GaussianTables tables{int32_t(radius)};
    RangeDecoder dec(lossy_lat_chunks[w].first + pr.pos(), lossy_lat_chunks[w].second - pr.pos());
    PhaseHasher hash;
    predict_window(lossy_nets, plan, ws, std::vector<float>(size_t(kLossyLatentChannels), 1.0f), nullptr,
                   gaussian_decode_sink(dec, tables, hash));
    Graph<float> g(false);
    const Tensor& recon = g.val(lossy_synthesis(g, lossy_nets, g.constant(pe), g.constant(ws.values)));
    for (size_t i = 0; i < toks.size(); ++i)
      std::memcpy(&recon_colors[size_t(toks[i]) * size_t(C48)], recon.v.data() + i * size_t(C48),
                  sizeof(float) * size_t(C48));
  });

  // lossless color hyper features
  auto closs_hyp_chunks = unpack_chunks(secs[kSecLosslessHyper].first, secs[kSecLosslessHyper].second, 0);
  if (closs_hyp_chunks.size() != SW) throw CorruptStreamError("lossless hyper chunk count mismatch");
  std::vector<float> psi_lossless(size_t(lossless_idx.size()) * size_t(cfg.feature_width));
  parallel_for(SW, threads, [&](size_t w) {
    const std::vector<int64_t>& toks = lossless_windows[w];
    const Tensor pos_norm = window_pos_norm(grid, toks, bits);
    const Tensor pe = section_pe_tensor(closs_nets, pos_norm);
    std::vector<int32_t> usyms;
    RangeDecoder dec(closs_hyp_chunks[w].first, closs_hyp_chunks[w].second);
    decode_factorized(dec, closs_hyp_tables, h.supports.closs_hyp, usyms, kColorHyperChannels, int64_t(toks.size()));
    const Tensor psi = hyper_features_from_syms(closs_nets, pe, usyms, kColorHyperChannels);
    int64_t rank0 = 0;
    for (size_t pw = 0; pw < w; ++pw) rank0 += int64_t(lossless_windows[pw].size());
    for (size_t i = 0; i < toks.size(); ++i)
      std::memcpy(&psi_lossless[size_t(rank0 + int64_t(i)) * size_t(cfg.feature_width)],
                  psi.v.data() + i * size_t(cfg.feature_width),
                  sizeof(float) * size_t(cfg.feature_width));
  });

  // lossless color symbols on mixed full windows
  auto closs_sym_chunks = unpack_chunks(secs[kSecLosslessSymbols].first, secs[kSecLosslessSymbols].second, 0);
  if (closs_sym_chunks.size() != W) throw CorruptStreamError("lossless symbol chunk count mismatch");
  std::vector<int64_t> lossless_rank(size_t(n), -1);
  for (size_t rk = 0; rk < lossless_idx.size(); ++rk) lossless_rank[size_t(lossless_idx[rk])] = int64_t(rk);
  std::vector<float> color_vals(size_t(n) * size_t(C48), 0.f);
  parallel_for(W, threads, [&](size_t w) {
    const std::vector<int64_t>& toks = full_windows[w];
    WindowState ws;
    ws.n = int(toks.size());
    ws.coded.resize(size_t(ws.n));
    ws.key_full.resize(size_t(ws.n));
    bool any = false;
    for (size_t i = 0; i < toks.size(); ++i) {
      const bool lossy = mask[size_t(toks[i])] != 0;
      ws.coded[i] = lossy ? 0 : 1;
      ws.key_full[i] = lossy ? 1 : 0;
      any = any || !lossy;
    }
    if (!any) {
      if (closs_sym_chunks[w].second != 0) throw CorruptStreamError("unexpected lossless chunk");
      return;
    }
    ws.pos_norm = window_pos_norm(grid, toks, bits);
    ws.values = Tensor::zeros2(ws.n, C48);
    ws.psi = Tensor::zeros2(ws.n, cfg.feature_width);
    std::vector<int> lossy_local;
    for (size_t i = 0; i < toks.size(); ++i) {
      if (ws.key_full[i]) {
        lossy_local.push_back(int(i));
        std::memcpy(&ws.values.at(int(i), 0), &recon_colors[size_t(toks[i]) * size_t(C48)],
                    sizeof(float) * size_t(C48));
      } else {
        std::memcpy(&ws.psi.at(int(i), 0),
                    &psi_lossless[size_t(lossless_rank[size_t(toks[i])]) * size_t(cfg.feature_width)],
                    sizeof(float) * size_t(cfg.feature_width));
      }
    }
    if (!lossy_local.empty()) {
      Graph<float> g(false);
      auto rows = g.gather_rows(g.constant(ws.values), lossy_local);
      const Tensor& emb = g.val(mlp2(g, rows, wm, "closs.lembed"));
      for (size_t i = 0; i < lossy_local.size(); ++i)
        std::memcpy(&ws.psi.at(lossy_local[i], 0), emb.v.data() + i * size_t(cfg.feature_width),
                      sizeof(float) * size_t(cfg.feature_width));
    }
    const PhasePlan plan = make_phase_plan(ws.coded, closs_groups, C48);
    RangeDecoder dec(closs_sym_chunks[w].first, closs_sym_chunks[w].second);
    PhaseHasher hash;
    predict_window(closs_nets, plan, ws, std::vector<float>(h.color_steps.begin(), h.color_steps.end()), nullptr,
                   mixture_decode_sink(dec, h.supports.closs_sym, hash));
    for (size_t i = 0; i < toks.size(); ++i)
      std::memcpy(&color_vals[size_t(toks[i]) * size_t(C48)], &ws.values.at(int(i), 0), sizeof(float) * size_t(C48));
  });
  for (int64_t i = 0; i < n; ++i) {
    const float* src = mask[size_t(i)] ? &recon_colors[size_t(i) * size_t(C48)] : &color_vals[size_t(i) * size_t(C48)];
    std::memcpy(&out.colors[size_t(i) * size_t(C48)], src, sizeof(float) * size_t(C48));
  }

  wm.training = was_training;
  return out;
}

ContainerInfo inspect_container(const std::vector<uint8_t>& bytes) {
  ByteReader r(bytes.data(), bytes.size());
  std::vector<SectionEntry> entries;
  const Header h = read_header(r, entries);
  ContainerInfo info;
  info.version = kContainerVersion;
  info.profile_flags = h.profile_flags;
  info.position_bits = h.position_bits;
  info.n = h.n;
  info.window_len = h.window_len;
  info.arch_id = h.arch_id;
  for (int a = 0; a < 3; ++a) {
    info.bbox_min[size_t(a)] = h.quant.bbox_min[size_t(a)];
    info.bbox_max[size_t(a)] = h.quant.bbox_max[size_t(a)];
  }
  for (const SectionEntry& e : entries) {
    if (e.offset + e.length > bytes.size()) throw CorruptStreamError("section extends past end of container");
    ContainerInfo::Section s{e.id, e.offset, e.length, e.crc, 0};
    const size_t prefix = e.id == kSecDivMask ? 8 : 0;
    auto chunks = unpack_chunks(bytes.data() + e.offset, size_t(e.length), prefix);
    s.chunks = uint32_t(chunks.size());
    info.sections.push_back(s);
  }
  return info;
}

}  // namespace lcm
