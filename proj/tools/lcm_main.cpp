#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lcm/pipeline.hpp"
#include "lcm/selftest.hpp"
#include "lcm/train.hpp"
#include "lcm/weights.hpp"

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int resolve_threads(int cli_value) {
  if (cli_value > 0) return cli_value;
  if (const char* env = std::getenv("LCM_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? int(hw) : 1;
}

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw lcm::InputError("cannot open " + path);
  f.seekg(0, std::ios::end);
  const std::streamoff len = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(len));
  if (len > 0) f.read(reinterpret_cast<char*>(bytes.data()), len);
  if (!f) throw lcm::InputError("read failed on " + path);
  return bytes;
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw lcm::InputError("cannot create " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw lcm::InputError("write failed on " + path);
}

const char* section_name(uint8_t id) {
  switch (id) {
    case lcm::kSecPositions: return "positions";
    case lcm::kSecGeomHyper: return "geom_hyper";
    case lcm::kSecGeomSymbols: return "geom_symbols";
    case lcm::kSecDivMask: return "div_mask";
    case lcm::kSecLossyHyper: return "lossy_hyper";
    case lcm::kSecLossyLatent: return "lossy_latent";
    case lcm::kSecLosslessHyper: return "lossless_hyper";
    case lcm::kSecLosslessSymbols: return "lossless_symbols";
  }
  return "unknown";
}

void emit(const json& j) { std::cout << j.dump() << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"feed-forward learned codec for 3D gaussian splat attributes"};
  app.require_subcommand(1);

  int threads = 0;      // 0 = LCM_THREADS env, then hardware count
  uint64_t seed = 7;

  // encode
  auto* enc = app.add_subcommand("encode", "compress a 3DGS PLY into a container");
  std::string enc_in, enc_weights, enc_out, enc_profile = "auto";
  int enc_window = 0, enc_bits = 0;
  enc->add_option("--input,-i", enc_in, "input .ply")->required();
  enc->add_option("--weights,-w", enc_weights, "model weights file")->required();
  enc->add_option("--output,-o", enc_out, "output container")->required();
  enc->add_option("--profile", enc_profile, "auto | lossless | lossy")
      ->check(CLI::IsMember({"auto", "lossless", "lossy"}));
  enc->add_option("--window-len", enc_window, "context window length override");
  enc->add_option("--position-bits", enc_bits, "position grid bits override");
  enc->add_option("--threads", threads, "worker threads (default: LCM_THREADS, then hardware)");
  enc->callback([&] {
    const auto t0 = Clock::now();
    const lcm::GaussianCloud cloud = lcm::load_ply_file(enc_in);
    lcm::WeightMap<float> wm = lcm::load_weights(enc_weights);
    lcm::EncodeOptions eo;
    eo.threads = resolve_threads(threads);
    eo.window_len = enc_window;
    eo.position_bits = enc_bits;
    eo.force_lossless = enc_profile == "lossless";
    eo.force_lossy = enc_profile == "lossy";
    lcm::EncodeStats st;
    const std::vector<uint8_t> bytes = lcm::compress(cloud, wm, eo, &st);
    write_file(enc_out, bytes);
    json per;
    for (const auto& [name, s] : st.sections) per[name] = s.bytes;
    json j;
    j["n_gaussians"] = st.n;
    j["bytes_total"] = st.total_bytes;
    j["bytes_header"] = st.header_bytes;
    j["bytes_per_section"] = per;
    j["bits_per_gaussian"] = st.n ? double(st.total_bytes) * 8.0 / double(st.n) : 0.0;
    j["model_bits"] = st.model_bits;
    j["lossy_tokens"] = st.lossy_tokens;
    j["lossless_tokens"] = st.lossless_tokens;
    j["clamped_positions"] = st.clamped_positions;
    j["color_mse"] = st.color_mse;
    j["seconds"] = seconds_since(t0);
    emit(j);
  });

  // decode
  auto* dec = app.add_subcommand("decode", "decompress a container back to PLY");
  std::string dec_in, dec_weights, dec_out;
  dec->add_option("--input,-i", dec_in, "input container")->required();
  dec->add_option("--weights,-w", dec_weights, "model weights file")->required();
  dec->add_option("--output,-o", dec_out, "output .ply")->required();
  dec->add_option("--threads", threads, "worker threads");
  dec->callback([&] {
    const auto t0 = Clock::now();
    const std::vector<uint8_t> bytes = read_file(dec_in);
    lcm::WeightMap<float> wm = lcm::load_weights(dec_weights);
    const lcm::GaussianCloud cloud = lcm::decompress(bytes, wm, resolve_threads(threads));
    lcm::save_ply_file(dec_out, cloud);
    json j;
    j["n_gaussians"] = cloud.n;
    j["bytes_in"] = bytes.size();
    j["seconds"] = seconds_since(t0);
    emit(j);
  });

  // inspect
  auto* ins = app.add_subcommand("inspect", "report header and per-section sizes");
  std::string ins_in;
  ins->add_option("--input,-i", ins_in, "input container")->required();
  ins->callback([&] {
    const std::vector<uint8_t> bytes = read_file(ins_in);
    const lcm::ContainerInfo info = lcm::inspect_container(bytes);
    uint64_t section_sum = 0;
    json secs = json::array();
    for (const auto& s : info.sections) {
      section_sum += s.length;
      json e;
      e["id"] = s.id;
      e["name"] = section_name(s.id);
      e["offset"] = s.offset;
      e["bytes"] = s.length;
      e["chunks"] = s.chunks;
      e["crc32"] = s.crc;
      e["proportion_pct"] = bytes.empty() ? 0.0 : 100.0 * double(s.length) / double(bytes.size());
      secs.push_back(e);
    }
    const uint64_t header_bytes = bytes.size() - section_sum;
    json j;
    j["version"] = info.version;
    j["profile_flags"] = info.profile_flags;
    j["position_bits"] = info.position_bits;
    j["n_gaussians"] = info.n;
    j["window_len"] = info.window_len;
    j["arch_id"] = info.arch_id;
    j["bbox_min"] = info.bbox_min;
    j["bbox_max"] = info.bbox_max;
    j["bytes_total"] = bytes.size();
    j["bytes_header"] = header_bytes;
    j["header_proportion_pct"] = bytes.empty() ? 0.0 : 100.0 * double(header_bytes) / double(bytes.size());
    j["sections"] = secs;
    emit(j);
  });

  // selftest
  auto* st = app.add_subcommand("selftest", "run the built-in invariant suite");
  bool inject_fault = false;
  st->add_option("--seed", seed, "probe seed");
  st->add_option("--threads", threads, "worker threads");
  st->add_flag("--inject-fault", inject_fault, "debug: corrupt one CDF count; the suite must fail");
  st->callback([&] {
    const auto t0 = Clock::now();
    const std::vector<lcm::SelfTestResult> results = lcm::run_selftest(seed, resolve_threads(threads), inject_fault);
    json checks = json::array();
    std::string failed;
    for (const auto& r : results) {
      std::cerr << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << ": " << r.detail << "\n";
      json e;
      e["name"] = r.name;
      e["pass"] = r.pass;
      e["detail"] = r.detail;
      checks.push_back(e);
      if (!r.pass) failed += (failed.empty() ? "" : ", ") + r.name;
    }
    json j;
    j["checks"] = checks;
    j["passed"] = lcm::all_passed(results);
    j["seconds"] = seconds_since(t0);
    emit(j);
    if (!failed.empty()) throw lcm::InvariantError("selftest failed: " + failed);
  });

  // init-weights
  auto* iw = app.add_subcommand("init-weights", "write freshly seeded model weights");
  std::string iw_arch = "toy", iw_out;
  iw->add_option("--arch", iw_arch, "toy | default")->check(CLI::IsMember({"toy", "default"}));
  iw->add_option("--output,-o", iw_out, "output weights file")->required();
  iw->add_option("--seed", seed, "init seed");
  iw->callback([&] {
    const lcm::ArchConfig cfg = lcm::arch_config(lcm::arch_id_for_profile(iw_arch));
    const lcm::WeightMap<float> wm = lcm::init_weights(cfg, seed);
    lcm::save_weights(iw_out, wm);
    json j;
    j["arch"] = iw_arch;
    j["arch_id"] = cfg.id;
    j["tensors"] = wm.tensors.size();
    j["bytes"] = lcm::serialize_weights(wm).size();
    j["output"] = iw_out;
    emit(j);
  });

  // train-toy
  auto* tr = app.add_subcommand("train-toy", "run the staged toy training recipe");
  std::string tr_in, tr_out, tr_stages = "lossy_init,lossless_init,joint", tr_arch = "toy";
  int tr_steps = 40, tr_window = 0;
  int64_t tr_points = 768;
  float tr_lr = 1e-3f, tr_lambda = 50.0f;
  tr->add_option("--input,-i", tr_in, "resume from these weights (default: fresh init)");
  tr->add_option("--arch", tr_arch, "toy | default (fresh init only)")->check(CLI::IsMember({"toy", "default"}));
  tr->add_option("--output,-o", tr_out, "output weights file")->required();
  tr->add_option("--stages", tr_stages, "comma list of lossy_init | lossless_init | joint");
  tr->add_option("--steps", tr_steps, "optimizer steps per stage");
  tr->add_option("--points", tr_points, "synthetic training cloud size");
  tr->add_option("--seed", seed, "data/noise seed");
  tr->add_option("--lr", tr_lr, "learning rate");
  tr->add_option("--lambda-dist", tr_lambda, "distortion weight for the lossy path");
  tr->add_option("--window-len", tr_window, "training window length override");
  tr->add_option("--threads", threads, "worker threads");
  tr->callback([&] {
    const auto t0 = Clock::now();
    lcm::WeightMap<float> wm =
        tr_in.empty() ? lcm::init_weights(lcm::arch_config(lcm::arch_id_for_profile(tr_arch)), seed)
                      : lcm::load_weights(tr_in);
    json stages = json::array();
    std::string item;
    std::stringstream ss(tr_stages);
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      lcm::TrainOptions to;
      to.stage = item;
      to.steps = tr_steps;
      to.points = tr_points;
      to.seed = seed;
      to.lr = tr_lr;
      to.lambda_dist = tr_lambda;
      to.window_len = tr_window;
      const lcm::TrainReport rep = lcm::train_stage(wm, to);
      for (size_t k = 0; k < rep.losses.size(); ++k)
        std::cerr << item << " step " << k << " loss " << rep.losses[k] << "\n";
      json e;
      e["stage"] = item;
      e["steps"] = rep.losses.size();
      e["first_loss"] = rep.first;
      e["last_loss"] = rep.last;
      e["grad_norm_last"] = rep.grad_norm_last;
      stages.push_back(e);
    }
    lcm::save_weights(tr_out, wm);
    json j;
    j["stages"] = stages;
    j["output"] = tr_out;
    j["seconds"] = seconds_since(t0);
    emit(j);
  });

  // ablate
  auto* ab = app.add_subcommand("ablate", "matched-budget context ablations on synthetic data");
  std::string ab_mode = "all";
  int ab_steps = 30;
  int64_t ab_points = 512;
  ab->add_option("mode", ab_mode, "all | no_space_ctx | no_channel_ctx | random_order | mlp_backbone | window_16 | window_1024")
      ->check(CLI::IsMember(
          {"all", "no_space_ctx", "no_channel_ctx", "random_order", "mlp_backbone", "window_16", "window_1024"}));
  ab->add_option("--steps", ab_steps, "training steps per variant");
  ab->add_option("--points", ab_points, "synthetic cloud size");
  ab->add_option("--seed", seed, "training seed");
  ab->add_option("--threads", threads, "worker threads");
  ab->callback([&] {
    const auto t0 = Clock::now();
    const std::vector<std::string> only =
        ab_mode == "all" ? std::vector<std::string>{} : std::vector<std::string>{ab_mode};
    const std::vector<lcm::AblationResult> results =
        lcm::run_ablations(ab_steps, ab_points, seed, resolve_threads(threads), only);
    double baseline = 0;
    for (const auto& r : results)
      if (r.name == "baseline") baseline = r.bits_per_token;
    json entries = json::array();
    for (const auto& r : results) {
      std::cerr << r.name << ": " << r.bits_per_token << " bits/token"
                << (baseline > 0 ? " (x" + std::to_string(r.bits_per_token / baseline) + " of baseline)" : "")
                << "\n";
      json e;
      e["name"] = r.name;
      e["arch_id"] = r.arch_id;
      e["window_len"] = r.window_len;
      e["bits_per_token"] = r.bits_per_token;
      if (baseline > 0) e["ratio_to_baseline"] = r.bits_per_token / baseline;
      entries.push_back(e);
    }
    json j;
    j["entries"] = entries;
    j["baseline_bits_per_token"] = baseline;
    j["seconds"] = seconds_since(t0);
    emit(j);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const lcm::InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const lcm::CorruptStreamError& e) {
    std::cerr << "corrupt stream: " << e.what() << "\n";
    return 3;
  } catch (const lcm::DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return 5;
  } catch (const lcm::Error& e) {
    std::cerr << "invariant failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
