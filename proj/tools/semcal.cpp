// semcal command-line driver: synth, init, calibrate, eval.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "semcal/semcal.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace semcal;

namespace {

enum Exit : int { kOk = 0, kConfig = 2, kInitFailed = 3, kDiverged = 4 };

int exit_code(const Error& e) {
  switch (e.code()) {
    case ErrorCode::degenerate_scene:
    case ErrorCode::insufficient_correspondences:
    case ErrorCode::degenerate_geometry:
      return kInitFailed;
    case ErrorCode::diverged:
    case ErrorCode::non_finite:
      return kDiverged;
    default:
      return kConfig;
  }
}

/// Section of the --config file, or an empty object.
json section(const json& cfg, const char* key) {
  if (!cfg.contains(key)) return json::object();
  if (!cfg.at(key).is_object()) throw Error(ErrorCode::invalid_config, std::string("config key '") + key + "' must be an object");
  return cfg.at(key);
}

template <class T>
void from_config(const json& cfg, const char* key, T& out) {
  if (!cfg.contains(key)) return;
  try {
    out = cfg.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::invalid_config, std::string("config key '") + key + "': " + e.what());
  }
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  SEMCAL_CHECK(fs::exists(path), ErrorCode::invalid_config, "config file not found: " + path);
  const json j = io::read_json(path);
  SEMCAL_CHECK(j.is_object(), ErrorCode::invalid_config, "config must be a JSON object");
  return j;
}

std::vector<double> parse_list(const std::string& text, const char* what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      SEMCAL_CHECK(item.find_first_not_of(" \t", used) == std::string::npos, ErrorCode::invalid_config,
                   std::string("bad ") + what + " entry '" + item + "'");
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::invalid_config, std::string("bad ") + what + " entry '" + item + "'");
    }
  }
  SEMCAL_CHECK(!out.empty(), ErrorCode::invalid_config, std::string("empty ") + what + " list");
  return out;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string config;
  std::uint64_t seed = 0;
  int frames = 10;
  double noise = 0.0;
  std::string out;
};

int cmd_synth(const SynthArgs& a, const CLI::App& sub) {
  const json cfg = load_config(a.config);
  SceneSpec spec;
  io::update_from_json(spec, section(cfg, "scene"));
  io::update_from_json(spec.lidar, section(cfg, "lidar"));
  from_config(cfg, "seed", spec.seed);
  int frames = 10;
  double noise = 0.0;
  from_config(cfg, "frames", frames);
  from_config(cfg, "noise", noise);
  if (sub.count("--seed")) spec.seed = a.seed;
  if (sub.count("--frames")) frames = a.frames;
  if (sub.count("--noise")) noise = a.noise;
  SEMCAL_CHECK(frames >= 1, ErrorCode::invalid_config, "--frames must be at least 1");
  SEMCAL_CHECK(noise >= 0.0 && noise <= 1.0, ErrorCode::invalid_config, "--noise must lie in [0, 1]");

  auto bundle = generate(spec, frames);
  const std::uint64_t noise_seed = spec.seed + 1;
  corrupt_labels(bundle.frames, noise, noise_seed);
  io::write_bundle(a.out, bundle.frames, spec.lidar, bundle.ground_truth,
                   {{"seed", spec.seed}, {"noise", noise}, {"noise_seed", noise_seed}, {"spec", io::to_json(spec)}});
  std::cerr << "wrote " << frames << " frames to " << a.out << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

struct InitArgs {
  std::string config;
  std::string data;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t samples = 200;
};

InitOptions init_options(const json& cfg) {
  InitOptions o;
  io::update_from_json(o, section(cfg, "init"));
  return o;
}

int cmd_init(const InitArgs& a, const CLI::App& sub) {
  const json cfg = load_config(a.config);
  auto bundle = io::read_bundle(a.data);
  io::update_from_json(bundle.lidar, section(cfg, "lidar"));
  InitOptions opt = init_options(cfg);
  if (sub.count("--seed")) opt.seed = opt.pnp.seed = a.seed;
  if (sub.count("--samples")) opt.samples = a.samples;
  const auto report = initialize(bundle.frames, bundle.lidar, opt);
  io::write_json(a.out, io::to_json(report));
  if (!report.pose) {
    std::cerr << "initialization has failed: " << report.reason << '\n';
    for (const auto& s : report.scans)
      if (!s.ok) std::cerr << "  frame " << s.frame_id << ": " << s.error << '\n';
    return kInitFailed;
  }
  if (bundle.ground_truth) {
    const auto e = pose_error(*report.pose, *bundle.ground_truth);
    std::cerr << "init error: " << e.rotation_deg << " deg, " << e.translation_m << " m\n";
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct CalibArgs {
  std::string config;
  std::string data;
  std::string init;
  std::string gt;
  std::string out;
  std::uint64_t seed = 0;
  int iterations = 4000;
  int batch = 2048;
};

std::optional<Pose> read_ground_truth(const std::string& path) {
  if (path.empty()) return std::nullopt;
  SEMCAL_CHECK(fs::exists(path), ErrorCode::io, "ground-truth file not found: " + path);
  const json j = io::read_json(fs::is_directory(path) ? fs::path(path) / "manifest.json" : fs::path(path));
  return io::pose_from_json(j.contains("ground_truth") ? j.at("ground_truth") : j);
}

int cmd_calibrate(const CalibArgs& a, const CLI::App& sub) {
  const json cfg = load_config(a.config);
  auto bundle = io::read_bundle(a.data);
  io::update_from_json(bundle.lidar, section(cfg, "lidar"));
  CalibConfig cc;
  io::update_from_json(cc, section(cfg, "calib"));
  from_config(cfg, "seed", cc.seed);
  if (sub.count("--seed")) cc.seed = a.seed;
  if (sub.count("--iterations")) cc.max_iterations = a.iterations;
  if (sub.count("--batch")) cc.batch_size = a.batch;
  cc.validate();
  const auto gt = read_ground_truth(a.gt);

  Pose init;
  if (!a.init.empty()) {
    SEMCAL_CHECK(fs::exists(a.init), ErrorCode::io, "init file not found: " + a.init);
    const json j = io::read_json(a.init);
    if (j.value("format", "") == "semcal-init-v1" && !j.contains("pose")) {
      std::cerr << "init report records a failed initialization\n";
      return kInitFailed;
    }
    init = io::pose_from_json(j.contains("pose") ? j.at("pose") : j);
  } else {
    InitOptions opt = init_options(cfg);
    const auto report = initialize(bundle.frames, bundle.lidar, opt);
    if (!report.pose) {
      std::cerr << "initialization has failed: " << report.reason << '\n';
      return kInitFailed;
    }
    init = *report.pose;
    io::write_json(fs::path(a.out) / "init.json", io::to_json(report));
  }

  const auto run = calibrate(bundle.frames, init, cc);
  const fs::path out(a.out);
  io::write_json(out / "report.json", io::to_json(run, cc, init, gt));
  {
    auto os = io::open_out(out / "trace.csv");
    io::write_trace_csv(os, run, gt);
  }
  {
    auto os = io::open_out(out / "critic.bin", true);
    save_network(os, *run.critic);
  }
  io::write_json(out / "timing.json", {{"wall_seconds", run.wall_seconds}});
  std::cerr << "iterations " << run.iterations << (run.converged ? " (converged)" : "") << ", final MI "
            << run.mi_trace.back() << '\n';
  if (gt) {
    const auto e = pose_error(run.pose, *gt);
    std::cerr << "error: " << e.rotation_deg << " deg, " << e.translation_m << " m\n";
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string config;
  std::string frames = "10";
  std::string noise = "0";
  int seeds = 5;
  std::uint64_t seed = 0;
  double init_rot = 2.0;
  double init_trans = 0.10;
  int iterations = 4000;
  std::string out;
};

int cmd_eval(const EvalArgs& a, const CLI::App& sub) {
  const json cfg = load_config(a.config);
  SceneSpec spec;
  io::update_from_json(spec, section(cfg, "scene"));
  io::update_from_json(spec.lidar, section(cfg, "lidar"));
  CalibConfig cc;
  io::update_from_json(cc, section(cfg, "calib"));
  if (sub.count("--iterations")) cc.max_iterations = a.iterations;
  cc.validate();
  std::vector<int> frame_counts;
  for (double f : parse_list(a.frames, "--frames")) {
    SEMCAL_CHECK(f >= 1 && f == static_cast<int>(f), ErrorCode::invalid_config, "frame counts must be positive integers");
    frame_counts.push_back(static_cast<int>(f));
  }
  const auto noise_levels = parse_list(a.noise, "--noise");
  for (double p : noise_levels)
    SEMCAL_CHECK(p >= 0.0 && p <= 1.0, ErrorCode::invalid_config, "noise rates must lie in [0, 1]");
  SEMCAL_CHECK(a.seeds >= 1, ErrorCode::invalid_config, "--seeds must be at least 1");

  auto os = io::open_out(a.out);
  os << "trial,frames,noise,rot_err_deg,trans_err_m,wall_s\n";
  int trial = 0;
  for (int f : frame_counts)
    for (double p : noise_levels)
      for (int s = 0; s < a.seeds; ++s, ++trial) {
        const TrialSpec t{f, p, a.seed + static_cast<std::uint64_t>(s), a.init_rot, a.init_trans};
        const auto r = run_trial(spec, cc, t);
        os << trial << ',' << f << ',' << io::format_double(p) << ',' << io::format_double(r.error.rotation_deg)
           << ',' << io::format_double(r.error.translation_m) << ',' << io::format_double(r.wall_seconds) << '\n';
        os.flush();
        std::cerr << "trial " << trial << ": frames " << f << " noise " << p << " -> " << r.error.rotation_deg
                  << " deg, " << r.error.translation_m << " m\n";
      }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Targetless LiDAR-camera extrinsic calibration from semantic labels"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a labeled synthetic bundle");
  synth->add_option("--config", sa.config, "JSON config file");
  synth->add_option("--seed", sa.seed, "Scene seed");
  synth->add_option("--frames", sa.frames, "Number of frame pairs");
  synth->add_option("--noise", sa.noise, "Label flip probability");
  synth->add_option("--out", sa.out, "Output directory")->required();

  InitArgs ia;
  auto* init = app.add_subcommand("init", "Semantic registration + PnP initial guess");
  init->add_option("--config", ia.config, "JSON config file");
  init->add_option("--data", ia.data, "Bundle directory or manifest")->required();
  init->add_option("--out", ia.out, "Init report JSON")->required();
  init->add_option("--seed", ia.seed, "Sampling seed");
  init->add_option("--samples", ia.samples, "Correspondences per scan");

  CalibArgs ca;
  auto* calib = app.add_subcommand("calibrate", "Maximise the MI estimate over the extrinsic");
  calib->add_option("--config", ca.config, "JSON config file");
  calib->add_option("--data", ca.data, "Bundle directory or manifest")->required();
  calib->add_option("--init", ca.init, "Initial pose JSON or init report (default: run init)");
  calib->add_option("--gt", ca.gt, "Ground truth: manifest or pose JSON");
  calib->add_option("--out", ca.out, "Output directory")->required();
  calib->add_option("--seed", ca.seed, "Critic and sampling seed");
  calib->add_option("--iterations", ca.iterations, "Maximum iterations");
  calib->add_option("--batch", ca.batch, "Points per iteration");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Seeded synthetic sweeps over frame counts and label noise");
  eval->add_option("--config", ea.config, "JSON config file");
  eval->add_option("--frames", ea.frames, "Comma-separated frame counts");
  eval->add_option("--noise", ea.noise, "Comma-separated label flip rates");
  eval->add_option("--seeds", ea.seeds, "Trials per cell");
  eval->add_option("--seed", ea.seed, "First trial seed");
  eval->add_option("--init-rot", ea.init_rot, "Initial rotation offset per axis (deg)");
  eval->add_option("--init-trans", ea.init_trans, "Initial translation offset per axis (m)");
  eval->add_option("--iterations", ea.iterations, "Maximum iterations per trial");
  eval->add_option("--out", ea.out, "Output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*synth) return cmd_synth(sa, *synth);
    if (*init) return cmd_init(ia, *init);
    if (*calib) return cmd_calibrate(ca, *calib);
    if (*eval) return cmd_eval(ea, *eval);
  } catch (const Error& e) {
    std::cerr << "semcal: " << e.what() << '\n';
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "semcal: " << e.what() << '\n';
    return kConfig;
  }
  return kConfig;
}
