#pragma once

#include <chrono>
#include <cstdint>
#include <random>
#include <vector>

#include "semcal/calibrator.hpp"
#include "semcal/error.hpp"
#include "semcal/synth.hpp"

namespace semcal {

/// One synthetic calibration trial: fresh scene, optional label noise,
/// perturbed ground truth as the initial pose.
struct TrialSpec {
  int frames = 10;
  double noise = 0.0;
  std::uint64_t seed = 0;
  double init_rot_deg = 2.0;
  double init_trans_m = 0.10;
};

struct TrialResult {
  TrialSpec spec;
  PoseError error;
  PoseError init_error;
  int iterations = 0;
  bool converged = false;
  double wall_seconds = 0.0;  ///< generation plus calibration
};

/// Seeds are derived from trial.seed: the scene uses it directly, label
/// noise and the init perturbation use fixed offsets, the critic uses it as is.
inline TrialResult run_trial(const SceneSpec& base, const CalibConfig& base_cfg, const TrialSpec& trial) {
  const auto start = std::chrono::steady_clock::now();
  SceneSpec spec = base;
  spec.seed = trial.seed;
  auto bundle = generate(spec, trial.frames);
  corrupt_labels(bundle.frames, trial.noise, trial.seed + 0x9E3779B97F4A7C15ull);
  std::mt19937_64 rng(trial.seed + 0xD1B54A32D192ED03ull);
  const Pose init = perturb_pose(bundle.ground_truth, trial.init_rot_deg, trial.init_trans_m, rng);
  CalibConfig cfg = base_cfg;
  cfg.seed = trial.seed;
  const auto run = calibrate(bundle.frames, init, cfg);
  TrialResult r;
  r.spec = trial;
  r.error = pose_error(run.pose, bundle.ground_truth);
  r.init_error = pose_error(init, bundle.ground_truth);
  r.iterations = run.iterations;
  r.converged = run.converged;
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace semcal
