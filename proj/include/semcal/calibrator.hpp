#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "semcal/error.hpp"
#include "semcal/frame.hpp"
#include "semcal/geometry.hpp"
#include "semcal/mine.hpp"
#include "semcal/sampling.hpp"

namespace semcal {

struct CalibConfig {
  int batch_size = 2048;
  int max_iterations = 4000;
  double critic_rate = 1e-4;  ///< alpha
  double pose_rate = 1e-3;    ///< beta
  int decay_every = 1000;
  double decay_factor = 0.5;
  int convergence_window = 200;
  double convergence_threshold = 1e-4;
  int max_invalid_streak = 50;
  std::vector<int> hidden = {128, 128};
  std::uint64_t seed = 0;

  void validate() const {
    SEMCAL_CHECK(batch_size >= 2, ErrorCode::invalid_config, "batch size must be at least 2");
    SEMCAL_CHECK(max_iterations >= 1, ErrorCode::invalid_config, "iteration budget must be positive");
    SEMCAL_CHECK(critic_rate > 0.0 && pose_rate > 0.0, ErrorCode::invalid_config, "learning rates must be positive");
    SEMCAL_CHECK(decay_every >= 1 && decay_factor > 0.0 && decay_factor <= 1.0, ErrorCode::invalid_config,
                 "bad learning-rate schedule");
    SEMCAL_CHECK(convergence_window >= 1 && convergence_threshold >= 0.0, ErrorCode::invalid_config,
                 "bad convergence rule");
    SEMCAL_CHECK(max_invalid_streak >= 1, ErrorCode::invalid_config, "invalid-streak limit must be positive");
    for (int h : hidden) SEMCAL_CHECK(h > 0, ErrorCode::invalid_config, "hidden widths must be positive");
  }

  double pose_rate_at(int iteration) const {
    return pose_rate * std::pow(decay_factor, static_cast<double>(iteration / decay_every));
  }
};

struct CalibrationRun {
  Pose pose;          ///< mean of the last convergence_window iterates
  Pose last_iterate;
  std::vector<double> mi_trace;             ///< NaN where the iteration had fewer than two valid points
  std::vector<Twist> pose_trace;            ///< pose after each iteration, as se3_log
  std::vector<std::uint32_t> valid_counts;  ///< in-view points per iteration
  int iterations = 0;
  bool converged = false;
  double wall_seconds = 0.0;
  std::optional<StatisticsNetwork> critic;
};

namespace detail {

/// Fixed per-run draw of points across all frames, bucketed by frame.
class PointDrawer {
 public:
  explicit PointDrawer(std::span<const CalibFrame> frames) : frames_(frames) {
    std::size_t total = 0;
    for (const auto& f : frames) {
      total += f.cloud.size();
      prefix_.push_back(total);
    }
    buckets_.resize(frames.size());
  }

  template <class Rng>
  const std::vector<std::vector<std::size_t>>& draw(int n, Rng& rng) {
    for (auto& b : buckets_) b.clear();
    std::uniform_int_distribution<std::size_t> pick(0, prefix_.back() - 1);
    for (int i = 0; i < n; ++i) {
      const std::size_t g = pick(rng);
      const auto f = static_cast<std::size_t>(std::upper_bound(prefix_.begin(), prefix_.end(), g) - prefix_.begin());
      buckets_[f].push_back(g - (f ? prefix_[f - 1] : 0));
    }
    return buckets_;
  }

  /// Every point of every frame once, in order.
  const std::vector<std::vector<std::size_t>>& all() {
    for (std::size_t f = 0; f < buckets_.size(); ++f) {
      buckets_[f].resize(frames_[f].cloud.size());
      std::iota(buckets_[f].begin(), buckets_[f].end(), std::size_t{0});
    }
    return buckets_;
  }

 private:
  std::span<const CalibFrame> frames_;
  std::vector<std::size_t> prefix_;
  std::vector<std::vector<std::size_t>> buckets_;
};

/// One minibatch at a pose: joint samples plus what the pose pullback needs.
struct PoseBatch {
  SampleBatch joint;
  std::vector<std::vector<Vec3>> points;  ///< per frame, drawn points
  std::vector<ProjectedPoints> projected;
  std::vector<SoftLabelBatch> soft;  ///< per frame, empty when no point was valid
  std::vector<Eigen::Index> column_offset;
};

inline PoseBatch make_batch(std::span<const CalibFrame> frames, const std::vector<std::vector<std::size_t>>& buckets,
                            const Pose& pose) {
  const int c = frames.front().cloud.num_classes;
  PoseBatch out;
  out.points.resize(frames.size());
  out.projected.resize(frames.size());
  out.soft.resize(frames.size());
  out.column_offset.assign(frames.size(), 0);
  Eigen::Index n = 0;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    if (buckets[f].empty()) continue;
    auto& pts = out.points[f];
    for (auto i : buckets[f]) pts.push_back(frames[f].cloud.points[i]);
    out.projected[f] = project(pts, pose, frames[f].intrinsics);
    if (out.projected[f].valid_count() == 0) continue;
    out.soft[f] = bilinear_sample(frames[f].planes(), out.projected[f]);
    out.column_offset[f] = n;
    n += static_cast<Eigen::Index>(out.soft[f].size());
  }
  out.joint.x = Eigen::MatrixXd::Zero(c, n);
  out.joint.y.resize(c, n);
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const auto& s = out.soft[f];
    if (s.size() == 0) continue;
    const auto off = out.column_offset[f];
    out.joint.y.middleCols(off, static_cast<Eigen::Index>(s.size())) = s.soft;
    for (std::size_t k = 0; k < s.size(); ++k)
      out.joint.x(frames[f].cloud.labels[buckets[f][s.source_index[k]]], off + static_cast<Eigen::Index>(k)) = 1.0;
  }
  return out;
}

template <class Rng>
PoseBatch make_batch(std::span<const CalibFrame> frames, PointDrawer& drawer, const Pose& pose, int b, Rng& rng) {
  return make_batch(frames, drawer.draw(b, rng), pose);
}

/// d(DV)/d(left pose increment), chained through sampling and projection.
inline Vec6 pose_gradient(std::span<const CalibFrame> frames, const PoseBatch& batch, const Pose& pose,
                          const Eigen::MatrixXd& grad_joint_y) {
  Vec6 g = Vec6::Zero();
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const auto& s = batch.soft[f];
    if (s.size() == 0) continue;
    const auto off = batch.column_offset[f];
    const auto guv =
        bilinear_sample_pullback(frames[f].planes(), s, grad_joint_y.middleCols(off, static_cast<Eigen::Index>(s.size())));
    std::vector<Vec2> full(batch.points[f].size(), Vec2::Zero());
    for (std::size_t k = 0; k < s.size(); ++k) full[s.source_index[k]] = guv[k];
    g += project_pullback(batch.points[f], pose, frames[f].intrinsics, full);
  }
  return g;
}

/// Mean of the last n poses of trace, taken in the tangent space at ref.
inline Pose tail_mean(const std::vector<Twist>& trace, const Pose& ref, std::size_t n) {
  n = std::min(n, trace.size());
  if (n == 0) return ref;
  const Pose inv = ref.inverse();
  Vec6 acc = Vec6::Zero();
  for (std::size_t i = trace.size() - n; i < trace.size(); ++i) acc += se3_log(se3_exp(trace[i]) * inv).v;
  return se3_exp(Twist(Vec6(acc / static_cast<double>(n)))) * ref;
}

inline void check_frames(std::span<const CalibFrame> frames) {
  SEMCAL_CHECK(!frames.empty(), ErrorCode::invalid_argument, "calibration needs at least one frame");
  for (const auto& f : frames) {
    f.validate();
    SEMCAL_CHECK(f.cloud.num_classes == frames.front().cloud.num_classes, ErrorCode::invalid_argument,
                 "frames disagree on the class count");
  }
}

}  // namespace detail

/// Joint ascent of the DV bound over critic parameters and a left pose
/// increment. Deterministic given cfg.seed.
inline CalibrationRun calibrate(std::span<const CalibFrame> frames, const Pose& init, const CalibConfig& cfg) {
  cfg.validate();
  detail::check_frames(frames);
  SEMCAL_CHECK(init.rotation().allFinite() && init.translation().allFinite(), ErrorCode::invalid_argument,
               "initial pose is not finite");
  const auto start = std::chrono::steady_clock::now();
  const int c = frames.front().cloud.num_classes;

  std::mt19937_64 rng(cfg.seed);
  StatisticsNetwork net(c, cfg.hidden, cfg.seed);
  OptimizerState critic_opt(net.num_parameters(), cfg.critic_rate);
  OptimizerState pose_opt(6, cfg.pose_rate);
  detail::PointDrawer drawer(frames);

  CalibrationRun run;
  run.pose = init;
  int invalid_streak = 0;
  std::vector<double> finite_mi;
  for (int it = 0; it < cfg.max_iterations; ++it) {
    const auto batch = detail::make_batch(frames, drawer, run.pose, cfg.batch_size, rng);
    const auto n = batch.joint.size();
    run.valid_counts.push_back(static_cast<std::uint32_t>(n));
    run.iterations = it + 1;
    if (n < 2) {
      run.mi_trace.push_back(std::numeric_limits<double>::quiet_NaN());
      run.pose_trace.push_back(se3_log(run.pose));
      SEMCAL_CHECK(++invalid_streak < cfg.max_invalid_streak, ErrorCode::diverged,
                   "no points in view for " + std::to_string(invalid_streak) + " consecutive iterations");
      continue;
    }
    invalid_streak = 0;
    const auto marginal = shuffle_marginal(batch.joint, rng);
    const auto g = dv_pullback(net, batch.joint, marginal);
    SEMCAL_CHECK(std::isfinite(g.estimate.value), ErrorCode::non_finite,
                 "MI estimate became non-finite at iteration " + std::to_string(it));
    run.mi_trace.push_back(g.estimate.value);
    finite_mi.push_back(g.estimate.value);

    const Vec6 gp = detail::pose_gradient(frames, batch, run.pose, g.joint_y);
    if (ascent_step(net.parameters(), critic_opt, g.theta)) {
      pose_opt.learning_rate = cfg.pose_rate_at(it);
      Eigen::VectorXd delta = Eigen::VectorXd::Zero(6);
      if (ascent_step(delta, pose_opt, gp)) run.pose = se3_exp(Twist(Vec6(delta))) * run.pose;
    }
    run.pose_trace.push_back(se3_log(run.pose));

    const auto w = static_cast<std::size_t>(cfg.convergence_window);
    if (finite_mi.size() >= 2 * w) {
      double recent = 0.0, before = 0.0;
      for (std::size_t i = 0; i < w; ++i) {
        recent += finite_mi[finite_mi.size() - 1 - i];
        before += finite_mi[finite_mi.size() - 1 - w - i];
      }
      if (std::abs(recent - before) / static_cast<double>(w) < cfg.convergence_threshold) {
        run.converged = true;
        break;
      }
    }
  }
  run.last_iterate = run.pose;
  run.pose = detail::tail_mean(run.pose_trace, run.pose, static_cast<std::size_t>(cfg.convergence_window));
  run.critic = std::move(net);
  run.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return run;
}

inline constexpr int kProbeCriticSteps = 1000;
inline constexpr int kProbeEvalBatches = 20;

struct PoseProbe {
  double mi = 0.0;
  Vec6 gradient = Vec6::Zero();        ///< mean pose gradient over the evaluation batches
  Vec6 total_gradient = Vec6::Zero();  ///< pose gradient over every point of every frame
};

/// Trains a fresh critic (seeded from cfg.seed) at a fixed pose, then
/// averages the DV value and pose gradient over evaluation batches and takes
/// the pose gradient over the whole data set.
inline PoseProbe probe_pose(std::span<const CalibFrame> frames, const Pose& pose, const CalibConfig& cfg,
                            int critic_steps = kProbeCriticSteps, int eval_batches = kProbeEvalBatches) {
  cfg.validate();
  detail::check_frames(frames);
  SEMCAL_CHECK(eval_batches >= 1 && critic_steps >= 0, ErrorCode::invalid_argument, "bad probe protocol");
  std::mt19937_64 rng(cfg.seed);
  StatisticsNetwork net(frames.front().cloud.num_classes, cfg.hidden, cfg.seed);
  OptimizerState opt(net.num_parameters(), cfg.critic_rate);
  detail::PointDrawer drawer(frames);
  int invalid_streak = 0;
  auto next_batch = [&] {
    for (;;) {
      auto b = detail::make_batch(frames, drawer, pose, cfg.batch_size, rng);
      if (b.joint.size() >= 2) {
        invalid_streak = 0;
        return b;
      }
      SEMCAL_CHECK(++invalid_streak < cfg.max_invalid_streak, ErrorCode::diverged, "pose sees no points");
    }
  };
  for (int s = 0; s < critic_steps; ++s) {
    const auto b = next_batch();
    const auto g = dv_pullback(net, b.joint, shuffle_marginal(b.joint, rng));
    SEMCAL_CHECK(std::isfinite(g.estimate.value), ErrorCode::non_finite, "MI estimate became non-finite");
    ascent_step(net.parameters(), opt, g.theta);
  }
  PoseProbe out;
  for (int e = 0; e < eval_batches; ++e) {
    const auto b = next_batch();
    const auto g = dv_pullback(net, b.joint, shuffle_marginal(b.joint, rng));
    SEMCAL_CHECK(std::isfinite(g.estimate.value), ErrorCode::non_finite, "MI estimate became non-finite");
    out.mi += g.estimate.value;
    out.gradient += detail::pose_gradient(frames, b, pose, g.joint_y);
  }
  out.mi /= eval_batches;
  out.gradient /= eval_batches;
  const auto all = detail::make_batch(frames, drawer.all(), pose);
  if (all.joint.size() >= 2) {
    const auto g = dv_pullback(net, all.joint, shuffle_marginal(all.joint, rng));
    out.total_gradient = detail::pose_gradient(frames, all, pose, g.joint_y);
  }
  return out;
}

/// DV estimate of the objective at each pose, one freshly trained critic per pose.
inline std::vector<double> mi_landscape(std::span<const CalibFrame> frames, std::span<const Pose> poses,
                                        const CalibConfig& cfg) {
  std::vector<double> out;
  out.reserve(poses.size());
  for (const auto& p : poses) out.push_back(probe_pose(frames, p, cfg).mi);
  return out;
}

}  // namespace semcal
