#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "semcal/error.hpp"
#include "semcal/frame.hpp"
#include "semcal/geometry.hpp"
#include "semcal/initializer.hpp"
#include "semcal/sampling.hpp"

namespace semcal {

/// Reserved classes of generated scenes. Objects use [first_object_class(C), C).
inline constexpr std::uint16_t kBackgroundClass = 0;
inline constexpr std::uint16_t kGroundClass = 1;
inline constexpr std::uint16_t kPatchClass = 2;

inline std::uint16_t first_object_class(int num_classes) {
  return static_cast<std::uint16_t>(std::min(3, num_classes - 1));
}

/// Camera looking along LiDAR +x: camera x = -y_L, camera y = -z_L, camera z = x_L.
inline Mat3 forward_camera_axes() {
  Mat3 r;
  r << 0, -1, 0, 0, 0, -1, 1, 0, 0;
  return r;
}

inline Pose default_extrinsic() {
  const Mat3 r = se3_exp(Twist(0, 0, 0, deg2rad(1.2), deg2rad(-0.8), deg2rad(1.5))).rotation() *
                 forward_camera_axes();
  const Vec3 center(0.27, -0.06, -0.08);  // camera centre in the LiDAR frame
  return Pose::from_rt(r, -r * center);
}

inline CameraIntrinsics default_camera() { return {1100.0, 1100.0, 639.5, 359.5, 1280, 720}; }

struct SceneSpec {
  std::uint64_t seed = 0;
  int num_classes = 8;
  int min_objects = 8;
  int max_objects = 14;
  double forward_fraction = 0.5;  ///< share of objects placed inside the camera's azimuth range
  double min_distance = 4.0;
  double max_distance = 25.0;
  double min_half_extent = 0.4;
  double max_half_extent = 2.0;
  double min_height = 1.0;
  double max_height = 4.0;
  int min_patches = 6;
  int max_patches = 12;
  double lidar_height = 1.73;  ///< ground plane at z = -lidar_height
  double max_range = 80.0;
  Pose ground_truth = default_extrinsic();
  SphericalConfig lidar{};
  CameraIntrinsics camera = default_camera();

  void validate() const {
    SEMCAL_CHECK(num_classes >= 2 && num_classes < 255, ErrorCode::invalid_config, "class count must be in [2, 255)");
    SEMCAL_CHECK(min_objects >= 0 && max_objects >= min_objects, ErrorCode::invalid_config, "bad object count range");
    SEMCAL_CHECK(min_patches >= 0 && max_patches >= min_patches, ErrorCode::invalid_config, "bad patch count range");
    SEMCAL_CHECK(forward_fraction >= 0.0 && forward_fraction <= 1.0, ErrorCode::invalid_config,
                 "forward fraction must lie in [0, 1]");
    SEMCAL_CHECK(min_distance > 0.0 && max_distance >= min_distance && max_distance + max_half_extent < max_range,
                 ErrorCode::invalid_config, "objects must lie within sensor range");
    SEMCAL_CHECK(min_half_extent > 0.0 && max_half_extent >= min_half_extent && min_height > 0.0 &&
                     max_height >= min_height,
                 ErrorCode::invalid_config, "bad object size range");
    SEMCAL_CHECK(min_distance > max_half_extent * std::sqrt(2.0), ErrorCode::invalid_config,
                 "objects could enclose the sensor");
    SEMCAL_CHECK(lidar_height > 0.0 && max_range > 0.0, ErrorCode::invalid_config, "bad sensor geometry");
    lidar.validate();
    camera.validate();
  }
};

/// Box (yawed, resting on the ground) or vertical cylinder.
struct SceneObject {
  enum class Shape { box, cylinder };
  Shape shape = Shape::box;
  Vec2 center = Vec2::Zero();
  double yaw = 0.0;
  double half_x = 1.0;  ///< radius for cylinders
  double half_y = 1.0;
  double height = 1.0;
  std::uint16_t label = 0;
};

/// Flat disc of class kPatchClass painted on the ground.
struct GroundPatch {
  Vec2 center = Vec2::Zero();
  double radius = 1.0;
};

struct Scene {
  double ground_z = 0.0;
  double max_range = 0.0;
  std::vector<SceneObject> objects;
  std::vector<GroundPatch> patches;
  int num_classes = 0;
};

struct RayHit {
  double t = std::numeric_limits<double>::infinity();
  std::uint16_t label = kBackgroundClass;
  bool hit() const { return std::isfinite(t); }
};

namespace detail {

inline double intersect_box(const SceneObject& o, double ground_z, const Vec3& origin, const Vec3& dir) {
  const double c = std::cos(o.yaw), s = std::sin(o.yaw);
  const Vec3 lo(origin.x() - o.center.x(), origin.y() - o.center.y(), origin.z() - ground_z);
  const Vec3 p(c * lo.x() + s * lo.y(), -s * lo.x() + c * lo.y(), lo.z());
  const Vec3 d(c * dir.x() + s * dir.y(), -s * dir.x() + c * dir.y(), dir.z());
  const Vec3 bmin(-o.half_x, -o.half_y, 0.0), bmax(o.half_x, o.half_y, o.height);
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (p[a] < bmin[a] || p[a] > bmax[a]) return std::numeric_limits<double>::infinity();
      continue;
    }
    double ta = (bmin[a] - p[a]) / d[a], tb = (bmax[a] - p[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return std::numeric_limits<double>::infinity();
  }
  return t0 > 0.0 ? t0 : std::numeric_limits<double>::infinity();
}

inline double intersect_cylinder(const SceneObject& o, double ground_z, const Vec3& origin, const Vec3& dir) {
  const double ox = origin.x() - o.center.x(), oy = origin.y() - o.center.y();
  const double top = ground_z + o.height;
  double best = std::numeric_limits<double>::infinity();
  const double a = dir.x() * dir.x() + dir.y() * dir.y();
  if (a > 1e-15) {
    const double b = ox * dir.x() + oy * dir.y();
    const double c = ox * ox + oy * oy - o.half_x * o.half_x;
    const double disc = b * b - a * c;
    if (disc >= 0.0) {
      const double t = (-b - std::sqrt(disc)) / a;
      const double z = origin.z() + t * dir.z();
      if (t > 0.0 && z >= ground_z && z <= top) best = t;
    }
  }
  if (std::abs(dir.z()) > 1e-15) {
    const double t = (top - origin.z()) / dir.z();
    const double x = ox + t * dir.x(), y = oy + t * dir.y();
    if (t > 0.0 && x * x + y * y <= o.half_x * o.half_x) best = std::min(best, t);
  }
  return best;
}

}  // namespace detail

/// Nearest hit along origin + t dir (dir need not be unit length; t scales
/// with it). Hits beyond max_range along the ray are dropped.
inline RayHit cast_ray(const Scene& scene, const Vec3& origin, const Vec3& dir) {
  RayHit h;
  const double len = dir.norm();
  if (dir.z() < 0.0) {
    const double t = (scene.ground_z - origin.z()) / dir.z();
    if (t > 0.0) {
      h.t = t;
      h.label = kGroundClass;
      const Vec3 g = origin + t * dir;
      for (const auto& p : scene.patches)
        if ((g.head<2>() - p.center).squaredNorm() <= p.radius * p.radius) {
          h.label = kPatchClass;
          break;
        }
    }
  }
  for (const auto& o : scene.objects) {
    const double t = o.shape == SceneObject::Shape::box ? detail::intersect_box(o, scene.ground_z, origin, dir)
                                                        : detail::intersect_cylinder(o, scene.ground_z, origin, dir);
    if (t < h.t) {
      h.t = t;
      h.label = o.label;
    }
  }
  if (h.t * len > scene.max_range) h = RayHit{};
  return h;
}

/// Random layout for one frame; object labels cover [first_object_class(C), C).
inline Scene random_scene(const SceneSpec& spec, std::mt19937_64& rng) {
  Scene s;
  s.ground_z = -spec.lidar_height;
  s.max_range = spec.max_range;
  s.num_classes = spec.num_classes;
  using U = std::uniform_real_distribution<double>;
  const double half_cam = 0.5 * deg2rad(spec.camera.fov_h_deg());
  auto azimuth = [&](bool forward) { return forward ? U(-half_cam, half_cam)(rng) : U(-kPi, kPi)(rng); };
  const int n_obj = std::uniform_int_distribution<int>(spec.min_objects, spec.max_objects)(rng);
  const auto first = first_object_class(spec.num_classes);
  std::uniform_int_distribution<int> label(first, spec.num_classes - 1);
  for (int i = 0; i < n_obj; ++i) {
    SceneObject o;
    o.shape = U(0.0, 1.0)(rng) < 0.5 ? SceneObject::Shape::box : SceneObject::Shape::cylinder;
    const double az = azimuth(U(0.0, 1.0)(rng) < spec.forward_fraction);
    const double r = U(spec.min_distance, spec.max_distance)(rng);
    o.center = {r * std::cos(az), r * std::sin(az)};
    o.yaw = U(0.0, kPi)(rng);
    o.half_x = U(spec.min_half_extent, spec.max_half_extent)(rng);
    o.half_y = o.shape == SceneObject::Shape::box ? U(spec.min_half_extent, spec.max_half_extent)(rng) : o.half_x;
    o.height = U(spec.min_height, spec.max_height)(rng);
    o.label = static_cast<std::uint16_t>(label(rng));
    s.objects.push_back(o);
  }
  if (spec.num_classes > kPatchClass) {
    const int n_patch = std::uniform_int_distribution<int>(spec.min_patches, spec.max_patches)(rng);
    for (int i = 0; i < n_patch; ++i) {
      GroundPatch p;
      const double az = azimuth(U(0.0, 1.0)(rng) < spec.forward_fraction);
      const double r = U(spec.min_distance, 30.0)(rng);
      p.center = {r * std::cos(az), r * std::sin(az)};
      p.radius = U(0.5, 2.0)(rng);
      s.patches.push_back(p);
    }
  }
  return s;
}

/// Returns along the spherical ray grid, one per bin centre with a hit.
/// Coordinates are rounded to float precision, as stored on disk.
inline PointCloudFrame scan_lidar(const Scene& scene, const SphericalConfig& lidar, int frame_id) {
  PointCloudFrame f;
  f.num_classes = scene.num_classes;
  f.frame_id = frame_id;
  for (int r = 0; r < lidar.rows; ++r)
    for (int c = 0; c < lidar.cols; ++c) {
      const Vec3 d = lidar.ray(r, c);
      const RayHit h = cast_ray(scene, Vec3::Zero(), d);
      if (!h.hit()) continue;
      const Vec3 p = h.t * d;
      f.points.emplace_back(static_cast<float>(p.x()), static_cast<float>(p.y()), static_cast<float>(p.z()));
      f.labels.push_back(h.label);
    }
  return f;
}

/// Per-pixel ray cast through pixel centres; rays that miss everything get
/// kBackgroundClass.
inline LabelImage render_labels(const Scene& scene, const Pose& extrinsic, const CameraIntrinsics& k) {
  const Pose cam_to_lidar = extrinsic.inverse();
  const Vec3 origin = cam_to_lidar.translation();
  const Mat3& r = cam_to_lidar.rotation();
  std::vector<std::uint16_t> labels(static_cast<std::size_t>(k.width) * k.height);
  for (int v = 0; v < k.height; ++v)
    for (int u = 0; u < k.width; ++u) {
      const Vec3 d = r * Vec3((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
      labels[static_cast<std::size_t>(v) * k.width + u] = cast_ray(scene, origin, d).label;
    }
  return LabelImage(k.width, k.height, scene.num_classes, std::move(labels));
}

struct GroundTruthBundle {
  SceneSpec spec;
  Pose ground_truth;
  std::vector<Scene> scenes;
  std::vector<CalibFrame> frames;
};

inline std::mt19937_64 frame_rng(std::uint64_t seed, int frame) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(frame)};
  return std::mt19937_64(seq);
}

/// One random layout per frame, seeded by (spec.seed, frame index).
inline GroundTruthBundle generate(const SceneSpec& spec, int n_frames) {
  spec.validate();
  SEMCAL_CHECK(n_frames >= 1, ErrorCode::invalid_config, "frame count must be positive");
  GroundTruthBundle b;
  b.spec = spec;
  b.ground_truth = spec.ground_truth;
  for (int i = 0; i < n_frames; ++i) {
    auto rng = frame_rng(spec.seed, i);
    b.scenes.push_back(random_scene(spec, rng));
    CalibFrame f{scan_lidar(b.scenes.back(), spec.lidar, i), render_labels(b.scenes.back(), spec.ground_truth,
                                                                           spec.camera),
                 spec.camera};
    SEMCAL_CHECK(!f.cloud.points.empty(), ErrorCode::invalid_config, "LiDAR recorded no returns");
    b.frames.push_back(std::move(f));
  }
  return b;
}

/// Independently replaces each point and pixel label, with probability p, by
/// a uniformly drawn different class.
inline void corrupt_labels(std::vector<CalibFrame>& frames, double p, std::uint64_t seed) {
  SEMCAL_CHECK(p >= 0.0 && p <= 1.0, ErrorCode::invalid_argument, "flip probability must lie in [0, 1]");
  if (p == 0.0) return;
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution flip(p);
  auto flipped = [&](std::uint16_t l, int classes) {
    const auto other = std::uniform_int_distribution<int>(0, classes - 2)(rng);
    return static_cast<std::uint16_t>(other >= l ? other + 1 : other);
  };
  for (auto& f : frames) {
    const int c = f.cloud.num_classes;
    SEMCAL_CHECK(c >= 2, ErrorCode::invalid_argument, "label flips need at least two classes");
    for (auto& l : f.cloud.labels)
      if (flip(rng)) l = flipped(l, c);
    std::vector<std::uint16_t> px(f.image.labels().begin(), f.image.labels().end());
    for (auto& l : px)
      if (flip(rng)) l = flipped(l, c);
    f.image = LabelImage(f.image.width(), f.image.height(), c, std::move(px));
  }
}

inline GroundTruthBundle corrupt_labels(GroundTruthBundle bundle, double p, std::uint64_t seed) {
  corrupt_labels(bundle.frames, p, seed);
  return bundle;
}

struct PoseError {
  double rotation_deg = 0.0;
  double translation_m = 0.0;
};

inline PoseError pose_error(const Pose& est, const Pose& gt) {
  return {rad2deg(rotation_angle(est.rotation() * gt.rotation().transpose())),
          (est.translation() - gt.translation()).norm()};
}

/// Ground truth with each rotation axis turned by +-rot_deg and each
/// translation component shifted by +-trans_m, signs drawn from rng.
inline Pose perturb_pose(const Pose& gt, double rot_deg, double trans_m, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  Vec3 w, dt;
  for (int i = 0; i < 3; ++i) w[i] = (coin(rng) ? 1.0 : -1.0) * deg2rad(rot_deg);
  for (int i = 0; i < 3; ++i) dt[i] = (coin(rng) ? 1.0 : -1.0) * trans_m;
  const Mat3 r = se3_exp(Twist(0, 0, 0, w.x(), w.y(), w.z())).rotation();
  return Pose::from_rt(r * gt.rotation(), gt.translation() + dt);
}

struct LabelConsistency {
  std::size_t checked = 0;  ///< valid, unoccluded points
  std::size_t agree = 0;
  std::size_t occluded = 0;
  double fraction() const { return checked ? static_cast<double>(agree) / static_cast<double>(checked) : 1.0; }
};

/// Compares each point's label with the pixel it projects to. A point is
/// occluded when the camera ray through that pixel hits something more than
/// occlusion_tol metres closer than the point.
inline LabelConsistency label_consistency(const CalibFrame& frame, const Scene& scene, const Pose& pose,
                                          double occlusion_tol = 0.05) {
  LabelConsistency out;
  const auto proj = project(frame.cloud.points, pose, frame.intrinsics);
  const Pose inv = pose.inverse();
  const auto& k = frame.intrinsics;
  for (std::size_t i = 0; i < proj.size(); ++i) {
    if (!proj.valid[i]) continue;
    const int u = static_cast<int>(std::lround(proj.uv[i].x())), v = static_cast<int>(std::lround(proj.uv[i].y()));
    const Vec3 d = inv.rotation() * Vec3((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    const RayHit h = cast_ray(scene, inv.translation(), d);
    const double point_dist = (frame.cloud.points[i] - inv.translation()).norm();
    if (h.hit() && h.t * d.norm() < point_dist - occlusion_tol) {
      ++out.occluded;
      continue;
    }
    ++out.checked;
    if (frame.image.at(v, u) == frame.cloud.labels[i]) ++out.agree;
  }
  return out;
}

}  // namespace semcal
