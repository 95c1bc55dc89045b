#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "semcal/error.hpp"

namespace semcal {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kDepthEpsilon = 1e-6;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

/// Skew-symmetric matrix such that hat(a) * b == a.cross(b).
inline Mat3 hat(const Vec3& w) {
  Mat3 m;
  m << 0.0, -w.z(), w.y(),
       w.z(), 0.0, -w.x(),
       -w.y(), w.x(), 0.0;
  return m;
}

inline Vec3 vee(const Mat3& m) { return {m(2, 1), m(0, 2), m(1, 0)}; }

/// se(3) coordinates, translation first: (t_x, t_y, t_z, r_x, r_y, r_z).
struct Twist {
  Vec6 v = Vec6::Zero();

  Twist() = default;
  explicit Twist(const Vec6& coords) : v(coords) {}
  Twist(double tx, double ty, double tz, double rx, double ry, double rz) {
    v << tx, ty, tz, rx, ry, rz;
  }

  Vec3 translation() const { return v.head<3>(); }
  Vec3 rotation() const { return v.tail<3>(); }
  bool finite() const { return v.allFinite(); }
  double operator[](int i) const { return v[i]; }
};

/// Generator B_i of se(3) as a 4x4 matrix, in Twist order.
inline Mat4 generator(int i) {
  Mat4 b = Mat4::Zero();
  if (i < 3) {
    b(i, 3) = 1.0;
  } else {
    Vec3 axis = Vec3::Zero();
    axis[i - 3] = 1.0;
    b.topLeftCorner<3, 3>() = hat(axis);
  }
  return b;
}

/// Sum of v_i B_i.
inline Mat4 twist_matrix(const Twist& tw) {
  Mat4 h = Mat4::Zero();
  for (int i = 0; i < 6; ++i) h += tw[i] * generator(i);
  return h;
}

class Pose;
inline Pose se3_exp(const Twist& tw);

/// Rigid transform x -> R x + t.
class Pose {
 public:
  Pose() : r_(Mat3::Identity()), t_(Vec3::Zero()) {}

  /// Validates the rotation block; use this for data from outside the library.
  static Pose from_rt(const Mat3& r, const Vec3& t, double tol = 1e-9) {
    SEMCAL_CHECK(r.allFinite() && t.allFinite(), ErrorCode::invalid_argument,
                 "pose has non-finite entries");
    SEMCAL_CHECK((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol,
                 ErrorCode::invalid_argument, "rotation is not orthonormal");
    SEMCAL_CHECK(std::abs(r.determinant() - 1.0) <= tol, ErrorCode::invalid_argument,
                 "rotation determinant is not 1");
    return Pose(r, t, Unchecked{});
  }

  static Pose from_matrix(const Mat4& m, double tol = 1e-9) {
    SEMCAL_CHECK(m.allFinite(), ErrorCode::invalid_argument, "pose has non-finite entries");
    SEMCAL_CHECK(std::abs(m(3, 0)) + std::abs(m(3, 1)) + std::abs(m(3, 2)) + std::abs(m(3, 3) - 1.0) <= tol,
                 ErrorCode::invalid_argument, "last row of a rigid transform must be 0 0 0 1");
    return from_rt(m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>(), tol);
  }

  /// Projects an approximate rotation onto SO(3) first.
  static Pose nearest(const Mat3& r, const Vec3& t);

  static Pose identity() { return {}; }

  const Mat3& rotation() const { return r_; }
  const Vec3& translation() const { return t_; }

  Vec3 operator*(const Vec3& p) const { return r_ * p + t_; }
  Pose operator*(const Pose& o) const { return Pose(r_ * o.r_, r_ * o.t_ + t_, Unchecked{}); }
  Pose inverse() const {
    Mat3 rt = r_.transpose();
    return Pose(rt, -rt * t_, Unchecked{});
  }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = r_;
    m.topRightCorner<3, 1>() = t_;
    return m;
  }

 private:
  struct Unchecked {};
  Pose(const Mat3& r, const Vec3& t, Unchecked) : r_(r), t_(t) {}

  friend Pose se3_exp(const Twist& tw);

  Mat3 r_;
  Vec3 t_;
};

/// Closed-form matrix exponential of sum v_i B_i.
///
/// Rotation via Rodrigues, translation via the left Jacobian V. Below a
/// rotation angle of 1e-8 the trigonometric coefficients switch to their
/// Taylor expansions.
inline Pose se3_exp(const Twist& tw) {
  SEMCAL_CHECK(tw.finite(), ErrorCode::invalid_argument, "twist has non-finite components");
  const Vec3 w = tw.rotation();
  const double theta2 = w.squaredNorm();
  const double theta = std::sqrt(theta2);
  double a, b, c;
  if (theta < 1e-8) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
    c = 1.0 / 6.0 - theta2 / 120.0;
  } else {
    const double s = std::sin(theta), co = std::cos(theta);
    a = s / theta;
    b = (1.0 - co) / theta2;
    c = (theta - s) / (theta2 * theta);
  }
  const Mat3 wx = hat(w);
  const Mat3 wx2 = wx * wx;
  const Mat3 r = Mat3::Identity() + a * wx + b * wx2;
  const Mat3 v = Mat3::Identity() + b * wx + c * wx2;
  return Pose(r, v * tw.translation(), Pose::Unchecked{});
}

/// Rotation angle of R in [0, pi].
inline double rotation_angle(const Mat3& r) {
  const double s = 0.5 * vee(r - r.transpose()).norm();
  const double c = 0.5 * (r.trace() - 1.0);
  return std::atan2(s, c);
}

/// Inverse of se3_exp for rotation angles below pi - 1e-6.
inline Twist se3_log(const Pose& p) {
  const Mat3& r = p.rotation();
  const double theta = rotation_angle(r);
  SEMCAL_CHECK(theta < kPi - 1e-6, ErrorCode::degenerate_rotation,
               "rotation angle too close to pi for a unique logarithm");
  const double theta2 = theta * theta;
  // theta / (2 sin theta), expanded near zero.
  const double k = theta < 1e-5 ? 0.5 * (1.0 + theta2 / 6.0) : theta / (2.0 * std::sin(theta));
  const Vec3 w = k * vee(r - r.transpose());
  const Mat3 wx = hat(w);
  // V^-1 = I - wx/2 + d * wx^2, d = (1 - a / (2 b)) / theta^2.
  double d;
  if (theta < 1e-5) {
    d = 1.0 / 12.0 + theta2 / 720.0;
  } else {
    const double a = std::sin(theta) / theta;
    const double b = (1.0 - std::cos(theta)) / theta2;
    d = (1.0 - a / (2.0 * b)) / theta2;
  }
  const Mat3 vinv = Mat3::Identity() - 0.5 * wx + d * wx * wx;
  Twist out;
  out.v.head<3>() = vinv * p.translation();
  out.v.tail<3>() = w;
  return out;
}

inline Pose Pose::nearest(const Mat3& r, const Vec3& t) {
  Eigen::JacobiSVD<Mat3> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  const Mat3 v = svd.matrixV();
  if ((u * v.transpose()).determinant() < 0.0) u.col(2) = -u.col(2);
  return Pose(u * v.transpose(), t, Unchecked{});
}

/// Pinhole camera without distortion. Pixel (u, v) = (column, row); integer
/// coordinates are pixel centres.
struct CameraIntrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;

  void validate() const {
    SEMCAL_CHECK(fx > 0.0 && fy > 0.0, ErrorCode::invalid_argument, "focal lengths must be positive");
    SEMCAL_CHECK(width > 0 && height > 0, ErrorCode::invalid_argument, "image size must be positive");
    SEMCAL_CHECK(cx > 0.0 && cx < width && cy > 0.0 && cy < height, ErrorCode::invalid_argument,
                 "principal point must lie inside the image");
  }

  double fov_h_deg() const { return rad2deg(2.0 * std::atan(0.5 * width / fx)); }
  double fov_v_deg() const { return rad2deg(2.0 * std::atan(0.5 * height / fy)); }

  bool inside(const Vec2& uv) const {
    return uv.x() >= 0.0 && uv.x() <= width - 1.0 && uv.y() >= 0.0 && uv.y() <= height - 1.0;
  }
};

struct ProjectedPoints {
  std::vector<Vec2> uv;
  std::vector<double> depth;
  std::vector<std::uint8_t> valid;

  std::size_t size() const { return uv.size(); }
  std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto f : valid) n += f;
    return n;
  }
};

/// Projects LiDAR points with the extrinsic pose. Points that land behind the
/// camera or outside the closed image rectangle stay in the output, masked
/// invalid, so indices keep lining up with per-point labels.
inline ProjectedPoints project(std::span<const Vec3> points, const Pose& pose, const CameraIntrinsics& k) {
  SEMCAL_CHECK(!points.empty(), ErrorCode::invalid_argument, "cannot project an empty point list");
  ProjectedPoints out;
  out.uv.resize(points.size());
  out.depth.resize(points.size());
  out.valid.assign(points.size(), 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Vec3 q = pose * points[i];
    out.depth[i] = q.z();
    if (q.z() > kDepthEpsilon) {
      out.uv[i] = {k.fx * q.x() / q.z() + k.cx, k.fy * q.y() / q.z() + k.cy};
      out.valid[i] = k.inside(out.uv[i]) ? 1 : 0;
    } else {
      out.uv[i] = Vec2::Constant(std::numeric_limits<double>::quiet_NaN());
    }
  }
  return out;
}

/// d(u, v)/d(delta) for a camera-frame point q under the left perturbation
/// exp(sum delta_j B_j) * pose, at delta = 0.
inline Eigen::Matrix<double, 2, 6> projection_jacobian(const Vec3& q, const CameraIntrinsics& k) {
  const double iz = 1.0 / q.z();
  Eigen::Matrix<double, 2, 3> duv_dq;
  duv_dq << k.fx * iz, 0.0, -k.fx * q.x() * iz * iz,
            0.0, k.fy * iz, -k.fy * q.y() * iz * iz;
  Eigen::Matrix<double, 3, 6> dq_dd;
  dq_dd.leftCols<3>().setIdentity();
  dq_dd.rightCols<3>() = -hat(q);
  return duv_dq * dq_dd;
}

/// Gradient of sum_i <grad_uv_i, uv_i> with respect to a left increment of
/// the pose. Entries for invalid projections are ignored.
inline Vec6 project_pullback(std::span<const Vec3> points, const Pose& pose, const CameraIntrinsics& k,
                             std::span<const Vec2> grad_uv) {
  SEMCAL_CHECK(points.size() == grad_uv.size(), ErrorCode::invalid_argument,
               "gradient count does not match point count");
  Vec6 g = Vec6::Zero();
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Vec3 q = pose * points[i];
    if (q.z() <= kDepthEpsilon) continue;
    const Vec2 uv{k.fx * q.x() / q.z() + k.cx, k.fy * q.y() / q.z() + k.cy};
    if (!k.inside(uv)) continue;
    g += projection_jacobian(q, k).transpose() * grad_uv[i];
  }
  return g;
}

}  // namespace semcal
