#pragma once

#include <Eigen/Core>
#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "semcal/error.hpp"
#include "semcal/frame.hpp"
#include "semcal/geometry.hpp"
#include "semcal/sampling.hpp"

namespace semcal {

/// Angular layout of the LiDAR range image plus the camera field of view it
/// is compared against. Both FoVs are centred: column W/2 looks along +x and
/// row H/2 is zero elevation.
struct SphericalConfig {
  double lidar_fov_h_deg = 360.0;
  double lidar_fov_v_deg = 40.0;
  int rows = 64;    ///< channels
  int cols = 800;   ///< points per ring
  double camera_fov_h_deg = 60.0;
  double camera_fov_v_deg = 36.0;

  void validate() const {
    SEMCAL_CHECK(lidar_fov_h_deg > 0 && lidar_fov_h_deg <= 360 && lidar_fov_v_deg > 0 && lidar_fov_v_deg <= 360 &&
                     camera_fov_h_deg > 0 && camera_fov_h_deg <= 360 && camera_fov_v_deg > 0 &&
                     camera_fov_v_deg <= 360,
                 ErrorCode::invalid_config, "fields of view must lie in (0, 360]");
    SEMCAL_CHECK(rows > 0 && cols > 0, ErrorCode::invalid_config, "range image size must be positive");
  }

  bool cyclic() const { return lidar_fov_h_deg >= 360.0; }

  SphericalConfig with_camera(const CameraIntrinsics& k) const {
    SphericalConfig c = *this;
    c.camera_fov_h_deg = k.fov_h_deg();
    c.camera_fov_v_deg = k.fov_v_deg();
    return c;
  }

  // Columns run clockwise seen from above (decreasing azimuth), matching the
  // left-to-right direction of a forward-looking camera.
  double column_azimuth_deg(double col) const { return 0.5 * lidar_fov_h_deg - (col + 0.5) * lidar_fov_h_deg / cols; }
  double row_elevation_deg(double row) const { return 0.5 * lidar_fov_v_deg - (row + 0.5) * lidar_fov_v_deg / rows; }

  Vec3 ray(int row, int col) const {
    const double az = deg2rad(column_azimuth_deg(col)), el = deg2rad(row_elevation_deg(row));
    return {std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)};
  }

  /// (row, col) of the bin containing direction p, if it is inside the FoV.
  std::optional<std::pair<int, int>> bin_of(const Vec3& p) const {
    const double r = p.norm();
    if (!(r > 0.0)) return std::nullopt;
    const double az = rad2deg(std::atan2(p.y(), p.x()));
    const double el = rad2deg(std::asin(std::clamp(p.z() / r, -1.0, 1.0)));
    int col = static_cast<int>(std::floor((0.5 * lidar_fov_h_deg - az) / lidar_fov_h_deg * cols));
    const int row = static_cast<int>(std::floor((0.5 * lidar_fov_v_deg - el) / lidar_fov_v_deg * rows));
    if (cyclic()) col = ((col % cols) + cols) % cols;
    if (row < 0 || row >= rows || col < 0 || col >= cols) return std::nullopt;
    return std::make_pair(row, col);
  }
};

/// LiDAR labels on the angular grid. Empty bins hold the sentinel class
/// num_classes and index -1.
struct SphericalLabelImage {
  int rows = 0;
  int cols = 0;
  int num_classes = 0;
  bool cyclic = true;
  std::vector<std::uint16_t> labels;
  std::vector<std::int64_t> index;
  std::vector<double> range;
  std::size_t skipped_zero_norm = 0;

  std::uint16_t sentinel() const { return static_cast<std::uint16_t>(num_classes); }
  std::size_t offset(int row, int col) const { return static_cast<std::size_t>(row) * cols + col; }
  std::uint16_t label(int row, int col) const { return labels[offset(row, col)]; }
  bool labeled(int row, int col) const { return index[offset(row, col)] >= 0; }
};

/// Nearest point wins each bin; points outside the FoV are dropped and
/// zero-norm points counted in skipped_zero_norm.
inline SphericalLabelImage spherical_project(std::span<const Vec3> points, std::span<const std::uint16_t> labels,
                                             int num_classes, const SphericalConfig& cfg) {
  cfg.validate();
  SEMCAL_CHECK(!points.empty(), ErrorCode::invalid_argument, "cannot project an empty cloud");
  SEMCAL_CHECK(points.size() == labels.size(), ErrorCode::invalid_argument, "labels are not aligned with points");
  SphericalLabelImage img;
  img.rows = cfg.rows;
  img.cols = cfg.cols;
  img.num_classes = num_classes;
  img.cyclic = cfg.cyclic();
  const auto n = static_cast<std::size_t>(cfg.rows) * cfg.cols;
  img.labels.assign(n, img.sentinel());
  img.index.assign(n, -1);
  img.range.assign(n, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double r = points[i].norm();
    if (!(r > 0.0)) {
      ++img.skipped_zero_norm;
      continue;
    }
    const auto bin = cfg.bin_of(points[i]);
    if (!bin) continue;
    const auto o = img.offset(bin->first, bin->second);
    if (r < img.range[o]) {
      img.range[o] = r;
      img.labels[o] = labels[i];
      img.index[o] = static_cast<std::int64_t>(i);
    }
  }
  return img;
}

/// Camera label image resampled to the LiDAR's angular resolution, with the
/// map back to original pixel coordinates.
struct ZoomedLabelImage {
  LabelImage image;
  int source_width = 0;
  int source_height = 0;

  double scale_x() const { return static_cast<double>(source_width) / image.width(); }
  double scale_y() const { return static_cast<double>(source_height) / image.height(); }

  /// Centre of zoomed pixel (row, col) in original pixel coordinates.
  Vec2 to_source(int row, int col) const { return {(col + 0.5) * scale_x() - 0.5, (row + 0.5) * scale_y() - 0.5}; }
  /// Zoomed pixel containing original pixel coordinate uv.
  std::pair<int, int> from_source(const Vec2& uv) const {
    return {std::clamp(static_cast<int>(std::floor((uv.y() + 0.5) / scale_y())), 0, image.height() - 1),
            std::clamp(static_cast<int>(std::floor((uv.x() + 0.5) / scale_x())), 0, image.width() - 1)};
  }
};

/// Nearest-neighbour resize; class IDs are never blended.
inline ZoomedLabelImage zoom_label_image(const LabelImage& img, int width, int height) {
  SEMCAL_CHECK(width >= 2 && height >= 2, ErrorCode::invalid_config, "zoomed image would be smaller than 2x2");
  std::vector<std::uint16_t> out(static_cast<std::size_t>(width) * height);
  const double sx = static_cast<double>(img.width()) / width, sy = static_cast<double>(img.height()) / height;
  for (int r = 0; r < height; ++r) {
    const int sr = std::min(static_cast<int>(std::floor((r + 0.5) * sy)), img.height() - 1);
    for (int c = 0; c < width; ++c) {
      const int sc = std::min(static_cast<int>(std::floor((c + 0.5) * sx)), img.width() - 1);
      out[static_cast<std::size_t>(r) * width + c] = img.at(sr, sc);
    }
  }
  return {LabelImage(width, height, img.num_classes(), std::move(out)), img.width(), img.height()};
}

/// Zoomed (width, height) giving one pixel per LiDAR bin: width pairs with
/// the horizontal FoVs, height with the vertical ones.
inline std::pair<int, int> zoom_size(const SphericalConfig& cfg) {
  cfg.validate();
  return {static_cast<int>(std::lround(cfg.cols * cfg.camera_fov_h_deg / cfg.lidar_fov_h_deg)),
          static_cast<int>(std::lround(cfg.rows * cfg.camera_fov_v_deg / cfg.lidar_fov_v_deg))};
}

inline ZoomedLabelImage zoom_label_image(const LabelImage& img, const SphericalConfig& cfg) {
  SEMCAL_CHECK(cfg.camera_fov_h_deg <= cfg.lidar_fov_h_deg && cfg.camera_fov_v_deg <= cfg.lidar_fov_v_deg,
               ErrorCode::invalid_config, "camera field of view exceeds the LiDAR's");
  const auto [w, h] = zoom_size(cfg);
  return zoom_label_image(img, w, h);
}

/// Plug-in mutual information (nats) of paired labels. Entries at or above
/// their class count are unlabeled and skipped.
inline double discrete_mi(std::span<const std::uint16_t> a, std::span<const std::uint16_t> b, int classes_a,
                          int classes_b) {
  SEMCAL_CHECK(a.size() == b.size(), ErrorCode::invalid_argument, "label sequences differ in length");
  std::vector<double> joint(static_cast<std::size_t>(classes_a) * classes_b, 0.0);
  double n = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] >= classes_a || b[i] >= classes_b) continue;
    joint[static_cast<std::size_t>(a[i]) * classes_b + b[i]] += 1.0;
    n += 1.0;
  }
  SEMCAL_CHECK(n > 0.0, ErrorCode::invalid_argument, "no labeled overlap");
  std::vector<double> pa(classes_a, 0.0), pb(classes_b, 0.0);
  for (int i = 0; i < classes_a; ++i)
    for (int j = 0; j < classes_b; ++j) {
      pa[i] += joint[static_cast<std::size_t>(i) * classes_b + j];
      pb[j] += joint[static_cast<std::size_t>(i) * classes_b + j];
    }
  double mi = 0.0;
  for (int i = 0; i < classes_a; ++i)
    for (int j = 0; j < classes_b; ++j) {
      const double nij = joint[static_cast<std::size_t>(i) * classes_b + j];
      if (nij > 0.0) mi += nij / n * std::log(nij * n / (pa[i] * pb[j]));
    }
  return mi;
}

inline double discrete_mi(const LabelImage& a, const LabelImage& b) {
  SEMCAL_CHECK(a.width() == b.width() && a.height() == b.height(), ErrorCode::invalid_argument,
               "images differ in size");
  return discrete_mi(a.labels(), b.labels(), a.num_classes(), b.num_classes());
}

/// Best integer placement of the zoomed camera image on the range image:
/// moving pixel (r, c) sits on fixed bin (r + dv, c + du), wrapping columns
/// when the LiDAR covers a full turn.
struct RegistrationResult {
  int du = 0;
  int dv = 0;
  double score = 0.0;
  int du_min = 0, du_max = 0;  ///< inclusive search window
  int dv_min = 0, dv_max = 0;
  std::vector<double> score_map;  ///< (dv - dv_min) * width + (du - du_min); NaN where not evaluated

  int window_width() const { return du_max - du_min + 1; }
  double score_at(int du_, int dv_) const {
    return score_map[static_cast<std::size_t>(dv_ - dv_min) * window_width() + (du_ - du_min)];
  }
};

namespace detail {

inline int wrap(int c, int n) { return ((c % n) + n) % n; }

}  // namespace detail

/// Exhaustive search over the full azimuth (or every overlapping column when
/// the LiDAR is not cyclic) and +-rows/2, restricted to offsets whose
/// in-bounds overlap covers at least half of the moving image and whose
/// labeled-bin count is at least half the largest one. Returns the argmax of
/// the plug-in MI, ties going to the smallest |(du, dv)| and then
/// lexicographic order.
inline RegistrationResult register_2d(const SphericalLabelImage& fixed, const LabelImage& moving) {
  const int hf = fixed.rows, wf = fixed.cols, hm = moving.height(), wm = moving.width();
  SEMCAL_CHECK(hm <= hf && wm <= wf, ErrorCode::invalid_argument, "moving image is larger than the range image");
  RegistrationResult res;
  if (fixed.cyclic) {
    res.du_min = -((wf - 1) / 2);
    res.du_max = wf / 2;
  } else {
    res.du_min = -wm + 1;
    res.du_max = wf - 1;
  }
  res.dv_min = -(hf / 2);
  res.dv_max = hf / 2;
  const auto total = static_cast<std::size_t>(hm) * wm;
  res.score_map.assign(static_cast<std::size_t>(res.dv_max - res.dv_min + 1) * res.window_width(),
                       std::numeric_limits<double>::quiet_NaN());

  const int ca = fixed.num_classes + 1, cb = moving.num_classes();
  const std::uint16_t* moving_labels = moving.labels().data();
  std::vector<double> joint(static_cast<std::size_t>(ca) * cb);
  std::vector<double> pa(ca), pb(cb);
  std::vector<double> labeled(res.score_map.size(), 0.0);
  double max_labeled = 0.0;
  for (int dv = res.dv_min; dv <= res.dv_max; ++dv) {
    const int r0 = std::max(0, -dv), r1 = std::min(hm, hf - dv);
    if (r1 <= r0) continue;
    for (int du = res.du_min; du <= res.du_max; ++du) {
      int c0 = 0, c1 = wm;
      if (!fixed.cyclic) {
        c0 = std::max(0, -du);
        c1 = std::min(wm, wf - du);
        if (c1 <= c0) continue;
      }
      const auto overlap = static_cast<std::size_t>(r1 - r0) * (c1 - c0);
      if (2 * overlap < total) continue;
      // sentinel bins land in row num_classes of the histogram and are dropped below
      std::fill(joint.begin(), joint.end(), 0.0);
      for (int r = r0; r < r1; ++r) {
        const std::uint16_t* frow = fixed.labels.data() + static_cast<std::size_t>(r + dv) * wf;
        const std::uint16_t* mrow = moving_labels + static_cast<std::size_t>(r) * wm;
        int c = c0;
        while (c < c1) {
          const int fc0 = fixed.cyclic ? detail::wrap(c + du, wf) : c + du;
          const int run = std::min(c1 - c, wf - fc0);
          for (int k = 0; k < run; ++k) joint[static_cast<std::size_t>(frow[fc0 + k]) * cb + mrow[c + k]] += 1.0;
          c += run;
        }
      }
      std::fill(joint.end() - cb, joint.end(), 0.0);
      double n = 0.0;
      for (double v : joint) n += v;
      if (n == 0.0) continue;
      std::fill(pa.begin(), pa.end(), 0.0);
      std::fill(pb.begin(), pb.end(), 0.0);
      for (int i = 0; i < ca; ++i)
        for (int j = 0; j < cb; ++j) {
          pa[i] += joint[static_cast<std::size_t>(i) * cb + j];
          pb[j] += joint[static_cast<std::size_t>(i) * cb + j];
        }
      double mi = 0.0;
      for (int i = 0; i < ca; ++i)
        for (int j = 0; j < cb; ++j) {
          const double nij = joint[static_cast<std::size_t>(i) * cb + j];
          if (nij > 0.0) mi += nij / n * std::log(nij * n / (pa[i] * pb[j]));
        }
      const auto cell = static_cast<std::size_t>(dv - res.dv_min) * res.window_width() + (du - res.du_min);
      res.score_map[cell] = mi;
      labeled[cell] = n;
      max_labeled = std::max(max_labeled, n);
    }
  }
  SEMCAL_CHECK(max_labeled > 0.0, ErrorCode::degenerate_scene, "no offset overlaps labeled LiDAR bins");
  // offsets covering fewer than half the best labeled overlap are not scored:
  // the plug-in estimate is biased upward on small samples
  double best = -std::numeric_limits<double>::infinity(), worst = std::numeric_limits<double>::infinity();
  bool found = false;
  const auto norm2 = [](int a, int b) { return static_cast<long>(a) * a + static_cast<long>(b) * b; };
  for (int dv = res.dv_min; dv <= res.dv_max; ++dv)
    for (int du = res.du_min; du <= res.du_max; ++du) {
      const auto cell = static_cast<std::size_t>(dv - res.dv_min) * res.window_width() + (du - res.du_min);
      if (std::isnan(res.score_map[cell])) continue;
      if (2.0 * labeled[cell] < max_labeled) {
        res.score_map[cell] = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      const double mi = res.score_map[cell];
      worst = std::min(worst, mi);
      const bool better =
          !found || mi > best + 1e-12 ||
          (std::abs(mi - best) <= 1e-12 &&
           (norm2(du, dv) < norm2(res.du, res.dv) ||
            (norm2(du, dv) == norm2(res.du, res.dv) && std::make_pair(du, dv) < std::make_pair(res.du, res.dv))));
      if (better) {
        best = std::max(best, mi);
        res.du = du;
        res.dv = dv;
        found = true;
      }
    }
  SEMCAL_CHECK(best - worst >= 1e-9, ErrorCode::degenerate_scene, "registration score map is flat");
  res.score = res.score_at(res.du, res.dv);
  return res;
}

/// Paired LiDAR points and original-resolution pixels whose classes agree.
struct Correspondences {
  std::vector<Vec3> points;
  std::vector<Vec2> pixels;
  std::vector<std::uint16_t> classes;
  std::size_t available = 0;  ///< class-agreeing bins in the overlap

  std::size_t size() const { return points.size(); }
};

inline Correspondences sample_correspondences(std::span<const Vec3> cloud, const SphericalLabelImage& fixed,
                                              const ZoomedLabelImage& moving, const RegistrationResult& reg,
                                              std::size_t n = 200, std::uint64_t seed = 0) {
  struct Candidate {
    std::int64_t point;
    int row, col;
  };
  std::vector<Candidate> agree;
  const auto& img = moving.image;
  for (int r = 0; r < img.height(); ++r) {
    const int fr = r + reg.dv;
    if (fr < 0 || fr >= fixed.rows) continue;
    for (int c = 0; c < img.width(); ++c) {
      int fc = c + reg.du;
      if (fixed.cyclic) {
        fc = detail::wrap(fc, fixed.cols);
      } else if (fc < 0 || fc >= fixed.cols) {
        continue;
      }
      if (!fixed.labeled(fr, fc) || fixed.label(fr, fc) != img.at(r, c)) continue;
      agree.push_back({fixed.index[fixed.offset(fr, fc)], r, c});
    }
  }
  SEMCAL_CHECK(agree.size() >= 6, ErrorCode::insufficient_correspondences,
               "only " + std::to_string(agree.size()) + " class-agreeing bins in the overlap");
  if (agree.size() > n) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, agree.size() - 1);
      std::swap(agree[i], agree[pick(rng)]);
    }
    agree.resize(n);
  }
  Correspondences out;
  out.available = agree.size();
  for (const auto& a : agree) {
    SEMCAL_CHECK(a.point >= 0 && static_cast<std::size_t>(a.point) < cloud.size(), ErrorCode::invalid_argument,
                 "range image index does not reference the given cloud");
    out.points.push_back(cloud[static_cast<std::size_t>(a.point)]);
    out.pixels.push_back(moving.to_source(a.row, a.col));
    out.classes.push_back(img.at(a.row, a.col));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Perspective-n-Point

struct PnpOptions {
  int iterations = 100;
  int sample_size = 6;
  double inlier_threshold_px = 5.0;
  int refine_iterations = 30;
  std::uint64_t seed = 0;
};

struct PnpResult {
  Pose pose;
  std::vector<std::uint8_t> inliers;
  std::size_t inlier_count = 0;
  double inlier_rms_px = 0.0;
};

namespace detail {

inline double reprojection_error(const Pose& pose, const Vec3& p, const Vec2& px, const CameraIntrinsics& k) {
  const Vec3 q = pose * p;
  if (q.z() <= kDepthEpsilon) return std::numeric_limits<double>::infinity();
  return (Vec2(k.fx * q.x() / q.z() + k.cx, k.fy * q.y() / q.z() + k.cy) - px).norm();
}

}  // namespace detail

/// Normalised direct linear transform followed by projection of the 3x3
/// block onto the nearest rotation.
inline Pose pnp_dlt(std::span<const Vec3> points, std::span<const Vec2> pixels, const CameraIntrinsics& k) {
  SEMCAL_CHECK(points.size() == pixels.size(), ErrorCode::invalid_argument, "point and pixel counts differ");
  SEMCAL_CHECK(points.size() >= 6, ErrorCode::invalid_argument, "PnP needs at least six correspondences");
  const auto n = static_cast<Eigen::Index>(points.size());

  Vec3 m3 = Vec3::Zero();
  Vec2 m2 = Vec2::Zero();
  std::vector<Vec2> xn(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    m3 += points[i];
    xn[i] = {(pixels[i].x() - k.cx) / k.fx, (pixels[i].y() - k.cy) / k.fy};
    m2 += xn[i];
  }
  m3 /= static_cast<double>(n);
  m2 /= static_cast<double>(n);
  double d3 = 0.0, d2 = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    d3 += (points[i] - m3).norm();
    d2 += (xn[i] - m2).norm();
  }
  SEMCAL_CHECK(d3 > 0.0 && d2 > 0.0, ErrorCode::degenerate_geometry, "correspondences collapse to a point");
  const double s3 = std::sqrt(3.0) * static_cast<double>(n) / d3, s2 = std::sqrt(2.0) * static_cast<double>(n) / d2;

  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2 * n, 12);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto si = static_cast<std::size_t>(i);
    Eigen::RowVector4d xw;
    xw << s3 * (points[si] - m3).transpose(), 1.0;
    const Vec2 x = s2 * (xn[si] - m2);
    a.block<1, 4>(2 * i, 0) = xw;
    a.block<1, 4>(2 * i, 8) = -x.x() * xw;
    a.block<1, 4>(2 * i + 1, 4) = xw;
    a.block<1, 4>(2 * i + 1, 8) = -x.y() * xw;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  // a one-dimensional null space is required; coplanar or collinear points
  // leave at least two near-zero singular values
  SEMCAL_CHECK(sv.size() >= 12 && sv[10] > 1e-7 * sv[0], ErrorCode::degenerate_geometry,
               "correspondences are coplanar or otherwise degenerate");
  const Eigen::VectorXd p = svd.matrixV().col(11);
  Eigen::Matrix<double, 3, 4> pn;
  pn << p.segment<4>(0).transpose(), p.segment<4>(4).transpose(), p.segment<4>(8).transpose();

  Eigen::Matrix3d t2inv = Eigen::Matrix3d::Identity();
  t2inv(0, 0) = t2inv(1, 1) = 1.0 / s2;
  t2inv(0, 2) = m2.x();
  t2inv(1, 2) = m2.y();
  Eigen::Matrix4d t3 = Eigen::Matrix4d::Identity();
  t3.topLeftCorner<3, 3>() *= s3;
  t3.topRightCorner<3, 1>() = -s3 * m3;
  Eigen::Matrix<double, 3, 4> proj = t2inv * pn * t3;

  Mat3 m = proj.leftCols<3>();
  if (m.determinant() < 0.0) {
    proj = -proj;
    m = -m;
  }
  Eigen::JacobiSVD<Mat3> ms(m);
  const double scale = ms.singularValues().mean();
  SEMCAL_CHECK(scale > 0.0, ErrorCode::degenerate_geometry, "DLT produced a singular rotation block");
  return Pose::nearest(m / scale, proj.col(3) / scale);
}

/// Damped Gauss-Newton on pixel reprojection error over left increments.
inline Pose pnp_refine(std::span<const Vec3> points, std::span<const Vec2> pixels, const CameraIntrinsics& k,
                       Pose pose, int iterations = 30) {
  auto cost = [&](const Pose& p) {
    double c = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      const double e = detail::reprojection_error(p, points[i], pixels[i], k);
      c += std::isfinite(e) ? e * e : 1e12;
    }
    return c;
  };
  double lambda = 1e-3;
  double current = cost(pose);
  for (int it = 0; it < iterations; ++it) {
    Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
    Vec6 g = Vec6::Zero();
    for (std::size_t i = 0; i < points.size(); ++i) {
      const Vec3 q = pose * points[i];
      if (q.z() <= kDepthEpsilon) continue;
      const Vec2 r = Vec2(k.fx * q.x() / q.z() + k.cx, k.fy * q.y() / q.z() + k.cy) - pixels[i];
      const auto j = projection_jacobian(q, k);
      h += j.transpose() * j;
      g += j.transpose() * r;
    }
    bool accepted = false;
    for (int tries = 0; tries < 10 && !accepted; ++tries) {
      Eigen::Matrix<double, 6, 6> damped = h;
      damped.diagonal() += lambda * (h.diagonal().array() + 1e-12).matrix();
      const Vec6 step = -damped.ldlt().solve(g);
      if (!step.allFinite()) break;
      const Pose candidate = se3_exp(Twist(step)) * pose;
      const double c = cost(candidate);
      if (c <= current) {
        pose = candidate;
        accepted = true;
        lambda = std::max(lambda * 0.3, 1e-12);
        const bool converged = current - c <= 1e-15 * (1.0 + current) || step.norm() < 1e-14;
        current = c;
        if (converged) return pose;
      } else {
        lambda *= 10.0;
      }
    }
    if (!accepted) break;
  }
  return pose;
}

/// Random-sample consensus around DLT + refinement; the returned pose is
/// refit on the largest inlier set.
inline PnpResult pnp_solve(std::span<const Vec3> points, std::span<const Vec2> pixels, const CameraIntrinsics& k,
                           const PnpOptions& opt = {}) {
  SEMCAL_CHECK(points.size() == pixels.size(), ErrorCode::invalid_argument, "point and pixel counts differ");
  SEMCAL_CHECK(points.size() >= 6, ErrorCode::invalid_argument, "PnP needs at least six correspondences");
  SEMCAL_CHECK(opt.sample_size >= 6, ErrorCode::invalid_argument, "sample size must be at least six");
  k.validate();
  const std::size_t n = points.size();

  auto score = [&](const Pose& pose, std::vector<std::uint8_t>& mask, double& sq) {
    std::size_t count = 0;
    sq = 0.0;
    mask.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const double e = detail::reprojection_error(pose, points[i], pixels[i], k);
      if (e < opt.inlier_threshold_px) {
        mask[i] = 1;
        ++count;
        sq += e * e;
      }
    }
    return count;
  };
  auto subset = [&](const std::vector<std::uint8_t>& mask, std::vector<Vec3>& p3, std::vector<Vec2>& p2) {
    p3.clear();
    p2.clear();
    for (std::size_t i = 0; i < n; ++i)
      if (mask[i]) {
        p3.push_back(points[i]);
        p2.push_back(pixels[i]);
      }
  };

  std::mt19937_64 rng(opt.seed);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::optional<Pose> best_pose;
  std::size_t best_count = 0;
  double best_sq = std::numeric_limits<double>::infinity();
  std::vector<std::uint8_t> mask;
  std::vector<Vec3> s3(static_cast<std::size_t>(opt.sample_size));
  std::vector<Vec2> s2(static_cast<std::size_t>(opt.sample_size));
  const auto sample_size = std::min<std::size_t>(static_cast<std::size_t>(opt.sample_size), n);
  for (int it = 0; it < opt.iterations; ++it) {
    for (std::size_t i = 0; i < sample_size; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, n - 1);
      std::swap(idx[i], idx[pick(rng)]);
      s3[i] = points[idx[i]];
      s2[i] = pixels[idx[i]];
    }
    Pose candidate;
    try {
      candidate = pnp_dlt(std::span(s3).first(sample_size), std::span(s2).first(sample_size), k);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::degenerate_geometry) continue;
      throw;
    }
    double sq = 0.0;
    const std::size_t count = score(candidate, mask, sq);
    if (count > best_count || (count == best_count && sq < best_sq)) {
      best_count = count;
      best_sq = sq;
      best_pose = candidate;
    }
  }
  SEMCAL_CHECK(best_pose.has_value(), ErrorCode::degenerate_geometry,
               "every consensus sample was coplanar or degenerate");
  SEMCAL_CHECK(best_count >= 6, ErrorCode::degenerate_geometry, "no consensus set of six or more correspondences");

  PnpResult res;
  Pose pose = *best_pose;
  std::vector<Vec3> in3;
  std::vector<Vec2> in2;
  double sq = 0.0;
  score(pose, mask, sq);
  for (int round = 0; round < 2; ++round) {
    subset(mask, in3, in2);
    if (in3.size() < 6) break;
    try {
      const Pose refit = pnp_dlt(in3, in2, k);
      std::vector<std::uint8_t> m2;
      double sq2 = 0.0;
      if (score(refit, m2, sq2) >= score(pose, mask, sq)) pose = refit;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::degenerate_geometry) throw;
    }
    pose = pnp_refine(in3, in2, k, pose, opt.refine_iterations);
    score(pose, mask, sq);
  }
  res.pose = pose;
  res.inlier_count = score(pose, res.inliers, sq);
  SEMCAL_CHECK(res.inlier_count >= 6, ErrorCode::degenerate_geometry, "refit lost its consensus set");
  res.inlier_rms_px = std::sqrt(sq / static_cast<double>(res.inlier_count));
  return res;
}

// ---------------------------------------------------------------------------
// Multi-scan aggregation

inline double median_of(std::vector<double> v) {
  SEMCAL_CHECK(!v.empty(), ErrorCode::invalid_argument, "median of an empty list");
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

/// Iglewicz-Hoaglin modified z-scores, 0.6745 (x - median) / MAD. All-equal
/// input scores zero; otherwise a zero MAD is replaced by 1e-12.
inline std::vector<double> modified_z_scores(std::span<const double> xs) {
  SEMCAL_CHECK(xs.size() >= 3, ErrorCode::invalid_argument, "modified z-scores need at least three values");
  const double med = median_of({xs.begin(), xs.end()});
  std::vector<double> dev;
  dev.reserve(xs.size());
  bool all_equal = true;
  for (double x : xs) {
    dev.push_back(std::abs(x - med));
    all_equal = all_equal && x == xs.front();
  }
  if (all_equal) return std::vector<double>(xs.size(), 0.0);
  double mad = median_of(std::move(dev));
  if (mad == 0.0) mad = 1e-12;
  std::vector<double> z;
  z.reserve(xs.size());
  for (double x : xs) z.push_back(0.6745 * (x - med) / mad);
  return z;
}

inline constexpr double kOutlierZ = 3.5;
inline constexpr double kMaxOutlierFraction = 0.6;

struct InitAggregate {
  std::vector<Twist> twists;
  std::vector<std::array<double, 6>> z_scores;  ///< per scan, per twist component
  std::vector<std::uint8_t> inlier;
  double outlier_fraction = 0.0;
  bool failed = false;
  std::optional<Pose> pose;
};

/// A scan is an outlier when any twist component has |z| > 3.5. More than
/// 60% outliers marks the initialisation failed; otherwise the inlier twists
/// are averaged componentwise.
inline InitAggregate aggregate_inits(std::span<const Pose> poses) {
  SEMCAL_CHECK(poses.size() >= 3, ErrorCode::invalid_argument, "aggregation needs at least three poses");
  InitAggregate agg;
  for (const auto& p : poses) agg.twists.push_back(se3_log(p));
  const std::size_t n = poses.size();
  agg.z_scores.assign(n, {});
  agg.inlier.assign(n, 1);
  for (int c = 0; c < 6; ++c) {
    std::vector<double> comp;
    for (const auto& t : agg.twists) comp.push_back(t[c]);
    const auto z = modified_z_scores(comp);
    for (std::size_t i = 0; i < n; ++i) {
      agg.z_scores[i][static_cast<std::size_t>(c)] = z[i];
      if (std::abs(z[i]) > kOutlierZ) agg.inlier[i] = 0;
    }
  }
  const auto inliers = static_cast<std::size_t>(std::count(agg.inlier.begin(), agg.inlier.end(), 1));
  agg.outlier_fraction = static_cast<double>(n - inliers) / static_cast<double>(n);
  agg.failed = agg.outlier_fraction > kMaxOutlierFraction;
  if (!agg.failed) {
    Vec6 mean = Vec6::Zero();
    for (std::size_t i = 0; i < n; ++i)
      if (agg.inlier[i]) mean += agg.twists[i].v;
    agg.pose = se3_exp(Twist(mean / static_cast<double>(inliers)));
  }
  return agg;
}

// ---------------------------------------------------------------------------
// Whole-scan driver

struct ScanInit {
  int frame_id = 0;
  bool ok = false;
  std::string error;
  RegistrationResult registration;
  std::size_t correspondences = 0;
  double inlier_threshold_px = 0.0;
  PnpResult pnp;
};

struct InitOptions {
  std::size_t samples = 200;
  PnpOptions pnp;
  /// Correspondences are resolved only to a zoomed pixel, so the consensus
  /// threshold is at least this many zoomed-pixel widths.
  double zoomed_pixel_threshold = 2.0;
  std::uint64_t seed = 0;
};

/// Range-image projection, zoom, registration, correspondence sampling and
/// PnP for one frame. Failures are recorded in the result, not thrown.
inline ScanInit initialize_scan(const CalibFrame& frame, const SphericalConfig& cfg, const InitOptions& opt) {
  ScanInit out;
  out.frame_id = frame.cloud.frame_id;
  try {
    const auto fixed = spherical_project(frame.cloud.points, frame.cloud.labels, frame.cloud.num_classes, cfg);
    const auto zoomed = zoom_label_image(frame.image, cfg.with_camera(frame.intrinsics));
    out.registration = register_2d(fixed, zoomed.image);
    const auto corr = sample_correspondences(frame.cloud.points, fixed, zoomed, out.registration, opt.samples,
                                             opt.seed + static_cast<std::uint64_t>(frame.cloud.frame_id));
    out.correspondences = corr.size();
    PnpOptions po = opt.pnp;
    po.seed = opt.pnp.seed + static_cast<std::uint64_t>(frame.cloud.frame_id);
    po.inlier_threshold_px = std::max(po.inlier_threshold_px, opt.zoomed_pixel_threshold * zoomed.scale_x());
    out.inlier_threshold_px = po.inlier_threshold_px;
    out.pnp = pnp_solve(corr.points, corr.pixels, frame.intrinsics, po);
    out.ok = true;
  } catch (const Error& e) {
    out.error = e.what();
  }
  return out;
}

struct InitReport {
  std::vector<ScanInit> scans;
  std::optional<InitAggregate> aggregate;
  std::optional<Pose> pose;
  bool failed = false;
  std::string reason;
};

/// Per-scan initialisation plus robust aggregation. With fewer than three
/// successful scans the available poses are averaged without outlier
/// screening.
inline InitReport initialize(std::span<const CalibFrame> frames, const SphericalConfig& cfg,
                             const InitOptions& opt = {}) {
  SEMCAL_CHECK(!frames.empty(), ErrorCode::invalid_argument, "initialisation needs at least one frame");
  InitReport rep;
  std::vector<Pose> poses;
  for (const auto& f : frames) {
    rep.scans.push_back(initialize_scan(f, cfg, opt));
    if (rep.scans.back().ok) poses.push_back(rep.scans.back().pnp.pose);
  }
  if (poses.empty()) {
    rep.failed = true;
    rep.reason = "no scan produced an initial pose";
    return rep;
  }
  if (poses.size() < 3) {
    Vec6 mean = Vec6::Zero();
    for (const auto& p : poses) mean += se3_log(p).v;
    rep.pose = se3_exp(Twist(mean / static_cast<double>(poses.size())));
    return rep;
  }
  rep.aggregate = aggregate_inits(poses);
  rep.failed = rep.aggregate->failed;
  if (rep.failed)
    rep.reason = "outliers exceed 60% of scans";
  else
    rep.pose = rep.aggregate->pose;
  return rep;
}

}  // namespace semcal
