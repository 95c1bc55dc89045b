#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "semcal/error.hpp"
#include "semcal/geometry.hpp"

namespace semcal {

/// Dense per-pixel class IDs, row-major.
class LabelImage {
 public:
  LabelImage() = default;

  LabelImage(int width, int height, int num_classes, std::uint16_t fill = 0)
      : LabelImage(width, height, num_classes,
                   std::vector<std::uint16_t>(static_cast<std::size_t>(std::max(width, 0)) *
                                                  static_cast<std::size_t>(std::max(height, 0)),
                                              fill)) {}

  LabelImage(int width, int height, int num_classes, std::vector<std::uint16_t> labels)
      : width_(width), height_(height), num_classes_(num_classes), labels_(std::move(labels)) {
    SEMCAL_CHECK(width > 0 && height > 0, ErrorCode::invalid_argument, "label image must be non-empty");
    SEMCAL_CHECK(num_classes > 0 && num_classes < 0xFFFF, ErrorCode::invalid_argument,
                 "class count out of range");
    SEMCAL_CHECK(labels_.size() == static_cast<std::size_t>(width) * height, ErrorCode::invalid_argument,
                 "label buffer size does not match image dimensions");
    for (auto l : labels_)
      SEMCAL_CHECK(l < num_classes, ErrorCode::invalid_argument,
                   "label " + std::to_string(l) + " outside [0, " + std::to_string(num_classes) + ")");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int num_classes() const { return num_classes_; }
  std::size_t size() const { return labels_.size(); }

  std::uint16_t at(int row, int col) const { return labels_[static_cast<std::size_t>(row) * width_ + col]; }
  void set(int row, int col, std::uint16_t label) {
    SEMCAL_CHECK(label < num_classes_, ErrorCode::invalid_argument, "label outside class range");
    labels_[static_cast<std::size_t>(row) * width_ + col] = label;
  }

  std::span<const std::uint16_t> labels() const { return labels_; }

  bool operator==(const LabelImage&) const = default;

 private:
  int width_ = 0;
  int height_ = 0;
  int num_classes_ = 0;
  std::vector<std::uint16_t> labels_;
};

/// Something bilinear sampling can read class-probability vectors from.
template <class P>
concept PlaneSource = requires(const P& p, int row, int col, double w, std::span<double> out,
                               std::span<const double> g) {
  { p.width() } -> std::convertible_to<int>;
  { p.height() } -> std::convertible_to<int>;
  { p.num_classes() } -> std::convertible_to<int>;
  p.accumulate(row, col, w, out);
  { p.dot(row, col, g) } -> std::convertible_to<double>;
};

/// C dense planes of per-pixel class probabilities (plane-major, then rows).
class LabelPlanes {
 public:
  LabelPlanes(int width, int height, int num_classes)
      : width_(width), height_(height), num_classes_(num_classes),
        values_(static_cast<std::size_t>(width) * height * num_classes, 0.0) {}

  int width() const { return width_; }
  int height() const { return height_; }
  int num_classes() const { return num_classes_; }

  double value(int c, int row, int col) const { return values_[index(c, row, col)]; }
  double& value(int c, int row, int col) { return values_[index(c, row, col)]; }

  void accumulate(int row, int col, double w, std::span<double> out) const {
    for (int c = 0; c < num_classes_; ++c) out[c] += w * value(c, row, col);
  }
  double dot(int row, int col, std::span<const double> g) const {
    double s = 0.0;
    for (int c = 0; c < num_classes_; ++c) s += g[c] * value(c, row, col);
    return s;
  }

 private:
  std::size_t index(int c, int row, int col) const {
    return (static_cast<std::size_t>(c) * height_ + row) * width_ + col;
  }

  int width_, height_, num_classes_;
  std::vector<double> values_;
};

/// Non-owning one-hot view of a LabelImage. Reads the same values as
/// to_one_hot(img) without materialising C planes.
class OneHotPlanes {
 public:
  explicit OneHotPlanes(const LabelImage& img) : img_(&img) {}

  int width() const { return img_->width(); }
  int height() const { return img_->height(); }
  int num_classes() const { return img_->num_classes(); }

  void accumulate(int row, int col, double w, std::span<double> out) const { out[img_->at(row, col)] += w; }
  double dot(int row, int col, std::span<const double> g) const { return g[img_->at(row, col)]; }

 private:
  const LabelImage* img_;
};

inline LabelPlanes to_one_hot(const LabelImage& img) {
  LabelPlanes planes(img.width(), img.height(), img.num_classes());
  for (int r = 0; r < img.height(); ++r)
    for (int c = 0; c < img.width(); ++c) planes.value(img.at(r, c), r, c) = 1.0;
  return planes;
}

/// Sampled class-probability vectors for the valid subset of a projection.
struct SoftLabelBatch {
  int num_classes = 0;
  Eigen::MatrixXd soft;  ///< C x N, one column per valid point
  std::vector<Vec2> uv;
  std::vector<std::size_t> source_index;  ///< position in the ProjectedPoints input

  std::size_t size() const { return uv.size(); }
  Eigen::VectorXd row(std::size_t i) const { return soft.col(static_cast<Eigen::Index>(i)); }
};

namespace detail {

/// The four pixels touched by a width-1 triangle kernel at (u, v), with the
/// fractional offsets. The cell is chosen by floor, so a coordinate lying on
/// a grid line uses the cell to its right/below; on the last column/row the
/// cell steps back by one so both neighbours stay inside the image.
struct Footprint {
  int u0, u1, v0, v1;
  double fu, fv;
};

inline void axis_cell(double x, int extent, int& i0, int& i1, double& f) {
  if (extent == 1) {
    i0 = i1 = 0;
    f = 0.0;
    return;
  }
  i0 = std::clamp(static_cast<int>(std::floor(x)), 0, extent - 2);
  i1 = i0 + 1;
  f = x - i0;
}

inline Footprint footprint(const Vec2& uv, int width, int height) {
  Footprint fp{};
  axis_cell(uv.x(), width, fp.u0, fp.u1, fp.fu);
  axis_cell(uv.y(), height, fp.v0, fp.v1, fp.fv);
  return fp;
}

}  // namespace detail

/// Bilinear kernel sampling of every plane at each valid projected point:
/// sum_h sum_w plane[h, w] * max(0, 1 - |u - w|) * max(0, 1 - |v - h|).
template <PlaneSource P>
SoftLabelBatch bilinear_sample(const P& planes, const ProjectedPoints& pts) {
  const int nc = planes.num_classes();
  SoftLabelBatch batch;
  batch.num_classes = nc;
  const std::size_t n = pts.valid_count();
  SEMCAL_CHECK(n > 0, ErrorCode::empty_batch, "no projected point falls inside the image");
  batch.soft.setZero(nc, static_cast<Eigen::Index>(n));
  batch.uv.reserve(n);
  batch.source_index.reserve(n);
  std::size_t k = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (!pts.valid[i]) continue;
    const Vec2& uv = pts.uv[i];
    SEMCAL_CHECK(uv.x() >= 0.0 && uv.x() <= planes.width() - 1.0 && uv.y() >= 0.0 &&
                     uv.y() <= planes.height() - 1.0,
                 ErrorCode::invalid_argument, "valid point lies outside the label planes");
    const auto fp = detail::footprint(uv, planes.width(), planes.height());
    std::span<double> out(batch.soft.col(static_cast<Eigen::Index>(k)).data(), static_cast<std::size_t>(nc));
    const double w00 = (1.0 - fp.fu) * (1.0 - fp.fv), w01 = fp.fu * (1.0 - fp.fv);
    const double w10 = (1.0 - fp.fu) * fp.fv, w11 = fp.fu * fp.fv;
    if (w00 != 0.0) planes.accumulate(fp.v0, fp.u0, w00, out);
    if (w01 != 0.0) planes.accumulate(fp.v0, fp.u1, w01, out);
    if (w10 != 0.0) planes.accumulate(fp.v1, fp.u0, w10, out);
    if (w11 != 0.0) planes.accumulate(fp.v1, fp.u1, w11, out);
    batch.uv.push_back(uv);
    batch.source_index.push_back(i);
    ++k;
  }
  return batch;
}

/// d(sum_i <grad_soft_i, soft_i>)/d(u_i, v_i), one entry per batch column.
/// The kernel derivative is piecewise constant; on a grid line the
/// right/lower cell is used (see detail::Footprint).
template <PlaneSource P>
std::vector<Vec2> bilinear_sample_pullback(const P& planes, const SoftLabelBatch& batch,
                                           const Eigen::MatrixXd& grad_soft) {
  SEMCAL_CHECK(grad_soft.rows() == planes.num_classes() &&
                   grad_soft.cols() == static_cast<Eigen::Index>(batch.size()),
               ErrorCode::invalid_argument, "gradient shape does not match the sampled batch");
  std::vector<Vec2> out(batch.size(), Vec2::Zero());
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const auto fp = detail::footprint(batch.uv[k], planes.width(), planes.height());
    std::span<const double> g(grad_soft.col(static_cast<Eigen::Index>(k)).data(),
                              static_cast<std::size_t>(grad_soft.rows()));
    const double p00 = planes.dot(fp.v0, fp.u0, g), p01 = planes.dot(fp.v0, fp.u1, g);
    const double p10 = planes.dot(fp.v1, fp.u0, g), p11 = planes.dot(fp.v1, fp.u1, g);
    const double du = fp.u1 == fp.u0 ? 0.0 : (1.0 - fp.fv) * (p01 - p00) + fp.fv * (p11 - p10);
    const double dv = fp.v1 == fp.v0 ? 0.0 : (1.0 - fp.fu) * (p10 - p00) + fp.fu * (p11 - p01);
    out[k] = {du, dv};
  }
  return out;
}

}  // namespace semcal
