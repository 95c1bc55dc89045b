#pragma once

#include <cstdint>
#include <vector>

#include "semcal/error.hpp"
#include "semcal/geometry.hpp"
#include "semcal/sampling.hpp"

namespace semcal {

/// LiDAR points (metres, sensor frame) with one class ID per point.
struct PointCloudFrame {
  std::vector<Vec3> points;
  std::vector<std::uint16_t> labels;
  int num_classes = 0;
  int frame_id = 0;

  std::size_t size() const { return points.size(); }

  void validate() const {
    SEMCAL_CHECK(!points.empty(), ErrorCode::invalid_argument, "point cloud is empty");
    SEMCAL_CHECK(points.size() == labels.size(), ErrorCode::invalid_argument, "label count does not match points");
    SEMCAL_CHECK(num_classes > 0, ErrorCode::invalid_argument, "class count must be positive");
    for (auto l : labels)
      SEMCAL_CHECK(l < num_classes, ErrorCode::invalid_argument, "point label outside class range");
    for (const auto& p : points) SEMCAL_CHECK(p.allFinite(), ErrorCode::invalid_argument, "non-finite point");
  }
};

/// One synchronised LiDAR scan and camera label image. The image's one-hot
/// planes are read through OneHotPlanes rather than stored.
struct CalibFrame {
  PointCloudFrame cloud;
  LabelImage image;
  CameraIntrinsics intrinsics;

  OneHotPlanes planes() const { return OneHotPlanes(image); }

  void validate() const {
    cloud.validate();
    intrinsics.validate();
    SEMCAL_CHECK(cloud.num_classes == image.num_classes(), ErrorCode::invalid_argument,
                 "cloud and image disagree on the class count");
    SEMCAL_CHECK(image.width() == intrinsics.width && image.height() == intrinsics.height,
                 ErrorCode::invalid_argument, "label image size does not match the intrinsics");
  }
};

}  // namespace semcal
