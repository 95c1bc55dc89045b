#pragma once

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "semcal/binary_io.hpp"
#include "semcal/calibrator.hpp"
#include "semcal/error.hpp"
#include "semcal/frame.hpp"
#include "semcal/geometry.hpp"
#include "semcal/initializer.hpp"
#include "semcal/sampling.hpp"
#include "semcal/synth.hpp"

namespace semcal::io {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr std::uint8_t kPgmUnlabeled = 255;

inline std::ofstream open_out(const fs::path& p, bool binary = false) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, binary ? std::ios::binary : std::ios::out);
  SEMCAL_CHECK(os.good(), ErrorCode::io, "cannot write " + p.string());
  return os;
}

inline std::ifstream open_in(const fs::path& p, bool binary = false) {
  std::ifstream is(p, binary ? std::ios::binary : std::ios::in);
  SEMCAL_CHECK(is.good(), ErrorCode::io, "cannot read " + p.string());
  return is;
}

inline json read_json(const fs::path& p) {
  auto is = open_in(p);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::io, p.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& p, const json& j) {
  auto os = open_out(p);
  os << j.dump(2) << '\n';
  SEMCAL_CHECK(os.good(), ErrorCode::io, "failed writing " + p.string());
}

// ---------------------------------------------------------------------------
// PGM label images (P5, maxval 255)

inline void write_pgm(std::ostream& os, const LabelImage& img) {
  SEMCAL_CHECK(img.num_classes() <= kPgmUnlabeled, ErrorCode::invalid_argument,
               "PGM labels hold at most 255 classes");
  os << "P5\n" << img.width() << ' ' << img.height() << "\n255\n";
  std::vector<char> buf(img.labels().begin(), img.labels().end());
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  SEMCAL_CHECK(os.good(), ErrorCode::io, "failed writing PGM");
}

inline void write_pgm(const fs::path& p, const LabelImage& img) {
  auto os = open_out(p, true);
  write_pgm(os, img);
}

namespace detail {

inline std::string pgm_token(std::istream& is) {
  std::string tok;
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  SEMCAL_CHECK(!tok.empty(), ErrorCode::io, "truncated PGM header");
  return tok;
}

}  // namespace detail

/// Reads class IDs; a pixel holding the unlabeled value 255 is rejected
/// because camera label images must be dense.
inline LabelImage read_pgm(std::istream& is, int num_classes) {
  SEMCAL_CHECK(detail::pgm_token(is) == "P5", ErrorCode::io, "not a binary PGM (P5)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(detail::pgm_token(is));
    h = std::stoi(detail::pgm_token(is));
    maxval = std::stoi(detail::pgm_token(is));
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::io, "malformed PGM header");
  }
  SEMCAL_CHECK(w > 0 && h > 0 && maxval > 0 && maxval < 256, ErrorCode::io, "unsupported PGM size or depth");
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  SEMCAL_CHECK(is.gcount() == static_cast<std::streamsize>(buf.size()), ErrorCode::io, "truncated PGM pixels");
  std::vector<std::uint16_t> labels(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    SEMCAL_CHECK(buf[i] != kPgmUnlabeled, ErrorCode::io, "camera label image contains unlabeled pixels");
    SEMCAL_CHECK(buf[i] < num_classes, ErrorCode::io, "PGM label outside the class range");
    labels[i] = buf[i];
  }
  return LabelImage(w, h, num_classes, std::move(labels));
}

inline LabelImage read_pgm(const fs::path& p, int num_classes) {
  auto is = open_in(p, true);
  try {
    return read_pgm(is, num_classes);
  } catch (const Error& e) {
    throw Error(e.code(), p.string() + ": " + e.message());
  }
}

/// Range-image style export: sentinel bins become 255.
inline void write_pgm(const fs::path& p, const SphericalLabelImage& img) {
  SEMCAL_CHECK(img.num_classes <= kPgmUnlabeled, ErrorCode::invalid_argument, "PGM labels hold at most 255 classes");
  auto os = open_out(p, true);
  os << "P5\n" << img.cols << ' ' << img.rows << "\n255\n";
  for (auto l : img.labels) os.put(static_cast<char>(l >= img.num_classes ? kPgmUnlabeled : l));
  SEMCAL_CHECK(os.good(), ErrorCode::io, "failed writing PGM");
}

// ---------------------------------------------------------------------------
// Point clouds: 14-byte LE records (float32 x, y, z, uint16 class) + JSON sidecar

inline constexpr std::size_t kCloudRecordBytes = 14;

inline void write_cloud(const fs::path& bin, const fs::path& sidecar, const PointCloudFrame& cloud) {
  cloud.validate();
  {
    auto os = open_out(bin, true);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      for (int a = 0; a < 3; ++a) binary::put<float>(os, static_cast<float>(cloud.points[i][a]));
      binary::put<std::uint16_t>(os, cloud.labels[i]);
    }
    SEMCAL_CHECK(os.good(), ErrorCode::io, "failed writing " + bin.string());
  }
  write_json(sidecar, json{{"format", "semcal-cloud-v1"},
                           {"count", cloud.size()},
                           {"num_classes", cloud.num_classes},
                           {"frame_id", cloud.frame_id}});
}

inline PointCloudFrame read_cloud(const fs::path& bin, const fs::path& sidecar) {
  const json meta = read_json(sidecar);
  PointCloudFrame cloud;
  std::size_t count = 0;
  try {
    count = meta.at("count").get<std::size_t>();
    cloud.num_classes = meta.at("num_classes").get<int>();
    cloud.frame_id = meta.at("frame_id").get<int>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::io, sidecar.string() + ": " + e.what());
  }
  SEMCAL_CHECK(fs::exists(bin) && fs::file_size(bin) == count * kCloudRecordBytes, ErrorCode::io,
               bin.string() + ": size does not match the sidecar count");
  auto is = open_in(bin, true);
  cloud.points.resize(count);
  cloud.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    for (int a = 0; a < 3; ++a) cloud.points[i][a] = binary::get<float>(is);
    cloud.labels[i] = binary::get<std::uint16_t>(is);
  }
  try {
    cloud.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::io, bin.string() + ": " + e.message());
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// JSON conversions

inline json to_json(const Pose& p) {
  json m = json::array();
  const Mat4 t = p.matrix();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m.push_back(t(r, c));
  json tw = json::array();
  const Twist v = se3_log(p);
  for (int i = 0; i < 6; ++i) tw.push_back(v[i]);
  return {{"matrix", m}, {"twist", tw}};
}

/// Accepts {"matrix": 16 row-major values} or {"twist": 6 values}; the
/// matrix wins when both are present.
inline Pose pose_from_json(const json& j) {
  try {
    if (j.contains("matrix")) {
      const auto v = j.at("matrix").get<std::vector<double>>();
      SEMCAL_CHECK(v.size() == 16, ErrorCode::io, "pose matrix needs 16 values");
      Mat4 m;
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) m(r, c) = v[static_cast<std::size_t>(4 * r + c)];
      // rounded matrices (e.g. typed by hand) are re-orthonormalised
      Pose::from_matrix(m, 1e-6);
      const Mat3 r = m.topLeftCorner<3, 3>();
      if ((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() <= 1e-9 && std::abs(r.determinant() - 1.0) <= 1e-9)
        return Pose::from_matrix(m);
      return Pose::nearest(r, m.topRightCorner<3, 1>());
    }
    const auto v = j.at("twist").get<std::vector<double>>();
    SEMCAL_CHECK(v.size() == 6, ErrorCode::io, "twist needs 6 values");
    return se3_exp(Twist(Vec6(Eigen::Map<const Vec6>(v.data()))));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::io, std::string("bad pose: ") + e.what());
  } catch (const Error& e) {
    throw Error(ErrorCode::io, "bad pose: " + e.message());
  }
}

inline json to_json(const CameraIntrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

inline CameraIntrinsics intrinsics_from_json(const json& j) {
  CameraIntrinsics k;
  try {
    k = {j.at("fx").get<double>(),    j.at("fy").get<double>(),    j.at("cx").get<double>(),
         j.at("cy").get<double>(),    j.at("width").get<int>(),    j.at("height").get<int>()};
  } catch (const json::exception& e) {
    throw Error(ErrorCode::invalid_config, std::string("bad intrinsics: ") + e.what());
  }
  try {
    k.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::invalid_config, e.message());
  }
  return k;
}

inline json to_json(const SphericalConfig& c) {
  return {{"fov_h_deg", c.lidar_fov_h_deg}, {"fov_v_deg", c.lidar_fov_v_deg}, {"rows", c.rows}, {"cols", c.cols}};
}

/// Overlays any present keys onto c.
inline void update_from_json(SphericalConfig& c, const json& j) {
  try {
    if (j.contains("fov_h_deg")) c.lidar_fov_h_deg = j.at("fov_h_deg").get<double>();
    if (j.contains("fov_v_deg")) c.lidar_fov_v_deg = j.at("fov_v_deg").get<double>();
    if (j.contains("rows")) c.rows = j.at("rows").get<int>();
    if (j.contains("cols")) c.cols = j.at("cols").get<int>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::invalid_config, std::string("bad lidar config: ") + e.what());
  }
}

inline json to_json(const SceneSpec& s) {
  return {{"seed", s.seed},
          {"num_classes", s.num_classes},
          {"min_objects", s.min_objects},
          {"max_objects", s.max_objects},
          {"forward_fraction", s.forward_fraction},
          {"min_distance", s.min_distance},
          {"max_distance", s.max_distance},
          {"min_half_extent", s.min_half_extent},
          {"max_half_extent", s.max_half_extent},
          {"min_height", s.min_height},
          {"max_height", s.max_height},
          {"min_patches", s.min_patches},
          {"max_patches", s.max_patches},
          {"lidar_height", s.lidar_height},
          {"max_range", s.max_range},
          {"ground_truth", to_json(s.ground_truth)},
          {"lidar", to_json(s.lidar)},
          {"camera", to_json(s.camera)}};
}

inline void update_from_json(SceneSpec& s, const json& j) {
  try {
    auto take = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    take("seed", s.seed);
    take("num_classes", s.num_classes);
    take("min_objects", s.min_objects);
    take("max_objects", s.max_objects);
    take("forward_fraction", s.forward_fraction);
    take("min_distance", s.min_distance);
    take("max_distance", s.max_distance);
    take("min_half_extent", s.min_half_extent);
    take("max_half_extent", s.max_half_extent);
    take("min_height", s.min_height);
    take("max_height", s.max_height);
    take("min_patches", s.min_patches);
    take("max_patches", s.max_patches);
    take("lidar_height", s.lidar_height);
    take("max_range", s.max_range);
    if (j.contains("ground_truth")) s.ground_truth = pose_from_json(j.at("ground_truth"));
    if (j.contains("lidar")) update_from_json(s.lidar, j.at("lidar"));
    if (j.contains("camera")) s.camera = intrinsics_from_json(j.at("camera"));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::invalid_config, std::string("bad scene config: ") + e.what());
  }
}

inline json to_json(const CalibConfig& c) {
  return {{"batch_size", c.batch_size},
          {"max_iterations", c.max_iterations},
          {"critic_rate", c.critic_rate},
          {"pose_rate", c.pose_rate},
          {"decay_every", c.decay_every},
          {"decay_factor", c.decay_factor},
          {"convergence_window", c.convergence_window},
          {"convergence_threshold", c.convergence_threshold},
          {"max_invalid_streak", c.max_invalid_streak},
          {"hidden", c.hidden},
          {"seed", c.seed}};
}

inline void update_from_json(CalibConfig& c, const json& j) {
  try {
    auto take = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    take("batch_size", c.batch_size);
    take("max_iterations", c.max_iterations);
    take("critic_rate", c.critic_rate);
    take("pose_rate", c.pose_rate);
    take("decay_every", c.decay_every);
    take("decay_factor", c.decay_factor);
    take("convergence_window", c.convergence_window);
    take("convergence_threshold", c.convergence_threshold);
    take("max_invalid_streak", c.max_invalid_streak);
    take("hidden", c.hidden);
    take("seed", c.seed);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::invalid_config, std::string("bad calibration config: ") + e.what());
  }
}

inline json to_json(const InitOptions& o) {
  return {{"samples", o.samples},
          {"ransac_iterations", o.pnp.iterations},
          {"inlier_threshold_px", o.pnp.inlier_threshold_px},
          {"zoomed_pixel_threshold", o.zoomed_pixel_threshold},
          {"refine_iterations", o.pnp.refine_iterations},
          {"seed", o.seed}};
}

inline void update_from_json(InitOptions& o, const json& j) {
  try {
    if (j.contains("samples")) o.samples = j.at("samples").get<std::size_t>();
    if (j.contains("ransac_iterations")) o.pnp.iterations = j.at("ransac_iterations").get<int>();
    if (j.contains("inlier_threshold_px")) o.pnp.inlier_threshold_px = j.at("inlier_threshold_px").get<double>();
    if (j.contains("zoomed_pixel_threshold"))
      o.zoomed_pixel_threshold = j.at("zoomed_pixel_threshold").get<double>();
    if (j.contains("refine_iterations")) o.pnp.refine_iterations = j.at("refine_iterations").get<int>();
    if (j.contains("seed")) {
      o.seed = j.at("seed").get<std::uint64_t>();
      o.pnp.seed = o.seed;
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::invalid_config, std::string("bad init config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Bundles: a directory of per-frame files plus manifest.json

struct Bundle {
  std::vector<CalibFrame> frames;
  SphericalConfig lidar;
  std::optional<Pose> ground_truth;
  json manifest;
};

inline std::string frame_stem(int i) {
  std::ostringstream s;
  s << "frame_" << std::setw(4) << std::setfill('0') << i;
  return s.str();
}

/// Writes frames and manifest.json into dir. extra is merged into the
/// manifest's top level.
inline void write_bundle(const fs::path& dir, std::span<const CalibFrame> frames, const SphericalConfig& lidar,
                         const std::optional<Pose>& ground_truth, const json& extra = json::object()) {
  fs::create_directories(dir);
  json m = {{"format", "semcal-bundle-v1"}, {"lidar", to_json(lidar)}};
  if (!frames.empty()) m["num_classes"] = frames.front().cloud.num_classes;
  if (ground_truth) m["ground_truth"] = to_json(*ground_truth);
  json list = json::array();
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto stem = frame_stem(static_cast<int>(i));
    write_cloud(dir / (stem + ".bin"), dir / (stem + ".json"), frames[i].cloud);
    write_pgm(dir / (stem + ".pgm"), frames[i].image);
    list.push_back({{"id", frames[i].cloud.frame_id},
                    {"cloud", stem + ".bin"},
                    {"cloud_meta", stem + ".json"},
                    {"labels", stem + ".pgm"},
                    {"intrinsics", to_json(frames[i].intrinsics)}});
  }
  m["frames"] = list;
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
  write_json(dir / "manifest.json", m);
}

/// path may be the bundle directory or its manifest.
inline Bundle read_bundle(const fs::path& path) {
  const fs::path manifest = fs::is_directory(path) ? path / "manifest.json" : path;
  SEMCAL_CHECK(fs::exists(manifest), ErrorCode::io, "no manifest at " + manifest.string());
  const fs::path dir = manifest.parent_path();
  Bundle b;
  b.manifest = read_json(manifest);
  try {
    if (b.manifest.contains("lidar")) update_from_json(b.lidar, b.manifest.at("lidar"));
    if (b.manifest.contains("ground_truth")) b.ground_truth = pose_from_json(b.manifest.at("ground_truth"));
    const int classes = b.manifest.at("num_classes").get<int>();
    for (const auto& f : b.manifest.at("frames")) {
      CalibFrame frame{read_cloud(dir / f.at("cloud").get<std::string>(), dir / f.at("cloud_meta").get<std::string>()),
                       read_pgm(dir / f.at("labels").get<std::string>(), classes),
                       intrinsics_from_json(f.at("intrinsics"))};
      frame.validate();
      b.frames.push_back(std::move(frame));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::io, manifest.string() + ": " + e.what());
  }
  SEMCAL_CHECK(!b.frames.empty(), ErrorCode::io, manifest.string() + ": bundle has no frames");
  return b;
}

// ---------------------------------------------------------------------------
// Reports

inline json to_json(const InitReport& r) {
  json scans = json::array();
  for (std::size_t i = 0; i < r.scans.size(); ++i) {
    const auto& s = r.scans[i];
    json j = {{"frame_id", s.frame_id}, {"ok", s.ok}};
    if (s.ok) {
      j["du"] = s.registration.du;
      j["dv"] = s.registration.dv;
      j["mi"] = s.registration.score;
      j["correspondences"] = s.correspondences;
      j["inlier_threshold_px"] = s.inlier_threshold_px;
      j["inliers"] = s.pnp.inlier_count;
      j["inlier_rms_px"] = s.pnp.inlier_rms_px;
      j["pose"] = to_json(s.pnp.pose);
    } else {
      j["error"] = s.error;
    }
    scans.push_back(j);
  }
  json out = {{"format", "semcal-init-v1"}, {"scans", scans}, {"failed", r.failed}};
  if (r.aggregate) {
    const auto& a = *r.aggregate;
    json z = json::array(), tw = json::array();
    for (std::size_t i = 0; i < a.twists.size(); ++i) {
      z.push_back(a.z_scores[i]);
      tw.push_back(std::vector<double>(a.twists[i].v.data(), a.twists[i].v.data() + 6));
    }
    out["aggregate"] = {{"twists", tw},
                        {"z_scores", z},
                        {"inlier", std::vector<bool>(a.inlier.begin(), a.inlier.end())},
                        {"outlier_fraction", a.outlier_fraction}};
  }
  if (r.pose) out["pose"] = to_json(*r.pose);
  if (!r.reason.empty()) out["reason"] = r.reason;
  return out;
}

/// Run report without wall-clock fields, so identical runs give identical bytes.
inline json to_json(const CalibrationRun& run, const CalibConfig& cfg, const Pose& init,
                    const std::optional<Pose>& gt = std::nullopt) {
  json out = {{"format", "semcal-run-v1"},
              {"pose", to_json(run.pose)},
              {"init", to_json(init)},
              {"iterations", run.iterations},
              {"converged", run.converged},
              {"final_mi", run.mi_trace.empty() ? 0.0 : run.mi_trace.back()},
              {"config", to_json(cfg)}};
  if (gt) {
    const auto e = pose_error(run.pose, *gt);
    const auto e0 = pose_error(init, *gt);
    out["ground_truth"] = to_json(*gt);
    out["error"] = {{"rotation_deg", e.rotation_deg}, {"translation_m", e.translation_m}};
    out["init_error"] = {{"rotation_deg", e0.rotation_deg}, {"translation_m", e0.translation_m}};
  }
  return out;
}

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

/// iteration, mi, valid_points[, rot_err_deg, trans_err_m]
inline void write_trace_csv(std::ostream& os, const CalibrationRun& run, const std::optional<Pose>& gt) {
  os << "iteration,mi,valid_points";
  if (gt) os << ",rot_err_deg,trans_err_m";
  os << '\n';
  for (int i = 0; i < run.iterations; ++i) {
    const auto k = static_cast<std::size_t>(i);
    os << i << ',' << format_double(run.mi_trace[k]) << ',' << run.valid_counts[k];
    if (gt) {
      const auto e = pose_error(se3_exp(run.pose_trace[k]), *gt);
      os << ',' << format_double(e.rotation_deg) << ',' << format_double(e.translation_m);
    }
    os << '\n';
  }
}

}  // namespace semcal::io
