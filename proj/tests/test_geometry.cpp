#include <gtest/gtest.h>

#include <random>

#include "semcal/geometry.hpp"
#include "test_support.hpp"

using namespace semcal;

namespace {

CameraIntrinsics hd_camera() { return {500.0, 500.0, 640.0, 360.0, 1280, 720}; }

void expect_orthonormal(const Mat3& r) {
  EXPECT_LT((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_NEAR(r.determinant(), 1.0, 1e-9);
}

// Projection of a point through a pose given as a 4x4 matrix (oracle path).
Vec2 project_with_matrix(const Mat4& t, const Vec3& p, const CameraIntrinsics& k) {
  const Eigen::Vector4d q = t * Eigen::Vector4d(p.x(), p.y(), p.z(), 1.0);
  return {k.fx * q.x() / q.z() + k.cx, k.fy * q.y() / q.z() + k.cy};
}

}  // namespace

TEST(Se3Exp, ZeroTwistIsIdentity) {
  const Pose p = se3_exp(Twist{});
  EXPECT_TRUE(p.rotation().isApprox(Mat3::Identity()));
  EXPECT_EQ(p.translation(), Vec3::Zero());
}

TEST(Se3Exp, PureTranslation) {
  const Pose p = se3_exp(Twist(1, 2, 3, 0, 0, 0));
  EXPECT_EQ(p.rotation(), Mat3::Identity());
  EXPECT_EQ(p.translation(), Vec3(1, 2, 3));
}

TEST(Se3Exp, QuarterTurnAboutZMatchesSeries) {
  const Twist tw(0, 0, 0, 0, 0, kPi / 2);
  const Mat4 oracle = test::series_exp(twist_matrix(tw));
  Mat3 expected;
  expected << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  EXPECT_LT((oracle.topLeftCorner<3, 3>() - expected).cwiseAbs().maxCoeff(), 1e-12);
  const Pose p = se3_exp(tw);
  EXPECT_LT((p.rotation() - expected).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(p.translation().norm(), 1e-15);
}

TEST(Se3Exp, MatchesSeriesOnRandomTwists) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    const Twist tw(test::random_twist(rng, 5.0, 3.0));
    const Mat4 oracle = test::series_exp(twist_matrix(tw), 60);
    const Pose p = se3_exp(tw);
    EXPECT_LT((p.matrix() - oracle).cwiseAbs().maxCoeff(), 1e-9);
    expect_orthonormal(p.rotation());
  }
}

TEST(Se3Exp, TinyRotationUsesStableBranch) {
  const Twist tw(0.3, -0.2, 0.1, 1e-10, -2e-10, 5e-11);
  const Mat4 oracle = test::series_exp(twist_matrix(tw));
  EXPECT_LT((se3_exp(tw).matrix() - oracle).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Se3Exp, RejectsNonFinite) {
  Twist tw;
  tw.v[4] = std::numeric_limits<double>::quiet_NaN();
  try {
    se3_exp(tw);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::invalid_argument);
  }
}

TEST(Se3Log, IdentityIsZero) { EXPECT_EQ(se3_log(Pose::identity()).v, Vec6::Zero()); }

TEST(Se3Log, QuarterTurn) {
  Mat3 r;
  r << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Twist tw = se3_log(Pose::from_rt(r, Vec3::Zero()));
  Vec6 expected;
  expected << 0, 0, 0, 0, 0, kPi / 2;
  EXPECT_LT((tw.v - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Se3Log, RoundTripRandom) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 500; ++i) {
    const Vec6 v = test::random_twist(rng, 10.0, 3.0);
    const Twist back = se3_log(se3_exp(Twist(v)));
    EXPECT_LT((back.v - v).cwiseAbs().maxCoeff(), 1e-9) << "case " << i;
    const Pose p = se3_exp(Twist(v));
    EXPECT_LT((se3_exp(back).matrix() - p.matrix()).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Se3Log, RejectsHalfTurn) {
  const Pose p = se3_exp(Twist(0, 0, 0, kPi, 0, 0));
  try {
    se3_log(p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::degenerate_rotation);
  }
}

TEST(PoseChecks, RejectsNonOrthonormal) {
  Mat3 r = Mat3::Identity();
  r(0, 1) = 1e-6;
  EXPECT_THROW(Pose::from_rt(r, Vec3::Zero()), Error);
  EXPECT_THROW(Pose::from_rt(-Mat3::Identity(), Vec3::Zero()), Error);
}

TEST(Project, PrincipalPoint) {
  const std::vector<Vec3> pts{{0, 0, 5}};
  const auto pr = project(pts, Pose::identity(), hd_camera());
  ASSERT_TRUE(pr.valid[0]);
  EXPECT_DOUBLE_EQ(pr.uv[0].x(), 640.0);
  EXPECT_DOUBLE_EQ(pr.uv[0].y(), 360.0);
}

TEST(Project, OffAxisPoint) {
  const std::vector<Vec3> pts{{1, 0, 5}};
  const auto pr = project(pts, Pose::identity(), hd_camera());
  EXPECT_DOUBLE_EQ(pr.uv[0].x(), 740.0);
  EXPECT_DOUBLE_EQ(pr.uv[0].y(), 360.0);
}

TEST(Project, BehindCameraAndOutsideAreMaskedNotDropped) {
  const std::vector<Vec3> pts{{0, 0, -1}, {100, 0, 1}, {0, 0, 2}, {0, 0, 5e-7}};
  const auto pr = project(pts, Pose::identity(), hd_camera());
  ASSERT_EQ(pr.size(), 4u);
  EXPECT_FALSE(pr.valid[0]);
  EXPECT_FALSE(pr.valid[1]);
  EXPECT_TRUE(pr.valid[2]);
  EXPECT_FALSE(pr.valid[3]);
  EXPECT_EQ(pr.valid_count(), 1u);
}

TEST(Project, BorderPixelsAreValid) {
  const CameraIntrinsics k = hd_camera();
  // u = fx x / z + cx = 0 and u = width - 1 exactly.
  const std::vector<Vec3> pts{{-640.0 / 500.0, 0, 1}, {639.0 / 500.0, 359.0 / 500.0, 1}};
  const auto pr = project(pts, Pose::identity(), k);
  EXPECT_TRUE(pr.valid[0]);
  EXPECT_TRUE(pr.valid[1]);
}

TEST(Project, EmptyInputRejected) { EXPECT_THROW(project({}, Pose::identity(), hd_camera()), Error); }

TEST(Project, ScaleAlongRayKeepsPixel) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-2.0, 2.0), s(0.1, 10.0);
  const CameraIntrinsics k = hd_camera();
  for (int i = 0; i < 100; ++i) {
    const Pose pose = se3_exp(Twist(test::random_twist(rng, 0.5, 0.2)));
    const Vec3 q(u(rng), u(rng), 4.0 + u(rng));  // camera frame
    const Vec3 p = pose.inverse() * q;
    const Vec3 p_scaled = pose.inverse() * (s(rng) * q);
    const std::vector<Vec3> pts{p, p_scaled};
    const auto pr = project(pts, pose, k);
    EXPECT_LT((pr.uv[0] - pr.uv[1]).norm(), 1e-9);
  }
}

TEST(ProjectPullback, ZeroGradient) {
  const std::vector<Vec3> pts{{0.2, 0.1, 4}, {-1, 0.3, 6}};
  const std::vector<Vec2> g(2, Vec2::Zero());
  EXPECT_EQ(project_pullback(pts, Pose::identity(), hd_camera(), g), Vec6::Zero());
}

TEST(ProjectPullback, TranslationOnOpticalAxis) {
  const std::vector<Vec3> pts{{0, 0, 4}};
  const std::vector<Vec2> g{{1.0, 0.0}};
  const Vec6 grad = project_pullback(pts, Pose::identity(), hd_camera(), g);
  EXPECT_NEAR(grad[0], 500.0 / 4.0, 1e-12);
  EXPECT_NEAR(grad[1], 0.0, 1e-12);
}

TEST(ProjectPullback, LengthMismatch) {
  const std::vector<Vec3> pts{{0, 0, 4}};
  const std::vector<Vec2> g;
  EXPECT_THROW(project_pullback(pts, Pose::identity(), hd_camera(), g), Error);
}

TEST(ProjectPullback, MatchesFiniteDifferencesOfSeriesExp) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-1.5, 1.5), gd(-1.0, 1.0);
  const CameraIntrinsics k = hd_camera();
  int checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Pose pose = se3_exp(Twist(test::random_twist(rng, 0.5, 0.5)));
    std::vector<Vec3> pts;
    std::vector<Vec2> g;
    for (int i = 0; i < 5; ++i) {
      pts.push_back(pose.inverse() * Vec3(u(rng), u(rng), 5.0 + u(rng)));
      g.emplace_back(gd(rng), gd(rng));
    }
    const Vec6 analytic = project_pullback(pts, pose, k, g);
    const Mat4 base = pose.matrix();
    auto objective = [&](const Eigen::VectorXd& d) {
      const Mat4 t = test::series_exp(twist_matrix(Twist(Vec6(d)))) * base;
      double s = 0.0;
      for (std::size_t i = 0; i < pts.size(); ++i) s += g[i].dot(project_with_matrix(t, pts[i], k));
      return s;
    };
    const Eigen::VectorXd numeric = test::central_difference(objective, Eigen::VectorXd::Zero(6), 1e-6);
    EXPECT_LT(test::relative_error(analytic, numeric), 1e-5) << "trial " << trial;
    ++checked;
  }
  EXPECT_EQ(checked, 100);
}
