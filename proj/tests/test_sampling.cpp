#include <gtest/gtest.h>

#include <random>

#include "semcal/sampling.hpp"
#include "test_support.hpp"

using namespace semcal;

namespace {

// Literal double sum over every pixel with the triangle kernel.
Eigen::VectorXd brute_force_sample(const LabelPlanes& planes, double u, double v) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(planes.num_classes());
  for (int c = 0; c < planes.num_classes(); ++c)
    for (int h = 0; h < planes.height(); ++h)
      for (int w = 0; w < planes.width(); ++w)
        out[c] += planes.value(c, h, w) * std::max(0.0, 1.0 - std::abs(u - w)) * std::max(0.0, 1.0 - std::abs(v - h));
  return out;
}

LabelImage random_image(std::mt19937_64& rng, int w, int h, int classes) {
  std::uniform_int_distribution<int> d(0, classes - 1);
  std::vector<std::uint16_t> labels(static_cast<std::size_t>(w) * h);
  for (auto& l : labels) l = static_cast<std::uint16_t>(d(rng));
  return LabelImage(w, h, classes, std::move(labels));
}

ProjectedPoints points_at(const std::vector<Vec2>& uv) {
  ProjectedPoints p;
  p.uv = uv;
  p.depth.assign(uv.size(), 1.0);
  p.valid.assign(uv.size(), 1);
  return p;
}

}  // namespace

TEST(LabelImage, RejectsOutOfRangeLabels) {
  EXPECT_THROW(LabelImage(2, 2, 3, std::vector<std::uint16_t>{0, 1, 2, 3}), Error);
  EXPECT_THROW(LabelImage(0, 2, 3), Error);
  EXPECT_THROW(LabelImage(2, 2, 3, std::vector<std::uint16_t>{0, 1, 2}), Error);
}

TEST(ToOneHot, SinglePixel) {
  LabelImage img(4, 4, 5, 0);
  img.set(2, 1, 3);
  const auto planes = to_one_hot(img);
  for (int c = 0; c < 5; ++c) EXPECT_EQ(planes.value(c, 2, 1), c == 3 ? 1.0 : 0.0);
}

TEST(ToOneHot, ArgmaxRoundTripAndPlaneSum) {
  std::mt19937_64 rng(1);
  const auto img = random_image(rng, 17, 9, 6);
  const auto planes = to_one_hot(img);
  for (int r = 0; r < img.height(); ++r) {
    for (int c = 0; c < img.width(); ++c) {
      int best = 0;
      double sum = 0.0;
      for (int k = 0; k < 6; ++k) {
        sum += planes.value(k, r, c);
        if (planes.value(k, r, c) > planes.value(best, r, c)) best = k;
      }
      EXPECT_EQ(best, img.at(r, c));
      EXPECT_EQ(sum, 1.0);
    }
  }
}

TEST(BilinearSample, IntegerCoordinateIsExact) {
  std::mt19937_64 rng(2);
  const auto img = random_image(rng, 32, 32, 4);
  const auto batch = bilinear_sample(OneHotPlanes(img), points_at({{10.0, 20.0}}));
  ASSERT_EQ(batch.size(), 1u);
  for (int c = 0; c < 4; ++c) EXPECT_EQ(batch.soft(c, 0), img.at(20, 10) == c ? 1.0 : 0.0);
}

TEST(BilinearSample, MidpointBetweenTwoClasses) {
  LabelImage img(4, 3, 3, 0);
  img.set(1, 1, 1);
  img.set(1, 2, 2);
  const auto batch = bilinear_sample(OneHotPlanes(img), points_at({{1.5, 1.0}}));
  EXPECT_DOUBLE_EQ(batch.soft(1, 0), 0.5);
  EXPECT_DOUBLE_EQ(batch.soft(2, 0), 0.5);
  EXPECT_DOUBLE_EQ(batch.soft(0, 0), 0.0);
}

TEST(BilinearSample, UniformImage) {
  LabelImage img(20, 10, 5, 3);
  const auto batch = bilinear_sample(OneHotPlanes(img), points_at({{3.7, 2.2}, {18.9, 8.01}, {19.0, 9.0}}));
  for (std::size_t k = 0; k < batch.size(); ++k)
    for (int c = 0; c < 5; ++c) EXPECT_NEAR(batch.soft(c, static_cast<Eigen::Index>(k)), c == 3 ? 1.0 : 0.0, 1e-15);
}

TEST(BilinearSample, InvalidPointsExcludedWithIndexMap) {
  LabelImage img(8, 8, 2, 1);
  auto pts = points_at({{1, 1}, {2, 2}, {3, 3}});
  pts.valid[1] = 0;
  const auto batch = bilinear_sample(OneHotPlanes(img), pts);
  ASSERT_EQ(batch.size(), 2u);
  EXPECT_EQ(batch.source_index, (std::vector<std::size_t>{0, 2}));
}

TEST(BilinearSample, EmptyValidSetIsError) {
  LabelImage img(8, 8, 2, 1);
  auto pts = points_at({{1, 1}});
  pts.valid[0] = 0;
  try {
    bilinear_sample(OneHotPlanes(img), pts);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::empty_batch);
  }
}

TEST(BilinearSample, MatchesBruteForceKernelSumAndDenseView) {
  std::mt19937_64 rng(3);
  const auto img = random_image(rng, 12, 9, 4);
  const auto planes = to_one_hot(img);
  std::uniform_real_distribution<double> uu(0.0, 11.0), uv(0.0, 8.0);
  std::vector<Vec2> coords;
  for (int i = 0; i < 200; ++i) coords.emplace_back(uu(rng), uv(rng));
  coords.emplace_back(11.0, 8.0);
  coords.emplace_back(0.0, 8.0);
  const auto pts = points_at(coords);
  const auto dense = bilinear_sample(planes, pts);
  const auto view = bilinear_sample(OneHotPlanes(img), pts);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const auto oracle = brute_force_sample(planes, coords[i].x(), coords[i].y());
    const auto k = static_cast<Eigen::Index>(i);
    EXPECT_LT((dense.soft.col(k) - oracle).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((view.soft.col(k) - oracle).cwiseAbs().maxCoeff(), 1e-12);
    // simplex
    EXPECT_NEAR(view.soft.col(k).sum(), 1.0, 1e-12);
    EXPECT_GE(view.soft.col(k).minCoeff(), 0.0);
    EXPECT_LE(view.soft.col(k).maxCoeff(), 1.0);
  }
}

TEST(BilinearSample, ClassPermutationEquivariance) {
  std::mt19937_64 rng(4);
  const auto img = random_image(rng, 10, 10, 5);
  const std::vector<std::uint16_t> perm{3, 0, 4, 1, 2};
  std::vector<std::uint16_t> relabeled(img.labels().begin(), img.labels().end());
  for (auto& l : relabeled) l = perm[l];
  const LabelImage img2(10, 10, 5, relabeled);
  std::uniform_real_distribution<double> u(0.0, 9.0);
  std::vector<Vec2> coords;
  for (int i = 0; i < 50; ++i) coords.emplace_back(u(rng), u(rng));
  const auto a = bilinear_sample(OneHotPlanes(img), points_at(coords));
  const auto b = bilinear_sample(OneHotPlanes(img2), points_at(coords));
  for (std::size_t i = 0; i < coords.size(); ++i)
    for (int c = 0; c < 5; ++c)
      EXPECT_DOUBLE_EQ(b.soft(perm[c], static_cast<Eigen::Index>(i)), a.soft(c, static_cast<Eigen::Index>(i)));
}

TEST(BilinearPullback, ZeroGradient) {
  std::mt19937_64 rng(5);
  const auto img = random_image(rng, 10, 10, 3);
  const auto batch = bilinear_sample(OneHotPlanes(img), points_at({{2.5, 3.5}, {7.1, 1.2}}));
  const auto g = bilinear_sample_pullback(OneHotPlanes(img), batch, Eigen::MatrixXd::Zero(3, 2));
  for (const auto& v : g) EXPECT_EQ(v, Vec2::Zero());
}

TEST(BilinearPullback, FlatFieldHasNoSpatialGradient) {
  LabelImage img(10, 10, 3, 2);
  const auto batch = bilinear_sample(OneHotPlanes(img), points_at({{2.5, 3.5}, {7.1, 1.2}}));
  Eigen::MatrixXd gs = Eigen::MatrixXd::Random(3, 2);
  for (const auto& v : bilinear_sample_pullback(OneHotPlanes(img), batch, gs)) EXPECT_LT(v.norm(), 1e-15);
}

TEST(BilinearPullback, MatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> uu(0.5, 14.5), vv(0.5, 10.5), gd(-1.0, 1.0);
  int cases = 0;
  while (cases < 100) {
    const auto img = random_image(rng, 16, 12, 4);
    const auto planes = to_one_hot(img);
    Vec2 uv(uu(rng), vv(rng));
    // stay away from grid lines where the kernel derivative jumps
    const double fu = uv.x() - std::floor(uv.x()), fv = uv.y() - std::floor(uv.y());
    if (std::min(fu, 1 - fu) < 1e-3 || std::min(fv, 1 - fv) < 1e-3) continue;
    Eigen::VectorXd g(4);
    for (int c = 0; c < 4; ++c) g[c] = gd(rng);
    const auto batch = bilinear_sample(OneHotPlanes(img), points_at({uv}));
    const Vec2 analytic = bilinear_sample_pullback(OneHotPlanes(img), batch, Eigen::MatrixXd(g))[0];
    auto f = [&](const Eigen::VectorXd& p) { return g.dot(brute_force_sample(planes, p[0], p[1])); };
    const Eigen::VectorXd numeric = test::central_difference(f, Eigen::VectorXd(uv), 1e-4);
    EXPECT_LT(test::relative_error(Eigen::VectorXd(analytic), numeric), 1e-4);
    ++cases;
  }
}

TEST(BilinearPullback, GridLineUsesRightAndLowerCell) {
  LabelImage img(4, 4, 2, 0);
  // class 1 in column 2 only
  for (int r = 0; r < 4; ++r) img.set(r, 2, 1);
  const auto batch = bilinear_sample(OneHotPlanes(img), points_at({{1.0, 1.5}, {2.0, 1.5}}));
  Eigen::MatrixXd g(2, 2);
  g << 0, 0, 1, 1;
  const auto grads = bilinear_sample_pullback(OneHotPlanes(img), batch, g);
  // at u = 1 the cell is [1, 2]: class 1 increases to the right
  EXPECT_DOUBLE_EQ(grads[0].x(), 1.0);
  // at u = 2 the cell is [2, 3]: class 1 decreases to the right
  EXPECT_DOUBLE_EQ(grads[1].x(), -1.0);
}
