#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "dilink/procrustes.hpp"
#include "oracles.hpp"

using namespace dilink;
using namespace dilink::procrustes;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Tensor t({r, c});
  for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t.at(i, j);
  return m;
}

Tensor multiply(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j)
      for (std::size_t k = 0; k < a.cols(); ++k) c.at(i, j) += a.at(i, k) * b.at(k, j);
  return c;
}

}  // namespace

TEST(Svd, SingularValuesAndReconstructionMatchEigen) {
  Rng rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + rng.below(8), m = n + rng.below(5);
    const Tensor a = random_matrix(m, n, rng);
    const Svd s = svd(a);
    Eigen::JacobiSVD<Eigen::MatrixXd> ref(to_eigen(a));
    ASSERT_EQ(s.sigma.size(), n);
    for (std::size_t k = 0; k < n; ++k) EXPECT_NEAR(s.sigma[k], ref.singularValues()(k), 1e-10);
    Tensor us = s.u;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = 0; k < n; ++k) us.at(i, k) *= s.sigma[k];
    EXPECT_LT(frobenius_distance(multiply(us, transpose(s.v)), a), 1e-10);
    EXPECT_LT(orthogonality_error(s.v), 1e-10);
  }
}

TEST(NearestOrthogonal, MatchesEigenPolarFactor) {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + rng.below(10);
    const Tensor a = random_matrix(n, n, rng);
    Eigen::JacobiSVD<Eigen::MatrixXd> ref(to_eigen(a), Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::MatrixXd want = ref.matrixU() * ref.matrixV().transpose();
    const Tensor r = nearest_orthogonal(a);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(r.at(i, j), want(i, j), 1e-9);
  }
}

TEST(NearestOrthogonal, BeatsAngleGridOn2x2) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor m = random_matrix(2, 2, rng);
    const Tensor r = nearest_orthogonal(m);
    EXPECT_LE(frobenius_distance(r, m), oracle::best_grid_distance(m, 1e-3) + 1e-6);
    EXPECT_LE(orthogonality_error(r), 1e-6);
  }
}

TEST(NearestOrthogonal, RankDeficientInputsStayOrthogonal) {
  const std::vector<Tensor> cases{Tensor({3, 3}), Tensor::matrix(2, 2, {1, 2, 2, 4}),
                                  Tensor::matrix(3, 3, {1, 0, 0, 0, 0, 0, 0, 0, 0}),
                                  Tensor::matrix(2, 2, {0, 1e-300, 0, 0})};
  for (const auto& m : cases) EXPECT_LE(orthogonality_error(nearest_orthogonal(m)), 1e-6);
  EXPECT_LE(orthogonality_error(nearest_orthogonal(Tensor({2, 2}))), 1e-12);
}

TEST(Fit, RecoversAKnownRotation) {
  Rng rng(4);
  const Tensor s = random_matrix(50, 4, rng);
  const Tensor q = nearest_orthogonal(random_matrix(4, 4, rng));
  const Tensor g = multiply(s, q);
  const Tensor r = fit(s, g);
  EXPECT_LT(frobenius_distance(r, q), 1e-9);
  EXPECT_LT(frobenius_distance(project(s, r), g), 1e-9);
}

TEST(Fit, MinimizesAlignmentResidualAgainstRandomRotations) {
  Rng rng(5);
  const Tensor s = random_matrix(30, 3, rng), g = random_matrix(30, 3, rng);
  const double best = frobenius_distance(project(s, fit(s, g)), g);
  for (int k = 0; k < 200; ++k) {
    const Tensor q = nearest_orthogonal(random_matrix(3, 3, rng));
    EXPECT_LE(best, frobenius_distance(project(s, q), g) + 1e-12);
  }
}

TEST(Fit, ShapeMismatchThrows) {
  EXPECT_THROW(fit(Tensor({3, 2}), Tensor({4, 2})), ShapeError);
}
