#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "otflow/objective.hpp"

using namespace otflow;

namespace {

Matrix gaussian_batch(Index n, Index d, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix x(n, d);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = n01(rng);
  return x;
}

LogDensity shifted_normal(Vector mu) {
  return [mu](const Matrix& x) {
    return standard_normal_log_density(x.rowwise() - mu.transpose());
  };
}

}  // namespace

TEST(LossC, KnownValues) {
  FlowState s = FlowState::initial(Matrix::Zero(2, 2));
  s.z(1, 0) = 1.0;
  const Vector c = loss_C(s);
  EXPECT_NEAR(c(0), std::log(2.0 * std::numbers::pi), 1e-12);
  EXPECT_NEAR(c(0), 1.837877, 1e-6);
  EXPECT_NEAR(c(1), 2.337877, 1e-6);
  s.ell(0) = 0.5;
  EXPECT_NEAR(loss_C(s)(0), 1.337877, 1e-6);
}

TEST(LossC, IdentityFlowOnGaussianData) {
  std::mt19937_64 rng(1);
  const ModelParams p = zero_params({.d = 2, .m = 4, .M = 1});
  const Matrix x = gaussian_batch(20000, 2, rng);
  const LossBreakdown b = breakdown(integrate_forward(x, p, 2).state, 1.0, 1.0);
  EXPECT_NEAR(b.C, 1.0 + std::log(2.0 * std::numbers::pi), 0.02);
  EXPECT_EQ(b.L, 0.0);
  EXPECT_EQ(b.R, 0.0);
}

TEST(Breakdown, WeightsCombineLinearly) {
  FlowState s = FlowState::initial(Matrix::Ones(3, 2));
  s.L.setConstant(2.0);
  s.R.setConstant(0.5);
  const LossBreakdown b = breakdown(s, 3.0, 4.0);
  EXPECT_NEAR(b.total, 3.0 * b.C + 2.0 + 4.0 * 0.5, 1e-14);
}

TEST(LogDensity, StandardNormal) {
  Matrix y(1, 3);
  y << 1.0, 0.0, -1.0;
  EXPECT_NEAR(standard_normal_log_density(y)(0), -1.0 - 1.5 * std::log(2.0 * std::numbers::pi),
              1e-14);
}

TEST(KLCheck, IdentityFlowOnStandardNormalIsZero) {
  std::mt19937_64 rng(2);
  const ModelParams p = zero_params({.d = 2, .m = 4, .M = 1});
  const KLCheck kl = kl_equivalence_check(gaussian_batch(5000, 2, rng), gaussian_batch(5000, 2, rng),
                                          standard_normal_log_density, p, 2);
  EXPECT_NEAR(kl.direct, 0.0, 1e-12);
  EXPECT_NEAR(kl.importance, 0.0, 1e-12);
}

TEST(KLCheck, ShiftedGaussianHasKnownDivergence) {
  std::mt19937_64 rng(3);
  Vector mu(2);
  mu << 2.0, 0.0;
  const Index n = 40000;
  const ModelParams p = zero_params({.d = 2, .m = 4, .M = 1});
  const Matrix x = gaussian_batch(n, 2, rng).rowwise() + mu.transpose();
  const KLCheck kl = kl_equivalence_check(x, gaussian_batch(n, 2, rng), shifted_normal(mu), p, 2);
  EXPECT_NEAR(kl.direct, 2.0, 4.0 * kl.direct_se);
  EXPECT_NEAR(kl.importance, 2.0, 4.0 * kl.importance_se);
  EXPECT_LE(kl.discrepancy, 4.0 * kl.combined_se());
}

TEST(KLCheck, RejectsMissingDensity) {
  std::mt19937_64 rng(4);
  const ModelParams p = zero_params({.d = 2, .m = 4, .M = 1});
  const Matrix x = gaussian_batch(10, 2, rng);
  EXPECT_THROW(kl_equivalence_check(x, x, LogDensity{}, p, 2), std::invalid_argument);
}
