#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "oracles.hpp"
#include "otflow/errors.hpp"
#include "otflow/flow.hpp"

using namespace otflow;
using otflow::testing::random_params;

namespace {

Matrix gaussian_batch(Index n, Index d, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n01(0.0, scale);
  Matrix x(n, d);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = n01(rng);
  return x;
}

// Phi(x, t) = 1/2 |x|^2: the quadratic term with A = [I 0].
ModelParams isotropic_quadratic(Index d) {
  ModelParams p = zero_params({.d = d, .m = 3, .M = 1, .r = d});
  p.A.setZero();
  p.A.leftCols(d).setIdentity();
  return p;
}

}  // namespace

TEST(Dynamics, LinearPotential) {
  ModelParams p = zero_params({.d = 2, .m = 4, .M = 1});
  p.b << 1.0, 2.0, 0.5;
  const FlowState s = FlowState::initial(Matrix::Random(3, 2));
  const FlowState rate = dynamics(s, 0.3, p);
  for (Index i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(rate.z(i, 0), -1.0);
    EXPECT_DOUBLE_EQ(rate.z(i, 1), -2.0);
    EXPECT_DOUBLE_EQ(rate.ell(i), 0.0);
    EXPECT_DOUBLE_EQ(rate.L(i), 2.5);
    EXPECT_DOUBLE_EQ(rate.R(i), 2.0);
  }
}

TEST(Dynamics, NonFiniteStateNamesSample) {
  ModelParams p = isotropic_quadratic(2);
  FlowState s = FlowState::initial(Matrix::Zero(4, 2));
  s.z(2, 1) = std::numeric_limits<double>::infinity();
  try {
    dynamics(s, 0.0, p);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.sample(), 2);
  }
}

TEST(Flow, ZeroParametersGiveIdentity) {
  std::mt19937_64 rng(3);
  const ModelParams p = zero_params({.d = 3, .m = 5, .M = 2});
  const Matrix x = gaussian_batch(10, 3, rng);
  const ForwardSolve out = integrate_forward(x, p, 4);
  EXPECT_TRUE(out.state.z.isApprox(x, 0.0));
  EXPECT_TRUE(out.state.ell.isZero(0.0));
  EXPECT_TRUE(out.state.L.isZero(0.0));
  EXPECT_TRUE(out.state.R.isZero(0.0));
  EXPECT_EQ(out.report.nfe, 16);
  EXPECT_TRUE(integrate_inverse(x, p, 4).isApprox(x, 0.0));
}

TEST(Flow, QuadraticPotentialHasClosedForm) {
  std::mt19937_64 rng(5);
  const Index d = 2;
  const ModelParams p = isotropic_quadratic(d);
  const Matrix x = gaussian_batch(20, d, rng);
  const ForwardSolve out = integrate_forward(x, p, 64);
  const double decay = std::exp(-1.0);
  EXPECT_LT((out.state.z - x * decay).cwiseAbs().maxCoeff(), 1e-9);
  for (Index i = 0; i < x.rows(); ++i) {
    EXPECT_NEAR(out.state.ell(i), -static_cast<double>(d), 1e-12);
    const double L = 0.25 * x.row(i).squaredNorm() * (1.0 - std::exp(-2.0));
    EXPECT_NEAR(out.state.L(i), L, 1e-9);
    EXPECT_NEAR(out.state.R(i), L, 1e-9);
  }
}

TEST(Flow, RungeKuttaIsFourthOrder) {
  std::mt19937_64 rng(7);
  for (int M : {1, 2}) {
    ModelParams p = random_params({.d = 3, .m = 8, .M = M, .h = 0.5}, rng);
    const Matrix x = gaussian_batch(6, 3, rng);
    const FlowState ref = integrate_forward(x, p, 2048).state;
    auto err = [&](int nt) {
      const FlowState s = integrate_forward(x, p, nt).state;
      return (s.z - ref.z).norm() + (s.ell - ref.ell).norm() + (s.L - ref.L).norm();
    };
    const double order = std::log2(err(16) / err(32));
    EXPECT_NEAR(order, 4.0, 0.3) << "M=" << M;
  }
}

TEST(Flow, InverseUndoesForward) {
  std::mt19937_64 rng(11);
  ModelParams p = random_params({.d = 4, .m = 8, .M = 2, .h = 0.5}, rng);
  const Matrix x = gaussian_batch(25, 4, rng);
  double previous = std::numeric_limits<double>::infinity();
  for (int nt : {4, 8, 16, 32, 64}) {
    const Matrix y = integrate_forward(x, p, nt).state.z;
    SolveReport report;
    const Matrix back = integrate_inverse(y, p, nt, 1.0, &report);
    const double err = (back - x).rowwise().norm().mean();
    EXPECT_LT(err, previous) << "nt=" << nt;
    previous = err;
    EXPECT_EQ(report.nfe, 4L * nt);
    EXPECT_EQ(report.direction, Direction::inverse);
  }
  EXPECT_LT(previous, 1e-6);
}

TEST(Flow, TrajectoryHasEveryStep) {
  std::mt19937_64 rng(13);
  ModelParams p = random_params({.d = 2, .m = 4, .M = 1}, rng);
  const Matrix x = gaussian_batch(3, 2, rng);
  const ForwardSolve out = integrate_forward(x, p, 5, 1.0, true);
  ASSERT_EQ(out.trajectory.size(), 6u);
  EXPECT_TRUE(out.trajectory.front().isApprox(x, 0.0));
  EXPECT_TRUE(out.trajectory.back().isApprox(out.state.z, 0.0));
}

TEST(Flow, DivergenceReportsStep) {
  ModelParams p = isotropic_quadratic(1);
  p.A(0, 0) = 1e200;
  const Matrix x = Matrix::Constant(2, 1, 1.0);
  try {
    integrate_forward(x, p, 4);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.step(), 0);
  }
}
