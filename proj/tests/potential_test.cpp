#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "oracles.hpp"
#include "otflow/errors.hpp"
#include "otflow/potential.hpp"

using namespace otflow;
using otflow::testing::fd_gradient;
using otflow::testing::fd_spatial_hessian;
using otflow::testing::naive_potential;
using otflow::testing::random_params;
using otflow::testing::random_point;
using otflow::testing::rel_err;

TEST(Activation, MatchesNaiveFormAndDerivatives) {
  for (double x = -5.0; x <= 5.0; x += 0.37) {
    EXPECT_NEAR(activation::sigma(x), std::log(std::exp(x) + std::exp(-x)), 1e-14);
    const double step = 1e-5;
    const double fd1 = (activation::sigma(x + step) - activation::sigma(x - step)) / (2 * step);
    const double fd2 = (activation::dsigma(x + step) - activation::dsigma(x - step)) / (2 * step);
    const double fd3 = (activation::d2sigma(x + step) - activation::d2sigma(x - step)) / (2 * step);
    EXPECT_NEAR(activation::dsigma(x), fd1, 1e-9);
    EXPECT_NEAR(activation::d2sigma(x), fd2, 1e-9);
    EXPECT_NEAR(activation::d3sigma(x), fd3, 1e-9);
  }
}

TEST(Activation, LargeInputsDoNotOverflow) {
  EXPECT_DOUBLE_EQ(activation::sigma(1000.0), 1000.0);
  EXPECT_DOUBLE_EQ(activation::sigma(-1000.0), 1000.0);
  EXPECT_NEAR(activation::sigma(0.0), std::log(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(activation::dsigma(1000.0), 1.0);
  EXPECT_DOUBLE_EQ(activation::d2sigma(1000.0), 0.0);
}

TEST(Potential, ConstantNetworkGivesConstantPotential) {
  ModelParams p = zero_params({.d = 2, .m = 4, .M = 1});
  p.c = 3.0;
  std::mt19937_64 rng(1);
  for (int i = 0; i < 5; ++i) {
    const Vector s = random_point(2, rng);
    EXPECT_DOUBLE_EQ(potential_forward(s, p), 3.0);
    PointEvaluation ev(s, p);
    EXPECT_TRUE(ev.gradient().isZero(0.0));
    EXPECT_DOUBLE_EQ(ev.exact_trace(), 0.0);
  }
}

TEST(Potential, LinearTermOnly) {
  ModelParams p = zero_params({.d = 2, .m = 4, .M = 1});
  p.b << 1.0, 2.0, 0.5;
  Vector s(3);
  s << 1.0, 2.0, 1.0;
  EXPECT_DOUBLE_EQ(potential_forward(s, p), 5.5);
  PointEvaluation ev(s, p);
  EXPECT_TRUE(ev.gradient().isApprox(p.b, 0.0));
  EXPECT_DOUBLE_EQ(ev.exact_trace(), 0.0);
  EXPECT_DOUBLE_EQ(ev.time_derivative(), 0.5);
}

TEST(Potential, QuadraticTermOnly) {
  ModelParams p = zero_params({.d = 2, .m = 4, .M = 1, .r = 2});
  p.A.setZero();
  p.A(0, 0) = 1.0;
  p.A(1, 1) = 1.0;
  Vector s(3);
  s << 0.7, -1.3, 0.4;
  PointEvaluation ev(s, p);
  EXPECT_NEAR(potential_forward(s, p), 0.5 * (0.49 + 1.69), 1e-15);
  EXPECT_NEAR(ev.gradient()(0), 0.7, 1e-15);
  EXPECT_NEAR(ev.gradient()(1), -1.3, 1e-15);
  EXPECT_NEAR(ev.gradient()(2), 0.0, 1e-15);
  EXPECT_NEAR(ev.exact_trace(), 2.0, 1e-15);
}

TEST(Potential, ForwardMatchesLoopImplementation) {
  std::mt19937_64 rng(7);
  for (Index d : {1, 2, 8, 43}) {
    for (int M : {1, 2, 3}) {
      const ModelParams p = random_params({.d = d, .m = 16, .M = M, .h = 0.5}, rng);
      for (int i = 0; i < 5; ++i) {
        const Vector s = random_point(d, rng);
        EXPECT_LT(rel_err(potential_forward(s, p), naive_potential(s, p), 1.0), 1e-12);
      }
    }
  }
}

TEST(Potential, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  int draws = 0;
  for (Index d : {1, 2, 8, 43}) {
    for (int M : {1, 2}) {
      for (int rep = 0; rep < 13; ++rep, ++draws) {
        const ModelParams p = random_params({.d = d, .m = 16, .M = M}, rng);
        const Vector s = random_point(d, rng);
        const Vector g = PointEvaluation(s, p).gradient();
        const Vector g_fd = fd_gradient(s, p);
        for (Index k = 0; k <= d; ++k) {
          EXPECT_LT(rel_err(g(k), g_fd(k), 1e-2), 1e-6) << "d=" << d << " k=" << k;
        }
      }
    }
  }
  EXPECT_GE(draws, 100);
}

TEST(Potential, ExactTraceMatchesFiniteDifferenceHessian) {
  std::mt19937_64 rng(13);
  for (Index d : {2, 8, 43}) {
    for (Index m : {16, 64}) {
      for (int M : {1, 2, 3}) {
        for (int rep = 0; rep < 3; ++rep) {
          const ModelParams p = random_params({.d = d, .m = m, .M = M, .h = 0.5}, rng);
          const Vector s = random_point(d, rng);
          PointEvaluation ev(s, p);
          const double oracle = fd_spatial_hessian(s, p).trace();
          EXPECT_LT(rel_err(ev.exact_trace(), oracle, 1e-2), 1e-6)
              << "d=" << d << " m=" << m << " M=" << M;
        }
      }
    }
  }
}

TEST(Potential, HessianVectorMatchesFiniteDifferenceHessian) {
  std::mt19937_64 rng(17);
  for (Index d : {2, 8}) {
    const ModelParams p = random_params({.d = d, .m = 16, .M = 2}, rng);
    const Vector s = random_point(d, rng);
    const Matrix H = fd_spatial_hessian(s, p);
    PointEvaluation ev(s, p);
    const Vector e = Vector::Random(d);
    const Vector hv = ev.hessian_vector(e);
    const Vector oracle = H * e;
    for (Index k = 0; k < d; ++k) EXPECT_LT(rel_err(hv(k), oracle(k), 1e-2), 1e-6);
    EXPECT_NEAR(ev.hessian_quadratic(e), e.dot(hv), 1e-12);
  }
}

TEST(Potential, TraceIsCachedAndStable) {
  std::mt19937_64 rng(19);
  const ModelParams p = random_params({.d = 5, .m = 8, .M = 2}, rng);
  const Vector s = random_point(5, rng);
  PointEvaluation ev(s, p);
  const double first = ev.exact_trace();
  EXPECT_EQ(first, ev.exact_trace());
  EXPECT_EQ(first, PointEvaluation(s, p).exact_trace());
}

TEST(Potential, BatchAgreesWithPointEvaluation) {
  std::mt19937_64 rng(23);
  struct Dims {
    Index d, m;
  };
  // Covers both the column-wise (d <= m) and Gram (d > m) trace paths.
  for (const Dims dims : {Dims{6, 12}, Dims{20, 6}}) {
    for (int M : {1, 3}) {
      const Index d = dims.d;
      const ModelParams p = random_params({.d = d, .m = dims.m, .M = M, .h = 0.7}, rng);
      Matrix S(9, d + 1);
      for (Index i = 0; i < S.rows(); ++i) S.row(i) = random_point(d, rng).transpose();
      BatchEvaluation batch(S, p);
      const Vector phi = potential_batch(S, p);
      const Vector tr = batch.exact_trace();
      const Matrix E = Matrix::Random(S.rows(), d);
      const Vector quad = batch.hessian_quadratic(E);
      for (Index i = 0; i < S.rows(); ++i) {
        PointEvaluation ev(S.row(i).transpose(), p);
        EXPECT_NEAR(phi(i), potential_forward(S.row(i).transpose(), p), 1e-12);
        EXPECT_LT((batch.gradient().row(i).transpose() - ev.gradient()).norm(), 1e-12);
        EXPECT_NEAR(tr(i), ev.exact_trace(), 1e-11);
        EXPECT_NEAR(quad(i), ev.hessian_quadratic(E.row(i).transpose()), 1e-11);
      }
    }
  }
}

TEST(Hutchinson, ZeroHessianGivesZero) {
  ModelParams p = zero_params({.d = 3, .m = 4, .M = 1});
  p.b.setOnes();
  std::mt19937_64 rng(29);
  PointEvaluation ev(random_point(3, rng), p);
  EXPECT_EQ(hutchinson_trace(ev, 8, ProbeDistribution::rademacher, rng), 0.0);
  EXPECT_EQ(hutchinson_trace(ev, 8, ProbeDistribution::gaussian, rng), 0.0);
}

TEST(Hutchinson, ConvergesToExactTrace) {
  std::mt19937_64 rng(31);
  const ModelParams p = random_params({.d = 8, .m = 16, .M = 2}, rng);
  PointEvaluation ev(random_point(8, rng), p);
  const double exact = ev.exact_trace();
  for (auto dist : {ProbeDistribution::rademacher, ProbeDistribution::gaussian}) {
    const double est = hutchinson_trace(ev, 10000, dist, rng);
    EXPECT_LT(std::abs(est - exact), 0.02 * std::abs(exact) + 1e-3);
  }
}

TEST(Hutchinson, SignFlippedProbesGiveSameEstimate) {
  std::mt19937_64 rng(37);
  const ModelParams p = random_params({.d = 4, .m = 8, .M = 1}, rng);
  PointEvaluation ev(random_point(4, rng), p);
  std::vector<Vector> probes, flipped;
  for (int k = 0; k < 5; ++k) {
    probes.push_back(draw_probe(4, ProbeDistribution::gaussian, rng));
    flipped.push_back(-probes.back());
  }
  EXPECT_NEAR(hutchinson_trace(ev, probes), hutchinson_trace(ev, flipped), 1e-13);
}

TEST(Hutchinson, RejectsZeroProbes) {
  std::mt19937_64 rng(41);
  const ModelParams p = random_params({.d = 2, .m = 4, .M = 1}, rng);
  PointEvaluation ev(random_point(2, rng), p);
  EXPECT_THROW(hutchinson_trace(ev, 0, ProbeDistribution::rademacher, rng),
               std::invalid_argument);
  EXPECT_THROW(hutchinson_trace(ev, std::span<const Vector>{}), std::invalid_argument);
}

TEST(Hutchinson, RademacherProbesHaveUnitEntries) {
  std::mt19937_64 rng(43);
  const Matrix E = draw_probes(50, 7, ProbeDistribution::rademacher, rng);
  EXPECT_TRUE((E.array().abs() == 1.0).all());
}

TEST(Params, FlattenRoundTrip) {
  std::mt19937_64 rng(47);
  const ModelParams p = random_params({.d = 3, .m = 5, .M = 2}, rng);
  const Vector flat = flatten(p);
  EXPECT_EQ(flat.size(), parameter_count(p));
  ModelParams q = zero_params(shape_of(p));
  unflatten(flat, q);
  EXPECT_EQ(flatten(q), flat);
}

TEST(Params, DefaultShapeAndValidation) {
  EXPECT_EQ(default_rank(2), 2);
  EXPECT_EQ(default_rank(43), 10);
  std::mt19937_64 rng(53);
  ModelParams p = init_params({.d = 2, .m = 8, .M = 1}, rng);
  EXPECT_EQ(p.resnet.K0.rows(), 8);
  EXPECT_EQ(p.resnet.K0.cols(), 3);
  EXPECT_EQ(p.c, 0.0);
  EXPECT_LE(p.w.cwiseAbs().maxCoeff(), 1e-3);
  p.resnet.h = -1.0;
  EXPECT_THROW(validate(p), ConfigError);
}
