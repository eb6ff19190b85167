#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "otflow/autodiff.hpp"
#include "otflow/errors.hpp"

using namespace otflow;
using otflow::testing::random_params;

namespace {

Matrix gaussian_batch(Index n, Index d, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix x(n, d);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = n01(rng);
  return x;
}

struct Case {
  ModelShape shape;
  ObjectiveConfig config;
};

std::vector<Case> gradient_cases() {
  std::vector<Case> cases;
  int seed = 0;
  for (Index d : {1, 2, 3}) {
    for (int M : {1, 2}) {
      for (int nt : {1, 3}) {
        for (auto trace : {TraceEstimator::exact, TraceEstimator::hutchinson}) {
          Case c;
          c.shape = {.d = d, .m = 4 + 2 * M, .M = M, .h = 0.5};
          c.config.nt = nt;
          c.config.trace = trace;
          c.config.alpha1 = 1.0 + 0.5 * (seed % 3);
          c.config.alpha2 = 0.3 * (seed % 4);
          c.config.num_probes = 1 + seed % 2;
          c.config.probe_seed = 100 + seed;
          c.config.probe_dist = seed % 2 ? ProbeDistribution::gaussian : ProbeDistribution::rademacher;
          ++seed;
          cases.push_back(c);
        }
      }
    }
  }
  return cases;
}

}  // namespace

TEST(Autodiff, ParameterGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(101);
  const auto cases = gradient_cases();
  ASSERT_GE(cases.size(), 20u);
  for (const Case& c : cases) {
    ModelParams p = random_params(c.shape, rng);
    p.resnet.K0 *= 0.5;
    const Matrix x = gaussian_batch(4, c.shape.d, rng);

    RecordedObjective rec = record_objective(x, p, c.config);
    const Vector g = flatten(backward(rec));
    const Vector theta = flatten(p);
    ModelParams q = p;
    const double step = 1e-4;
    for (Index k = 0; k < theta.size(); ++k) {
      Vector tp = theta, tm = theta;
      tp(k) += step;
      tm(k) -= step;
      unflatten(tp, q);
      const double fp = record_objective(x, q, c.config).value();
      unflatten(tm, q);
      const double fm = record_objective(x, q, c.config).value();
      const double fd = (fp - fm) / (2.0 * step);
      EXPECT_LE(std::abs(g(k) - fd), 1e-5 * std::abs(fd) + 1e-8)
          << "d=" << c.shape.d << " M=" << c.shape.M << " nt=" << c.config.nt
          << " param=" << k;
    }
  }
}

TEST(Autodiff, TapedValueMatchesUntapedSolve) {
  std::mt19937_64 rng(103);
  for (int M : {1, 2}) {
    const ModelParams p = random_params({.d = 3, .m = 6, .M = M, .h = 0.5}, rng);
    const Matrix x = gaussian_batch(7, 3, rng);
    ObjectiveConfig cfg;
    cfg.nt = 5;
    cfg.alpha1 = 2.0;
    cfg.alpha2 = 3.0;
    const RecordedObjective rec = record_objective(x, p, cfg);
    const LossBreakdown ref = breakdown(integrate_forward(x, p, cfg.nt).state, 2.0, 3.0);
    EXPECT_NEAR(rec.losses().C, ref.C, 1e-12 * std::max(1.0, std::abs(ref.C)));
    EXPECT_NEAR(rec.losses().L, ref.L, 1e-12 * std::max(1.0, std::abs(ref.L)));
    EXPECT_NEAR(rec.losses().R, ref.R, 1e-12 * std::max(1.0, std::abs(ref.R)));
    EXPECT_NEAR(rec.value(), ref.total, 1e-12 * std::max(1.0, std::abs(ref.total)));
  }
}

TEST(Autodiff, ZeroParametersGiveGaussianLoss) {
  const ModelParams p = zero_params({.d = 2, .m = 4, .M = 1});
  Matrix x(2, 2);
  x << 1.0, 0.0, 0.0, 0.0;
  const RecordedObjective rec = record_objective(x, p, ObjectiveConfig{});
  EXPECT_NEAR(rec.losses().C, 0.25 + std::log(2.0 * std::numbers::pi), 1e-12);
  EXPECT_EQ(rec.losses().L, 0.0);
  EXPECT_EQ(rec.losses().R, 0.0);
}

TEST(Autodiff, DeterministicGradient) {
  std::mt19937_64 rng(107);
  const ModelParams p = random_params({.d = 2, .m = 8, .M = 2}, rng);
  const Matrix x = gaussian_batch(16, 2, rng);
  ObjectiveConfig cfg;
  cfg.trace = TraceEstimator::hutchinson;
  cfg.probe_seed = 9;
  RecordedObjective a = record_objective(x, p, cfg);
  RecordedObjective b = record_objective(x, p, cfg);
  EXPECT_EQ(a.value(), b.value());
  EXPECT_EQ(flatten(backward(a)), flatten(backward(b)));
}

TEST(Autodiff, GradientIsLinearInWeights) {
  std::mt19937_64 rng(109);
  const ModelParams p = random_params({.d = 2, .m = 6, .M = 1}, rng);
  const Matrix x = gaussian_batch(8, 2, rng);
  auto grad_for = [&](double a1, double a2) {
    ObjectiveConfig cfg;
    cfg.nt = 3;
    cfg.alpha1 = a1;
    cfg.alpha2 = a2;
    RecordedObjective rec = record_objective(x, p, cfg);
    return flatten(backward(rec));
  };
  const Vector gC = grad_for(1.0, 0.0) - grad_for(0.0, 0.0);
  const Vector gR = grad_for(0.0, 1.0) - grad_for(0.0, 0.0);
  const Vector combo = grad_for(2.5, 0.7);
  const Vector predicted = grad_for(0.0, 0.0) + 2.5 * gC + 0.7 * gR;
  EXPECT_LT((combo - predicted).norm(), 1e-10 * std::max(1.0, combo.norm()));
}

TEST(Autodiff, ConstantOffsetHasNoGradient) {
  std::mt19937_64 rng(113);
  const ModelParams p = random_params({.d = 2, .m = 4, .M = 1}, rng);
  RecordedObjective rec = record_objective(gaussian_batch(5, 2, rng), p, ObjectiveConfig{});
  EXPECT_EQ(backward(rec).c, 0.0);
}

TEST(Autodiff, RejectsBadInput) {
  std::mt19937_64 rng(127);
  const ModelParams p = random_params({.d = 2, .m = 4, .M = 1}, rng);
  EXPECT_THROW(record_objective(gaussian_batch(3, 3, rng), p, ObjectiveConfig{}), ConfigError);
  ObjectiveConfig cfg;
  cfg.nt = 0;
  EXPECT_THROW(record_objective(gaussian_batch(3, 2, rng), p, cfg), ConfigError);
}

TEST(Autodiff, DivergenceIsReported) {
  ModelParams p = zero_params({.d = 1, .m = 2, .M = 1, .r = 1});
  p.A(0, 0) = 1e200;
  EXPECT_THROW(record_objective(Matrix::Ones(2, 1), p, ObjectiveConfig{}), DivergenceError);
}
