#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>

#include "otflow/potential.hpp"

namespace otflow {

// Biased V-statistic with kernel exp(-|x - q|^2 / 2). Symmetric in its
// arguments bit for bit; zero when X and Q hold the same rows in the same order.
// Throws ConfigError on a dimension mismatch or an empty argument.
double mmd(const Matrix& X, const Matrix& Q);

// Mean over rows of |f^{-1}(f(x)) - x| with nt RK4 steps each way.
double inverse_error(const Matrix& X, const ModelParams& params, int nt, double T = 1.0);

// Estimated log rho0 at rows of `x` given in original coordinates:
// log rho1(f(x_s)) + ell(x_s, T) - sum log std, with x_s = (x - mean) / std.
Vector log_density(const Matrix& x, const ModelParams& params, const Vector& mean,
                   const Vector& std, int nt, double T = 1.0);

struct BootstrapConfig {
  int resamples = 4000;
  int resample_size = 16;
  double level = 0.99;
  std::uint64_t seed = 0;
};

// Percentile interval of the resampled mean. Throws std::invalid_argument for
// fewer than 2 observations; constant input yields a zero-width interval.
std::pair<double, double> bootstrap_ci(std::span<const double> samples,
                                       const BootstrapConfig& config = {});

// Linear-interpolated percentile, q in [0, 1]. `values` must be sorted.
double percentile_sorted(std::span<const double> values, double q);
double median(std::span<const double> values);

struct EvalReport {
  double mmd = 0.0;
  double inverse_error = 0.0;
  double test_C = 0.0;
  long nfe_forward = 0;
  long nfe_inverse = 0;
  double seconds_forward = 0.0;
  double seconds_inverse = 0.0;
  double seconds_mmd = 0.0;
  long n_test = 0;
  long n_generated = 0;
  int nt = 0;
  std::string coordinates = "standardized";

  // One JSON object on a single line.
  std::string to_json() const;
  std::string summary() const;
};

struct EvalConfig {
  int nt = 16;
  Index generated = 100000;
  std::uint64_t seed = 0;
};

// Test C and inverse error at `nt`, and MMD between `test` and inverse-flow
// generations from `generated` latent draws.
EvalReport evaluate(const Matrix& test, const ModelParams& params, const EvalConfig& config);

}  // namespace otflow
