#include "otflow/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "otflow/data.hpp"
#include "otflow/errors.hpp"
#include "otflow/flow.hpp"
#include "otflow/objective.hpp"

namespace otflow {
namespace {

constexpr Index kTile = 256;

// exp(-|a_i - b_j|^2 / 2) summed over one tile; `half_norms` hold -|.|^2 / 2.
double tile_sum(const Matrix& A, const Matrix& B, const Vector& a_half, const Vector& b_half,
                Index i, Index ni, Index j, Index nj, Matrix& buffer) {
  auto t = buffer.topLeftCorner(ni, nj);
  t.noalias() = A.middleRows(i, ni) * B.middleRows(j, nj).transpose();
  for (Index c = 0; c < nj; ++c) {
    t.col(c).array() = (t.col(c).array() + a_half.segment(i, ni).array() + b_half(j + c)).min(0.0).exp();
  }
  return t.sum();
}

// Sum of the kernel over all pairs, tile by tile in a fixed order.
double kernel_sum(const Matrix& A, const Matrix& B) {
  const Vector a_half = -0.5 * A.rowwise().squaredNorm();
  const Vector b_half = -0.5 * B.rowwise().squaredNorm();
  Matrix buffer(kTile, kTile);
  double total = 0.0;
  for (Index i = 0; i < A.rows(); i += kTile) {
    const Index ni = std::min(kTile, A.rows() - i);
    for (Index j = 0; j < B.rows(); j += kTile) {
      total += tile_sum(A, B, a_half, b_half, i, ni, j, std::min(kTile, B.rows() - j), buffer);
    }
  }
  return total;
}

// Same sum for B = A, visiting each off-diagonal tile pair once.
double self_kernel_sum(const Matrix& A) {
  const Vector a_half = -0.5 * A.rowwise().squaredNorm();
  Matrix buffer(kTile, kTile);
  double total = 0.0;
  for (Index i = 0; i < A.rows(); i += kTile) {
    const Index ni = std::min(kTile, A.rows() - i);
    total += tile_sum(A, A, a_half, a_half, i, ni, i, ni, buffer);
    for (Index j = i + kTile; j < A.rows(); j += kTile) {
      total += 2.0 * tile_sum(A, A, a_half, a_half, i, ni, j, std::min(kTile, A.rows() - j), buffer);
    }
  }
  return total;
}

// Orders two matrices by (rows, contents) so the cross term does not depend on
// argument order.
bool canonical_first(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) return a.rows() < b.rows();
  return !std::lexicographical_compare(b.data(), b.data() + b.size(), a.data(),
                                       a.data() + a.size());
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

double six_digits(double v) { return std::stod(fmt::format("{:.6g}", v)); }

}  // namespace

double mmd(const Matrix& X, const Matrix& Q) {
  if (X.rows() < 1 || Q.rows() < 1) throw ConfigError("MMD needs at least one sample per set");
  if (X.cols() != Q.cols()) {
    throw ConfigError(fmt::format("MMD dimension mismatch: {} vs {}", X.cols(), Q.cols()));
  }
  const double n = static_cast<double>(X.rows());
  const double m = static_cast<double>(Q.rows());
  const double sxx = self_kernel_sum(X);
  const double xx = sxx / (n * n);
  const double qq = self_kernel_sum(Q) / (m * m);
  double sxq = 0.0;
  if (X == Q) {
    sxq = sxx;
  } else {
    sxq = canonical_first(X, Q) ? kernel_sum(X, Q) : kernel_sum(Q, X);
  }
  const double xq = sxq / (n * m);
  return xx + qq - 2.0 * xq;
}

double inverse_error(const Matrix& X, const ModelParams& params, int nt, double T) {
  const Matrix y = integrate_positions(X, params, nt, T);
  const Matrix back = integrate_inverse(y, params, nt, T);
  return (back - X).rowwise().norm().mean();
}

double percentile_sorted(std::span<const double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

double median(std::span<const double> values) {
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  return percentile_sorted(sorted, 0.5);
}

std::pair<double, double> bootstrap_ci(std::span<const double> samples,
                                       const BootstrapConfig& config) {
  if (samples.size() < 2) throw std::invalid_argument("bootstrap needs at least 2 observations");
  if (config.resamples < 1 || config.resample_size < 1 || !(config.level > 0.0) ||
      !(config.level < 1.0)) {
    throw std::invalid_argument("bootstrap needs resamples >= 1, size >= 1, level in (0, 1)");
  }
  if (std::all_of(samples.begin(), samples.end(), [&](double v) { return v == samples[0]; })) {
    return {samples[0], samples[0]};
  }
  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
  std::vector<double> means(static_cast<std::size_t>(config.resamples));
  for (auto& mean : means) {
    double acc = 0.0;
    for (int k = 0; k < config.resample_size; ++k) acc += samples[pick(rng)];
    mean = acc / config.resample_size;
  }
  std::sort(means.begin(), means.end());
  const double tail = 0.5 * (1.0 - config.level);
  return {percentile_sorted(means, tail), percentile_sorted(means, 1.0 - tail)};
}

Vector log_density(const Matrix& x, const ModelParams& params, const Vector& mean,
                   const Vector& std, int nt, double T) {
  const ForwardSolve fwd = integrate_forward(standardize(x, mean, std), params, nt, T);
  return standard_normal_log_density(fwd.state.z) + fwd.state.ell -
         Vector::Constant(x.rows(), std.array().log().sum());
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["mmd"] = six_digits(mmd);
  j["inverse_error"] = six_digits(inverse_error);
  j["test_C"] = six_digits(test_C);
  j["nfe_forward"] = nfe_forward;
  j["nfe_inverse"] = nfe_inverse;
  j["seconds_forward"] = six_digits(seconds_forward);
  j["seconds_inverse"] = six_digits(seconds_inverse);
  j["seconds_mmd"] = six_digits(seconds_mmd);
  j["n_test"] = n_test;
  j["n_generated"] = n_generated;
  j["nt"] = nt;
  j["coordinates"] = coordinates;
  return j.dump();
}

std::string EvalReport::summary() const {
  return fmt::format(
      "test C         {:.6g}\n"
      "inverse error  {:.6g}\n"
      "MMD            {:.6g}  ({} test vs {} generated, {} coordinates)\n"
      "NFE            forward {}, inverse {} (nt = {})\n"
      "wall time      forward {:.6g} s, inverse {:.6g} s, MMD {:.6g} s\n",
      test_C, inverse_error, mmd, n_test, n_generated, coordinates, nfe_forward, nfe_inverse, nt,
      seconds_forward, seconds_inverse, seconds_mmd);
}

EvalReport evaluate(const Matrix& test, const ModelParams& params, const EvalConfig& config) {
  if (test.cols() != params.dim()) {
    throw ConfigError(fmt::format("test data has {} columns, model dimension is {}", test.cols(),
                                  params.dim()));
  }
  EvalReport report;
  report.nt = config.nt;
  report.n_test = test.rows();
  report.n_generated = config.generated;

  auto start = std::chrono::steady_clock::now();
  const ForwardSolve fwd = integrate_forward(test, params, config.nt);
  report.seconds_forward = seconds_since(start);
  report.nfe_forward = fwd.report.nfe;
  report.test_C = loss_C(fwd.state).mean();

  start = std::chrono::steady_clock::now();
  SolveReport back_report, gen_report;
  const Matrix back = integrate_inverse(fwd.state.z, params, config.nt, 1.0, &back_report);
  report.inverse_error = (back - test).rowwise().norm().mean();
  const Matrix generated = integrate_inverse(
      sample_latent(config.generated, params.dim(), config.seed), params, config.nt, 1.0,
      &gen_report);
  report.seconds_inverse = seconds_since(start);
  report.nfe_inverse = back_report.nfe + gen_report.nfe;

  start = std::chrono::steady_clock::now();
  report.mmd = mmd(test, generated);
  report.seconds_mmd = seconds_since(start);
  return report;
}

}  // namespace otflow
