#include "otflow/objective.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <tuple>
#include <utility>

namespace otflow {
namespace {

double half_log_two_pi() { return 0.5 * std::log(2.0 * std::numbers::pi); }

std::pair<double, double> mean_and_se(const Vector& v) {
  const double n = static_cast<double>(v.size());
  const double mean = v.mean();
  if (v.size() < 2) return {mean, 0.0};
  const double var = (v.array() - mean).square().sum() / (n - 1.0);
  return {mean, std::sqrt(var / n)};
}

}  // namespace

Vector loss_C(const FlowState& s) {
  const double d = static_cast<double>(s.z.cols());
  Vector c = 0.5 * s.z.rowwise().squaredNorm() - s.ell;
  c.array() += d * half_log_two_pi();
  return c;
}

LossBreakdown breakdown(const FlowState& s, double alpha1, double alpha2) {
  LossBreakdown out;
  out.C = loss_C(s).mean();
  out.L = s.L.mean();
  out.R = s.R.mean();
  out.alpha1 = alpha1;
  out.alpha2 = alpha2;
  out.total = alpha1 * out.C + out.L + alpha2 * out.R;
  return out;
}

Vector standard_normal_log_density(const Matrix& y) {
  Vector out = -0.5 * y.rowwise().squaredNorm();
  out.array() -= static_cast<double>(y.cols()) * half_log_two_pi();
  return out;
}

double KLCheck::combined_se() const {
  return std::sqrt(direct_se * direct_se + importance_se * importance_se);
}

KLCheck kl_equivalence_check(const Matrix& x, const Matrix& y, const LogDensity& log_rho0,
                             const ModelParams& params, int nt) {
  if (!log_rho0) throw std::invalid_argument("KL check needs an analytic log density for rho0");
  if (x.rows() < 2 || y.rows() < 2) throw std::invalid_argument("KL check needs >= 2 samples");

  KLCheck out;
  const ForwardSolve fwd = integrate_forward(x, params, nt);
  const Vector direct = log_rho0(x) + loss_C(fwd.state);
  std::tie(out.direct, out.direct_se) = mean_and_se(direct);

  // rho(y, T) = rho0(x) exp(-ell(x, T)) with x = f^{-1}(y).
  const Matrix x_back = integrate_inverse(y, params, nt);
  const ForwardSolve replay = integrate_forward(x_back, params, nt);
  const Vector log_ratio =
      log_rho0(x_back) - replay.state.ell - standard_normal_log_density(y);
  const Vector w_log_w = log_ratio.array().exp() * log_ratio.array();
  std::tie(out.importance, out.importance_se) = mean_and_se(w_log_w);

  out.discrepancy = std::abs(out.direct - out.importance);
  return out;
}

}  // namespace otflow
