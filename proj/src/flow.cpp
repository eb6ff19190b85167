#include "otflow/flow.hpp"

#include <cmath>

#include <fmt/format.h>

#include "otflow/errors.hpp"

namespace otflow {
namespace {

Matrix space_time(const Matrix& z, double t) {
  Matrix S(z.rows(), z.cols() + 1);
  S.leftCols(z.cols()) = z;
  S.col(z.cols()).setConstant(t);
  return S;
}

void check_args(int nt, double T) {
  if (nt < 1) throw ConfigError("number of time steps must be >= 1");
  if (!(T > 0.0)) throw ConfigError("final time T must be positive");
}

FlowState axpy(const FlowState& base, double a, const FlowState& k) {
  FlowState out;
  out.z = base.z + a * k.z;
  out.ell = base.ell + a * k.ell;
  out.L = base.L + a * k.L;
  out.R = base.R + a * k.R;
  return out;
}

Matrix velocity(const Matrix& z, double t, const ModelParams& params) {
  BatchEvaluation eval(space_time(z, t), params);
  return -eval.gradient().leftCols(z.cols());
}

}  // namespace

FlowState FlowState::initial(const Matrix& x) {
  FlowState s;
  s.z = x;
  s.ell = Vector::Zero(x.rows());
  s.L = Vector::Zero(x.rows());
  s.R = Vector::Zero(x.rows());
  return s;
}

FlowState dynamics(const FlowState& state, double t, const ModelParams& params) {
  const Index d = state.z.cols();
  if (d != params.dim()) {
    throw ConfigError(fmt::format("state dimension {} differs from model dimension {}", d,
                                  params.dim()));
  }
  BatchEvaluation eval(space_time(state.z, t), params);
  const Matrix& grad = eval.gradient();

  FlowState rate;
  rate.z = -grad.leftCols(d);
  rate.ell = -eval.exact_trace();
  rate.L = 0.5 * grad.leftCols(d).rowwise().squaredNorm();
  rate.R = (grad.col(d) - rate.L).cwiseAbs();

  for (Index i = 0; i < rate.z.rows(); ++i) {
    if (!rate.z.row(i).allFinite() || !std::isfinite(rate.ell(i)) || !std::isfinite(rate.R(i))) {
      throw DivergenceError(fmt::format("non-finite dynamics for sample {} at t={}", i, t), -1, i);
    }
  }
  return rate;
}

ForwardSolve integrate_forward(const Matrix& x, const ModelParams& params, int nt, double T,
                               bool store_trajectory) {
  check_args(nt, T);
  const double h = T / nt;
  ForwardSolve out;
  out.state = FlowState::initial(x);
  out.report = {0, nt, Direction::forward};
  if (store_trajectory) out.trajectory.push_back(x);

  double t = 0.0;
  for (int step = 0; step < nt; ++step) {
    try {
      const FlowState k1 = dynamics(out.state, t, params);
      const FlowState k2 = dynamics(axpy(out.state, 0.5 * h, k1), t + 0.5 * h, params);
      const FlowState k3 = dynamics(axpy(out.state, 0.5 * h, k2), t + 0.5 * h, params);
      const FlowState k4 = dynamics(axpy(out.state, h, k3), t + h, params);
      out.state.z += (h / 6.0) * (k1.z + 2.0 * k2.z + 2.0 * k3.z + k4.z);
      out.state.ell += (h / 6.0) * (k1.ell + 2.0 * k2.ell + 2.0 * k3.ell + k4.ell);
      out.state.L += (h / 6.0) * (k1.L + 2.0 * k2.L + 2.0 * k3.L + k4.L);
      out.state.R += (h / 6.0) * (k1.R + 2.0 * k2.R + 2.0 * k3.R + k4.R);
    } catch (const DivergenceError& e) {
      throw DivergenceError(e.what(), step, e.sample());
    }
    out.report.nfe += 4;
    t = (step + 1) * h;
    if (store_trajectory) out.trajectory.push_back(out.state.z);
  }
  return out;
}

namespace {

// RK4 on the position equation alone, from t0 with signed step h.
Matrix positions_rk4(const Matrix& z0, const ModelParams& params, int nt, double t0, double h) {
  Matrix z = z0;
  for (int step = 0; step < nt; ++step) {
    const double t = t0 + step * h;
    const Matrix k1 = velocity(z, t, params);
    const Matrix k2 = velocity(z + 0.5 * h * k1, t + 0.5 * h, params);
    const Matrix k3 = velocity(z + 0.5 * h * k2, t + 0.5 * h, params);
    const Matrix k4 = velocity(z + h * k3, t + h, params);
    z += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!z.allFinite()) throw DivergenceError("non-finite position during RK4 solve", step);
  }
  return z;
}

}  // namespace

Matrix integrate_positions(const Matrix& x, const ModelParams& params, int nt, double T,
                           SolveReport* report) {
  check_args(nt, T);
  if (x.cols() != params.dim()) throw ConfigError("sample dimension differs from model dimension");
  Matrix z = positions_rk4(x, params, nt, 0.0, T / nt);
  if (report) *report = {4L * nt, nt, Direction::forward};
  return z;
}

Matrix integrate_inverse(const Matrix& y, const ModelParams& params, int nt, double T,
                         SolveReport* report) {
  check_args(nt, T);
  if (y.cols() != params.dim()) throw ConfigError("latent dimension differs from model dimension");
  Matrix z = positions_rk4(y, params, nt, T, -T / nt);
  if (report) *report = {4L * nt, nt, Direction::inverse};
  return z;
}

}  // namespace otflow
