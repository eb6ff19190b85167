#pragma once

#include <vector>

#include "otflow/potential.hpp"

namespace otflow {

// Batched augmented state (z, ell, L, R); row i belongs to sample i.
struct FlowState {
  Matrix z;    // n x d positions
  Vector ell;  // accumulated log-determinant
  Vector L;    // accumulated transport cost
  Vector R;    // accumulated HJB violation

  static FlowState initial(const Matrix& x);
  Index size() const { return z.rows(); }
};

enum class Direction { forward, inverse };

struct SolveReport {
  long nfe = 0;
  int nt = 0;
  Direction direction = Direction::forward;
};

// Time derivative of the augmented state at time t:
//   z' = -grad Phi, ell' = -tr(Hess Phi), L' = 1/2 |grad Phi|^2, R' = |d_t Phi - 1/2 |grad Phi|^2|.
// Throws DivergenceError naming the first sample with a non-finite derivative.
FlowState dynamics(const FlowState& state, double t, const ModelParams& params);

struct ForwardSolve {
  FlowState state;
  SolveReport report;
  std::vector<Matrix> trajectory;  // z at t_0..t_nt, filled only on request
};

// Classical RK4 with nt equal steps on [0, T].
ForwardSolve integrate_forward(const Matrix& x, const ModelParams& params, int nt, double T = 1.0,
                               bool store_trajectory = false);

// Forward RK4 on the position equation only (no log-determinant or costs).
Matrix integrate_positions(const Matrix& x, const ModelParams& params, int nt, double T = 1.0,
                           SolveReport* report = nullptr);

// RK4 from t = T back to 0 on the position equation only, mapping latent points to data space.
Matrix integrate_inverse(const Matrix& y, const ModelParams& params, int nt, double T = 1.0,
                         SolveReport* report = nullptr);

}  // namespace otflow
