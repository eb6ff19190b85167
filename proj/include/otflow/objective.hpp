#pragma once

#include <functional>

#include "otflow/flow.hpp"

namespace otflow {

struct LossBreakdown {
  double C = 0.0;
  double L = 0.0;
  double R = 0.0;
  double total = 0.0;
  double alpha1 = 1.0;
  double alpha2 = 1.0;
};

// Per-sample negative log-likelihood 1/2 |z(T)|^2 - ell(T) + d/2 log(2 pi).
Vector loss_C(const FlowState& final_state);

// Batch means of C, L, R and total = alpha1 C + L + alpha2 R.
LossBreakdown breakdown(const FlowState& final_state, double alpha1, double alpha2);

// Log density of the standard normal in d dimensions, row-wise.
Vector standard_normal_log_density(const Matrix& y);

using LogDensity = std::function<Vector(const Matrix&)>;

struct KLCheck {
  double direct = 0.0;      // mean of log rho0(x) + C(x, T) over x ~ rho0
  double direct_se = 0.0;
  double importance = 0.0;  // E_{y ~ rho1}[w log w], w = rho(y, T) / rho1(y), via the inverse flow
  double importance_se = 0.0;
  double discrepancy = 0.0;  // |direct - importance|

  double combined_se() const;
};

// Two independent estimates of KL(rho(., T) || rho1): the loss-based route on
// samples x ~ rho0 and an importance-weighted route on latent samples y ~ rho1.
// Throws std::invalid_argument when log_rho0 is empty.
KLCheck kl_equivalence_check(const Matrix& x, const Matrix& y, const LogDensity& log_rho0,
                             const ModelParams& params, int nt);

}  // namespace otflow
