#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace otflow {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

// Elementwise activation sigma(x) = log(e^x + e^-x) and its derivatives.
namespace activation {

inline double sigma(double x) {
  const double ax = std::abs(x);
  return ax + std::log1p(std::exp(-2.0 * ax));
}
inline double dsigma(double x) { return std::tanh(x); }
inline double d2sigma(double x) {
  const double t = std::tanh(x);
  return 1.0 - t * t;
}
inline double d3sigma(double x) {
  const double t = std::tanh(x);
  return -2.0 * t * (1.0 - t * t);
}

}  // namespace activation

struct HiddenLayer {
  Matrix K;  // m x m
  Vector b;  // m
};

struct ResNetParams {
  Matrix K0;  // m x (d+1)
  Vector b0;  // m
  std::vector<HiddenLayer> layers;  // M >= 1 residual layers
  double h = 1.0;

  Index width() const { return K0.rows(); }
  int depth() const { return static_cast<int>(layers.size()); }
};

// Trainable weights of Phi(s) = w'N(s) + 1/2 s'(A'A)s + b's + c, with s = (x, t).
// The same type doubles as the shape-congruent container for parameter gradients.
struct ModelParams {
  Vector w;  // m
  ResNetParams resnet;
  Matrix A;  // r x (d+1)
  Vector b;  // d+1
  double c = 0.0;

  Index dim() const { return b.size() - 1; }
  Index width() const { return w.size(); }
  Index rank() const { return A.rows(); }
  int depth() const { return resnet.depth(); }
};

using ParamGradient = ModelParams;

struct ModelShape {
  Index d = 2;
  Index m = 32;
  int M = 1;
  Index r = 0;  // 0 selects default_rank(d)
  double h = 1.0;
};

Index default_rank(Index d);

// Throws ConfigError when dimensions are inconsistent or h <= 0.
void validate(const ModelParams& params);

ModelParams zero_params(const ModelShape& shape);

// K entries uniform on +-sqrt(6 / (fan_in + fan_out)); w, A, b uniform on +-1e-3; c = 0.
ModelParams init_params(const ModelShape& shape, std::mt19937_64& rng);

ModelShape shape_of(const ModelParams& params);

Index parameter_count(const ModelParams& params);
Vector flatten(const ModelParams& params);
// Writes `flat` into `params`, which must already have the target shape.
void unflatten(const Vector& flat, ModelParams& params);

// Per-point activations and backprop states of the ResNet. Owned by a
// PointEvaluation so a trace can only be taken for the point it was built from.
struct TraceWorkspace {
  std::vector<Vector> pre;  // K_i u_{i-1} + b_i, i = 0..M (pre[0] = K_0 s + b_0)
  std::vector<Vector> u;    // u_0..u_M
  std::vector<Vector> z;    // z_0..z_{M+1}; z[M+1] = w, z[0] = grad_s N(s) w
  Matrix J;                 // m x d running Jacobian of u_{i-1} w.r.t. the spatial inputs
};

double potential_forward(const Vector& s, const ModelParams& params);

class PointEvaluation {
 public:
  PointEvaluation(const Vector& s, const ModelParams& params);

  // Full space-time gradient grad_s Phi in R^{d+1}.
  const Vector& gradient() const { return grad_; }
  auto spatial_gradient() const { return grad_.head(grad_.size() - 1); }
  double time_derivative() const { return grad_(grad_.size() - 1); }
  const TraceWorkspace& workspace() const { return ws_; }

  // tr of the spatial d x d block of the Hessian.
  double exact_trace();

  // Spatial Hessian-vector product H e and quadratic form e'He, e in R^d.
  Vector hessian_vector(const Vector& e) const;
  double hessian_quadratic(const Vector& e) const;

 private:
  const ModelParams* params_;
  Vector s_;
  Vector grad_;
  TraceWorkspace ws_;
  bool have_trace_ = false;
  double trace_ = 0.0;
};

inline PointEvaluation potential_gradient(const Vector& s, const ModelParams& params) {
  return PointEvaluation(s, params);
}

enum class ProbeDistribution { rademacher, gaussian };

Vector draw_probe(Index d, ProbeDistribution dist, std::mt19937_64& rng);
Matrix draw_probes(Index rows, Index d, ProbeDistribution dist, std::mt19937_64& rng);

// Mean of e_k' H e_k over the given probes. Throws std::invalid_argument when empty.
double hutchinson_trace(const PointEvaluation& eval, std::span<const Vector> probes);
double hutchinson_trace(const PointEvaluation& eval, int num_probes, ProbeDistribution dist,
                        std::mt19937_64& rng);

// Batched evaluation over the rows of S (n x (d+1)). The forward and backprop
// states are cached so the gradient, the exact trace, and any number of
// Hessian quadratic forms share one pass through the network.
class BatchEvaluation {
 public:
  BatchEvaluation(const Matrix& S, const ModelParams& params);

  const Matrix& gradient() const { return grad_; }  // n x (d+1)
  Vector exact_trace() const;                       // n
  // Row-wise e_i' H_i e_i for a probe matrix E (n x d).
  Vector hessian_quadratic(const Matrix& E) const;

 private:
  Vector hidden_trace_by_columns(const std::vector<Matrix>& weight,
                                 const std::vector<Matrix>& slope) const;
  Vector hidden_trace_by_gram(const std::vector<Matrix>& weight,
                              const std::vector<Matrix>& slope) const;

  const ModelParams* params_;
  Matrix S_;
  std::vector<Matrix> pre_;  // n x m each
  std::vector<Matrix> u_;
  std::vector<Matrix> z_;    // z_[i] for i = 1..M+1 (z_[0] unused)
  Matrix grad_;
};

Vector potential_batch(const Matrix& S, const ModelParams& params);

}  // namespace otflow
