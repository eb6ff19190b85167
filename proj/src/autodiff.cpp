#include "otflow/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>

#include <fmt/format.h>

#include "otflow/errors.hpp"

namespace otflow {
namespace {

using ad::Tape;
using ad::Var;

struct TapedDerivatives {
  Var grad;   // n x (d+1)
  Var trace;  // n x 1
};

struct TapedState {
  Var z, ell, L, R;
};

class TapedModel {
 public:
  TapedModel(Tape& tape, Var w, Var K0, Var b0,
             std::vector<Var> K, std::vector<Var> bh, Var A, Var b, const ModelShape& shape)
      : t_(tape), w_(w), K0_(K0), b0_(b0), K_(std::move(K)), bh_(std::move(bh)), A_(A), b_(b),
        d_(shape.d), h_(shape.h) {}

  // Gradient of Phi at (z, t) and the spatial Hessian trace (exact) or its
  // Hutchinson estimate over the probe matrices.
  TapedDerivatives evaluate(Var z, double time, const std::vector<Matrix>* probes) {
    const Index n = t_.value(z).rows();
    const int M = static_cast<int>(K_.size());
    const Var S = t_.hcat(z, t_.constant(Matrix::Constant(n, 1, time)));

    std::vector<Var> pre(M + 1), D(M + 1), Z(M + 2);
    pre[0] = t_.add(t_.matmul(S, K0_, false, true), t_.row_broadcast(b0_, n));
    Var u = t_.sigma(pre[0]);
    for (int i = 1; i <= M; ++i) {
      pre[i] = t_.add(t_.matmul(u, K_[i - 1], false, true), t_.row_broadcast(bh_[i - 1], n));
      if (i < M) u = t_.add(u, t_.scale(t_.sigma(pre[i]), h_));
    }
    for (int i = 0; i <= M; ++i) D[i] = t_.dsigma(pre[i]);

    Z[M + 1] = t_.row_broadcast(w_, n);
    for (int i = M; i >= 1; --i) {
      const Var step = t_.matmul(t_.hadamard(D[i], Z[i + 1]), K_[i - 1]);
      Z[i] = t_.add(Z[i + 1], t_.scale(step, h_));
    }
    const Var gradN = t_.matmul(t_.hadamard(D[0], Z[1]), K0_);
    const Var quad = t_.matmul(t_.matmul(S, A_, false, true), A_);
    TapedDerivatives out;
    out.grad = t_.add(t_.add(gradN, quad), t_.row_broadcast(b_, n));

    if (probes == nullptr) {
      out.trace = exact_trace(pre, D, Z, n);
    } else {
      Var sum;
      for (const Matrix& E : *probes) {
        const Var est = hutchinson(pre, D, Z, t_.constant(E));
        sum = sum.valid() ? t_.add(sum, est) : est;
      }
      out.trace = t_.scale(sum, 1.0 / static_cast<double>(probes->size()));
    }
    return out;
  }

 private:
  Var exact_trace(const std::vector<Var>& pre, const std::vector<Var>& D,
                  const std::vector<Var>& Z, Index n) {
    const int M = static_cast<int>(K_.size());
    const Var K0E = t_.col_slice(K0_, 0, d_);
    const Var col_sq = t_.row_sum(t_.square(K0E));
    Var trace = t_.matmul(t_.hadamard(t_.d2sigma(pre[0]), Z[1]), col_sq);

    std::vector<Var> weight(M + 1);
    for (int i = 1; i <= M; ++i) weight[i] = t_.hadamard(t_.d2sigma(pre[i]), Z[i + 1]);

    for (Index k = 0; k < d_; ++k) {
      Var J = t_.hadamard(D[0], t_.row_broadcast(t_.col_slice(K0_, k, 1), n));
      for (int i = 1; i <= M; ++i) {
        const Var KJ = t_.matmul(J, K_[i - 1], false, true);
        trace = t_.add(trace, t_.scale(t_.row_sum(t_.hadamard(weight[i], t_.square(KJ))), h_));
        if (i < M) J = t_.add(J, t_.scale(t_.hadamard(D[i], KJ), h_));
      }
    }
    const Var trA = t_.sum(t_.square(t_.col_slice(A_, 0, d_)));
    return t_.add(trace, t_.row_broadcast(trA, n));
  }

  Var hutchinson(const std::vector<Var>& pre, const std::vector<Var>& D,
                 const std::vector<Var>& Z, Var E) {
    const int M = static_cast<int>(K_.size());
    const Var K0E = t_.col_slice(K0_, 0, d_);
    std::vector<Var> dpre(M + 1);
    dpre[0] = t_.matmul(E, K0E, false, true);
    Var du = t_.hadamard(D[0], dpre[0]);
    for (int i = 1; i <= M; ++i) {
      dpre[i] = t_.matmul(du, K_[i - 1], false, true);
      if (i < M) du = t_.add(du, t_.scale(t_.hadamard(D[i], dpre[i]), h_));
    }
    Var dz;
    for (int i = M; i >= 1; --i) {
      Var inner = t_.hadamard(t_.hadamard(t_.d2sigma(pre[i]), dpre[i]), Z[i + 1]);
      if (dz.valid()) inner = t_.add(inner, t_.hadamard(D[i], dz));
      const Var term = t_.scale(t_.matmul(inner, K_[i - 1]), h_);
      dz = dz.valid() ? t_.add(dz, term) : term;
    }
    Var g0 = t_.hadamard(t_.hadamard(t_.d2sigma(pre[0]), dpre[0]), Z[1]);
    if (dz.valid()) g0 = t_.add(g0, t_.hadamard(D[0], dz));
    const Var hv = t_.matmul(g0, K0E);
    const Var AEe = t_.matmul(E, t_.col_slice(A_, 0, d_), false, true);
    return t_.add(t_.row_sum(t_.hadamard(E, hv)), t_.row_sum(t_.square(AEe)));
  }

  Tape& t_;
  Var w_, K0_, b0_;
  std::vector<Var> K_, bh_;
  Var A_, b_;
  Index d_;
  double h_;
};

}  // namespace

RecordedObjective record_objective(const Matrix& batch, const ModelParams& params,
                                   const ObjectiveConfig& config) {
  validate(params);
  if (batch.rows() < 1) throw std::invalid_argument("objective needs a nonempty batch");
  if (batch.cols() != params.dim()) {
    throw ConfigError(fmt::format("batch has {} columns, model dimension is {}", batch.cols(),
                                  params.dim()));
  }
  if (config.nt < 1 || !(config.T > 0.0)) throw ConfigError("objective needs nt >= 1 and T > 0");
  if (config.trace == TraceEstimator::hutchinson && config.num_probes < 1) {
    throw std::invalid_argument("Hutchinson objective needs at least one probe");
  }

  RecordedObjective rec;
  rec.shape_ = shape_of(params);
  Tape& tape = rec.tape_;
  auto& lv = rec.leaves_;
  lv.w = tape.variable(params.w);
  lv.K0 = tape.variable(params.resnet.K0);
  lv.b0 = tape.variable(params.resnet.b0);
  for (const auto& layer : params.resnet.layers) {
    lv.K.push_back(tape.variable(layer.K));
    lv.bh.push_back(tape.variable(layer.b));
  }
  lv.A = tape.variable(params.A);
  lv.b = tape.variable(params.b);
  lv.c = tape.variable(Matrix::Constant(1, 1, params.c));

  TapedModel model(tape, lv.w, lv.K0, lv.b0, lv.K, lv.bh, lv.A, lv.b, rec.shape_);

  const Index n = batch.rows();
  const Index d = batch.cols();

  std::optional<std::vector<Matrix>> probes;
  if (config.trace == TraceEstimator::hutchinson) {
    std::mt19937_64 rng(config.probe_seed);
    probes.emplace();
    for (int k = 0; k < config.num_probes; ++k) {
      probes->push_back(draw_probes(n, d, config.probe_dist, rng));
    }
  }
  const std::vector<Matrix>* probe_ptr = probes ? &*probes : nullptr;

  auto rate = [&](const TapedState& s, double time) {
    const TapedDerivatives der = model.evaluate(s.z, time, probe_ptr);
    const Var gx = tape.col_slice(der.grad, 0, d);
    const Var gt = tape.col_slice(der.grad, d, 1);
    TapedState k;
    k.z = tape.scale(gx, -1.0);
    k.ell = tape.scale(der.trace, -1.0);
    k.L = tape.scale(tape.row_sum(tape.square(gx)), 0.5);
    k.R = tape.abs(tape.sub(gt, k.L));
    return k;
  };
  auto axpy = [&](const TapedState& s, double a, const TapedState& k) {
    return TapedState{tape.add(s.z, tape.scale(k.z, a)), tape.add(s.ell, tape.scale(k.ell, a)),
                      tape.add(s.L, tape.scale(k.L, a)), tape.add(s.R, tape.scale(k.R, a))};
  };
  auto combine = [&](Var y, Var k1, Var k2, Var k3, Var k4, double h) {
    const Var mid = tape.add(tape.add(k1, tape.scale(k2, 2.0)), tape.add(tape.scale(k3, 2.0), k4));
    return tape.add(y, tape.scale(mid, h / 6.0));
  };

  const Var zeros = tape.constant(Matrix::Zero(n, 1));
  TapedState s{tape.constant(batch), zeros, zeros, zeros};
  const double h = config.T / config.nt;
  for (int step = 0; step < config.nt; ++step) {
    const double t = step * h;
    const TapedState k1 = rate(s, t);
    const TapedState k2 = rate(axpy(s, 0.5 * h, k1), t + 0.5 * h);
    const TapedState k3 = rate(axpy(s, 0.5 * h, k2), t + 0.5 * h);
    const TapedState k4 = rate(axpy(s, h, k3), t + h);
    s.z = combine(s.z, k1.z, k2.z, k3.z, k4.z, h);
    s.ell = combine(s.ell, k1.ell, k2.ell, k3.ell, k4.ell, h);
    s.L = combine(s.L, k1.L, k2.L, k3.L, k4.L, h);
    s.R = combine(s.R, k1.R, k2.R, k3.R, k4.R, h);
    if (!tape.value(s.z).allFinite() || !tape.value(s.ell).allFinite() ||
        !tape.value(s.R).allFinite()) {
      throw DivergenceError(fmt::format("non-finite state after RK4 step {}", step), step);
    }
  }

  const double inv_n = 1.0 / static_cast<double>(n);
  const double log_norm = 0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi);
  const Var c_vec = tape.add(tape.sub(tape.scale(tape.row_sum(tape.square(s.z)), 0.5), s.ell),
                             tape.constant(Matrix::Constant(n, 1, log_norm)));
  const Var mean_C = tape.scale(tape.sum(c_vec), inv_n);
  const Var mean_L = tape.scale(tape.sum(s.L), inv_n);
  const Var mean_R = tape.scale(tape.sum(s.R), inv_n);
  rec.root_ = tape.add(tape.add(tape.scale(mean_C, config.alpha1), mean_L),
                       tape.scale(mean_R, config.alpha2));

  rec.losses_.C = tape.scalar(mean_C);
  rec.losses_.L = tape.scalar(mean_L);
  rec.losses_.R = tape.scalar(mean_R);
  rec.losses_.alpha1 = config.alpha1;
  rec.losses_.alpha2 = config.alpha2;
  rec.losses_.total = tape.scalar(rec.root_);
  if (!std::isfinite(rec.losses_.total)) {
    throw DivergenceError("non-finite objective", config.nt);
  }
  return rec;
}

ParamGradient backward(RecordedObjective& rec) {
  ad::Tape& tape = rec.tape_;
  tape.backward(rec.root_);
  ParamGradient g = zero_params(rec.shape_);
  const auto& lv = rec.leaves_;
  g.w = tape.adjoint(lv.w);
  g.resnet.K0 = tape.adjoint(lv.K0);
  g.resnet.b0 = tape.adjoint(lv.b0);
  for (std::size_t i = 0; i < lv.K.size(); ++i) {
    g.resnet.layers[i].K = tape.adjoint(lv.K[i]);
    g.resnet.layers[i].b = tape.adjoint(lv.bh[i]);
  }
  g.A = tape.adjoint(lv.A);
  g.b = tape.adjoint(lv.b);
  g.c = tape.adjoint(lv.c)(0, 0);
  return g;
}

}  // namespace otflow
