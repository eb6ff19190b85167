#include "otflow/potential.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "otflow/errors.hpp"

namespace otflow {
namespace {

template <typename Derived>
auto sigma_of(const Eigen::MatrixBase<Derived>& x) {
  return x.unaryExpr([](double v) { return activation::sigma(v); });
}
template <typename Derived>
auto dsigma_of(const Eigen::MatrixBase<Derived>& x) {
  return x.unaryExpr([](double v) { return activation::dsigma(v); });
}
template <typename Derived>
auto d2sigma_of(const Eigen::MatrixBase<Derived>& x) {
  return x.unaryExpr([](double v) { return activation::d2sigma(v); });
}

void fill_uniform(Matrix& m, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index j = 0; j < m.cols(); ++j) {
    for (Index i = 0; i < m.rows(); ++i) m(i, j) = dist(rng);
  }
}

void fill_uniform(Vector& v, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index i = 0; i < v.size(); ++i) v(i) = dist(rng);
}

void check_point(const Vector& s, const ModelParams& params) {
  if (s.size() != params.dim() + 1) {
    throw ConfigError(fmt::format("space-time point has length {}, model expects {}", s.size(),
                                  params.dim() + 1));
  }
}

}  // namespace

Index default_rank(Index d) { return std::min<Index>(10, d); }

void validate(const ModelParams& params) {
  const Index m = params.w.size();
  const Index d1 = params.b.size();
  const auto& net = params.resnet;
  if (m < 1 || d1 < 2) throw ConfigError("model needs width >= 1 and dimension >= 1");
  if (net.K0.rows() != m || net.K0.cols() != d1) {
    throw ConfigError(fmt::format("K0 is {}x{}, expected {}x{}", net.K0.rows(), net.K0.cols(), m, d1));
  }
  if (net.b0.size() != m) throw ConfigError("b0 length differs from width");
  if (net.layers.empty()) throw ConfigError("ResNet needs at least one hidden layer");
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& layer = net.layers[i];
    if (layer.K.rows() != m || layer.K.cols() != m || layer.b.size() != m) {
      throw ConfigError(fmt::format("hidden layer {} is not {}x{}", i + 1, m, m));
    }
  }
  if (!(net.h > 0.0)) throw ConfigError("ResNet step size h must be positive");
  if (params.A.cols() != d1) throw ConfigError("A must have d+1 columns");
  if (params.A.rows() < 1 || params.A.rows() > d1) throw ConfigError("rank r must lie in [1, d+1]");
}

ModelParams zero_params(const ModelShape& shape) {
  if (shape.d < 1 || shape.m < 1 || shape.M < 1) {
    throw ConfigError("model shape needs d >= 1, m >= 1, M >= 1");
  }
  const Index d1 = shape.d + 1;
  const Index r = shape.r > 0 ? std::min(shape.r, d1) : default_rank(shape.d);
  ModelParams p;
  p.w = Vector::Zero(shape.m);
  p.resnet.K0 = Matrix::Zero(shape.m, d1);
  p.resnet.b0 = Vector::Zero(shape.m);
  p.resnet.layers.resize(shape.M);
  for (auto& layer : p.resnet.layers) {
    layer.K = Matrix::Zero(shape.m, shape.m);
    layer.b = Vector::Zero(shape.m);
  }
  p.resnet.h = shape.h;
  p.A = Matrix::Zero(r, d1);
  p.b = Vector::Zero(d1);
  p.c = 0.0;
  validate(p);
  return p;
}

ModelParams init_params(const ModelShape& shape, std::mt19937_64& rng) {
  ModelParams p = zero_params(shape);
  const double m = static_cast<double>(shape.m);
  fill_uniform(p.resnet.K0, std::sqrt(6.0 / (static_cast<double>(shape.d + 1) + m)), rng);
  for (auto& layer : p.resnet.layers) fill_uniform(layer.K, std::sqrt(6.0 / (2.0 * m)), rng);
  fill_uniform(p.w, 1e-3, rng);
  fill_uniform(p.A, 1e-3, rng);
  fill_uniform(p.b, 1e-3, rng);
  return p;
}

ModelShape shape_of(const ModelParams& params) {
  ModelShape s;
  s.d = params.dim();
  s.m = params.width();
  s.M = params.depth();
  s.r = params.rank();
  s.h = params.resnet.h;
  return s;
}

Index parameter_count(const ModelParams& p) {
  Index n = p.w.size() + p.resnet.K0.size() + p.resnet.b0.size();
  for (const auto& layer : p.resnet.layers) n += layer.K.size() + layer.b.size();
  return n + p.A.size() + p.b.size() + 1;
}

Vector flatten(const ModelParams& p) {
  Vector flat(parameter_count(p));
  Index pos = 0;
  auto put = [&](const auto& block) {
    flat.segment(pos, block.size()) = block.reshaped();
    pos += block.size();
  };
  put(p.w);
  put(p.resnet.K0);
  put(p.resnet.b0);
  for (const auto& layer : p.resnet.layers) {
    put(layer.K);
    put(layer.b);
  }
  put(p.A);
  put(p.b);
  flat(pos) = p.c;
  return flat;
}

void unflatten(const Vector& flat, ModelParams& p) {
  if (flat.size() != parameter_count(p)) {
    throw ConfigError(fmt::format("flat parameter vector has {} entries, model has {}", flat.size(),
                                  parameter_count(p)));
  }
  Index pos = 0;
  auto take = [&](auto& block) {
    block.reshaped() = flat.segment(pos, block.size());
    pos += block.size();
  };
  take(p.w);
  take(p.resnet.K0);
  take(p.resnet.b0);
  for (auto& layer : p.resnet.layers) {
    take(layer.K);
    take(layer.b);
  }
  take(p.A);
  take(p.b);
  p.c = flat(pos);
}

double potential_forward(const Vector& s, const ModelParams& params) {
  validate(params);
  check_point(s, params);
  const auto& net = params.resnet;
  Vector u = sigma_of(net.K0 * s + net.b0);
  for (const auto& layer : net.layers) {
    u += net.h * sigma_of(layer.K * u + layer.b);
  }
  const Vector As = params.A * s;
  return params.w.dot(u) + 0.5 * As.squaredNorm() + params.b.dot(s) + params.c;
}

PointEvaluation::PointEvaluation(const Vector& s, const ModelParams& params)
    : params_(&params), s_(s) {
  validate(params);
  check_point(s, params);
  const auto& net = params.resnet;
  const int M = net.depth();
  const double h = net.h;

  ws_.pre.resize(M + 1);
  ws_.u.resize(M + 1);
  ws_.z.resize(M + 2);

  ws_.pre[0] = net.K0 * s + net.b0;
  ws_.u[0] = sigma_of(ws_.pre[0]);
  for (int i = 1; i <= M; ++i) {
    const auto& layer = net.layers[i - 1];
    ws_.pre[i] = layer.K * ws_.u[i - 1] + layer.b;
    ws_.u[i] = ws_.u[i - 1] + h * sigma_of(ws_.pre[i]);
  }

  ws_.z[M + 1] = params.w;
  for (int i = M; i >= 1; --i) {
    const auto& layer = net.layers[i - 1];
    const Vector g = dsigma_of(ws_.pre[i]).cwiseProduct(ws_.z[i + 1]);
    ws_.z[i] = ws_.z[i + 1] + h * layer.K.transpose() * g;
  }
  ws_.z[0] = net.K0.transpose() * dsigma_of(ws_.pre[0]).cwiseProduct(ws_.z[1]);

  grad_ = ws_.z[0] + params.A.transpose() * (params.A * s) + params.b;
}

double PointEvaluation::exact_trace() {
  if (have_trace_) return trace_;
  const ModelParams& p = *params_;
  const auto& net = p.resnet;
  const Index d = p.dim();
  const int M = net.depth();
  const double h = net.h;
  const auto K0E = net.K0.leftCols(d);

  // t_0: opening layer, O(m d).
  const Vector col_sq = K0E.cwiseAbs2().rowwise().sum();
  double trace = d2sigma_of(ws_.pre[0]).cwiseProduct(ws_.z[1]).dot(col_sq);

  ws_.J = dsigma_of(ws_.pre[0]).asDiagonal() * K0E;
  Matrix KJ(ws_.J.rows(), ws_.J.cols());
  for (int i = 1; i <= M; ++i) {
    const auto& K = net.layers[i - 1].K;
    KJ.noalias() = K * ws_.J;
    const Vector weight = d2sigma_of(ws_.pre[i]).cwiseProduct(ws_.z[i + 1]);
    trace += h * weight.dot(KJ.cwiseAbs2().rowwise().sum());
    if (i < M) ws_.J += (h * dsigma_of(ws_.pre[i])).asDiagonal() * KJ;
  }

  trace += p.A.leftCols(d).squaredNorm();
  trace_ = trace;
  have_trace_ = true;
  return trace_;
}

Vector PointEvaluation::hessian_vector(const Vector& e) const {
  const ModelParams& p = *params_;
  const auto& net = p.resnet;
  const Index d = p.dim();
  if (e.size() != d) throw ConfigError("probe length differs from model dimension");
  const int M = net.depth();
  const double h = net.h;

  // Forward tangent of the activations along (e, 0).
  std::vector<Vector> dpre(M + 1);
  dpre[0] = net.K0.leftCols(d) * e;
  Vector du = dsigma_of(ws_.pre[0]).cwiseProduct(dpre[0]);
  for (int i = 1; i <= M; ++i) {
    dpre[i] = net.layers[i - 1].K * du;
    du += h * dsigma_of(ws_.pre[i]).cwiseProduct(dpre[i]);
  }

  // Tangent of the backprop recursion.
  Vector dz = Vector::Zero(p.width());
  for (int i = M; i >= 1; --i) {
    const Vector g = d2sigma_of(ws_.pre[i]).cwiseProduct(dpre[i]).cwiseProduct(ws_.z[i + 1]) +
                     dsigma_of(ws_.pre[i]).cwiseProduct(dz);
    dz += h * net.layers[i - 1].K.transpose() * g;
  }
  const Vector g0 = d2sigma_of(ws_.pre[0]).cwiseProduct(dpre[0]).cwiseProduct(ws_.z[1]) +
                    dsigma_of(ws_.pre[0]).cwiseProduct(dz);
  const auto AE = p.A.leftCols(d);
  return net.K0.leftCols(d).transpose() * g0 + AE.transpose() * (AE * e);
}

double PointEvaluation::hessian_quadratic(const Vector& e) const {
  return e.dot(hessian_vector(e));
}

Vector draw_probe(Index d, ProbeDistribution dist, std::mt19937_64& rng) {
  Vector e(d);
  if (dist == ProbeDistribution::rademacher) {
    std::bernoulli_distribution coin(0.5);
    for (Index i = 0; i < d; ++i) e(i) = coin(rng) ? 1.0 : -1.0;
  } else {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Index i = 0; i < d; ++i) e(i) = normal(rng);
  }
  return e;
}

Matrix draw_probes(Index rows, Index d, ProbeDistribution dist, std::mt19937_64& rng) {
  Matrix E(rows, d);
  if (dist == ProbeDistribution::rademacher) {
    std::bernoulli_distribution coin(0.5);
    for (Index j = 0; j < d; ++j) {
      for (Index i = 0; i < rows; ++i) E(i, j) = coin(rng) ? 1.0 : -1.0;
    }
  } else {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Index j = 0; j < d; ++j) {
      for (Index i = 0; i < rows; ++i) E(i, j) = normal(rng);
    }
  }
  return E;
}

double hutchinson_trace(const PointEvaluation& eval, std::span<const Vector> probes) {
  if (probes.empty()) throw std::invalid_argument("hutchinson_trace needs at least one probe");
  double sum = 0.0;
  for (const Vector& e : probes) sum += eval.hessian_quadratic(e);
  return sum / static_cast<double>(probes.size());
}

double hutchinson_trace(const PointEvaluation& eval, int num_probes, ProbeDistribution dist,
                        std::mt19937_64& rng) {
  if (num_probes < 1) throw std::invalid_argument("hutchinson_trace needs at least one probe");
  const Index d = eval.gradient().size() - 1;
  std::vector<Vector> probes;
  probes.reserve(num_probes);
  for (int k = 0; k < num_probes; ++k) probes.push_back(draw_probe(d, dist, rng));
  return hutchinson_trace(eval, probes);
}

BatchEvaluation::BatchEvaluation(const Matrix& S, const ModelParams& params)
    : params_(&params), S_(S) {
  validate(params);
  if (S.cols() != params.dim() + 1) {
    throw ConfigError(fmt::format("batch has {} columns, model expects {}", S.cols(),
                                  params.dim() + 1));
  }
  const auto& net = params.resnet;
  const int M = net.depth();
  const double h = net.h;
  const Index n = S.rows();

  pre_.resize(M + 1);
  u_.resize(M + 1);
  z_.resize(M + 2);

  pre_[0].noalias() = S * net.K0.transpose();
  pre_[0].rowwise() += net.b0.transpose();
  u_[0] = sigma_of(pre_[0]);
  for (int i = 1; i <= M; ++i) {
    const auto& layer = net.layers[i - 1];
    pre_[i].noalias() = u_[i - 1] * layer.K.transpose();
    pre_[i].rowwise() += layer.b.transpose();
    u_[i] = u_[i - 1] + h * sigma_of(pre_[i]);
  }

  z_[M + 1] = params.w.transpose().replicate(n, 1);
  for (int i = M; i >= 1; --i) {
    const Matrix g = dsigma_of(pre_[i]).cwiseProduct(z_[i + 1]);
    z_[i] = z_[i + 1];
    z_[i].noalias() += h * g * net.layers[i - 1].K;
  }
  const Matrix g0 = dsigma_of(pre_[0]).cwiseProduct(z_[1]);
  grad_.noalias() = g0 * net.K0;
  grad_.noalias() += (S * params.A.transpose()) * params.A;
  grad_.rowwise() += params.b.transpose();
}

Vector BatchEvaluation::exact_trace() const {
  const ModelParams& p = *params_;
  const auto& net = p.resnet;
  const Index d = p.dim();
  const int M = net.depth();
  const double h = net.h;
  const auto K0E = net.K0.leftCols(d);

  const Vector col_sq = K0E.cwiseAbs2().rowwise().sum();
  Vector trace = d2sigma_of(pre_[0]).cwiseProduct(z_[1]) * col_sq;

  std::vector<Matrix> weight(M + 1), slope(M + 1);
  for (int i = 1; i <= M; ++i) {
    weight[i] = d2sigma_of(pre_[i]).cwiseProduct(z_[i + 1]);
    slope[i] = h * dsigma_of(pre_[i]);
  }
  if (d > p.width()) {
    trace += hidden_trace_by_gram(weight, slope);
  } else {
    trace += hidden_trace_by_columns(weight, slope);
  }
  trace.array() += p.A.leftCols(d).squaredNorm();
  return trace;
}

// One spatial column of the Jacobian at a time: J_k is n x m with row j holding
// the k-th column of the per-sample m x d Jacobian. Cost O(n m^2 d) per layer.
Vector BatchEvaluation::hidden_trace_by_columns(const std::vector<Matrix>& weight,
                                                const std::vector<Matrix>& slope) const {
  const auto& net = params_->resnet;
  const Index d = params_->dim();
  const Index n = S_.rows();
  const Index m = params_->width();
  const int M = net.depth();
  const double h = net.h;
  const auto K0E = net.K0.leftCols(d);
  const Matrix D0 = dsigma_of(pre_[0]);

  Vector trace = Vector::Zero(n);
  Matrix Jk(n, m), KJ(n, m);
  for (Index k = 0; k < d; ++k) {
    Jk = D0.array().rowwise() * K0E.col(k).transpose().array();
    for (int i = 1; i <= M; ++i) {
      KJ.noalias() = Jk * net.layers[i - 1].K.transpose();
      trace.noalias() += h * (weight[i].cwiseProduct(KJ.cwiseAbs2())).rowwise().sum();
      if (i < M) Jk += slope[i].cwiseProduct(KJ);
    }
  }
  return trace;
}

// Same sums through the per-sample Gram matrix G = J J' (m x m), which only
// depends on d through the shared product K0E K0E'. Cost O(n m^3) per layer.
Vector BatchEvaluation::hidden_trace_by_gram(const std::vector<Matrix>& weight,
                                             const std::vector<Matrix>& slope) const {
  const auto& net = params_->resnet;
  const Index d = params_->dim();
  const Index n = S_.rows();
  const Index m = params_->width();
  const int M = net.depth();
  const double h = net.h;
  const auto K0E = net.K0.leftCols(d);
  const Matrix D0 = dsigma_of(pre_[0]);

  Matrix G0(m, m);
  G0.noalias() = K0E * K0E.transpose();
  Vector trace(n);
  Matrix G(m, m), P(m, m), Q(m, m);
  for (Index r = 0; r < n; ++r) {
    const auto s0 = D0.row(r).transpose();
    G = s0.asDiagonal() * G0 * s0.asDiagonal();
    double acc = 0.0;
    for (int i = 1; i <= M; ++i) {
      const Matrix& K = net.layers[i - 1].K;
      P.noalias() = K * G;
      acc += h * weight[i].row(r).dot(P.cwiseProduct(K).rowwise().sum());
      if (i < M) {
        const auto sl = slope[i].row(r).transpose();
        Q.noalias() = P * K.transpose();
        const Matrix SP = sl.asDiagonal() * P;
        G += SP + SP.transpose();
        G.noalias() += sl.asDiagonal() * Q * sl.asDiagonal();
      }
    }
    trace(r) = acc;
  }
  return trace;
}

Vector BatchEvaluation::hessian_quadratic(const Matrix& E) const {
  const ModelParams& p = *params_;
  const auto& net = p.resnet;
  const Index d = p.dim();
  if (E.rows() != S_.rows() || E.cols() != d) {
    throw ConfigError("probe matrix must be n x d");
  }
  const int M = net.depth();
  const double h = net.h;
  const auto K0E = net.K0.leftCols(d);

  std::vector<Matrix> dpre(M + 1);
  dpre[0].noalias() = E * K0E.transpose();
  Matrix du = dsigma_of(pre_[0]).cwiseProduct(dpre[0]);
  for (int i = 1; i <= M; ++i) {
    dpre[i].noalias() = du * net.layers[i - 1].K.transpose();
    du += h * dsigma_of(pre_[i]).cwiseProduct(dpre[i]);
  }

  Matrix dz = Matrix::Zero(S_.rows(), p.width());
  for (int i = M; i >= 1; --i) {
    const Matrix g = d2sigma_of(pre_[i]).cwiseProduct(dpre[i]).cwiseProduct(z_[i + 1]) +
                     dsigma_of(pre_[i]).cwiseProduct(dz);
    dz.noalias() += h * g * net.layers[i - 1].K;
  }
  const Matrix g0 = d2sigma_of(pre_[0]).cwiseProduct(dpre[0]).cwiseProduct(z_[1]) +
                    dsigma_of(pre_[0]).cwiseProduct(dz);
  const Matrix hv = g0 * K0E;
  const Matrix AEe = E * p.A.leftCols(d).transpose();
  return E.cwiseProduct(hv).rowwise().sum() + AEe.cwiseAbs2().rowwise().sum();
}

Vector potential_batch(const Matrix& S, const ModelParams& params) {
  validate(params);
  if (S.cols() != params.dim() + 1) throw ConfigError("batch column count differs from d+1");
  const auto& net = params.resnet;
  Matrix u = S * net.K0.transpose();
  u.rowwise() += net.b0.transpose();
  u = sigma_of(u);
  for (const auto& layer : net.layers) {
    Matrix pre = u * layer.K.transpose();
    pre.rowwise() += layer.b.transpose();
    u += net.h * sigma_of(pre);
  }
  const Matrix As = S * params.A.transpose();
  Vector phi = u * params.w + 0.5 * As.cwiseAbs2().rowwise().sum() + S * params.b;
  phi.array() += params.c;
  return phi;
}

}  // namespace otflow
