#include "otflow/tape.hpp"

#include <stdexcept>
#include <utility>

#include <fmt/format.h>

#include "otflow/potential.hpp"

namespace otflow::ad {
namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(fmt::format("{}: shape mismatch {}x{} vs {}x{}", op, a.rows(),
                                            a.cols(), b.rows(), b.cols()));
  }
}

Matrix matmul_value(const Matrix& a, const Matrix& b, bool ta, bool tb) {
  if (!ta && !tb) return a * b;
  if (ta && !tb) return a.transpose() * b;
  if (!ta && tb) return a * b.transpose();
  return a.transpose() * b.transpose();
}

}  // namespace

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::variable(Matrix value) {
  Node n;
  n.op = Op::leaf;
  n.requires_grad = true;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::constant(Matrix value) {
  Node n;
  n.op = Op::leaf;
  n.value = std::move(value);
  return push(std::move(n));
}

Matrix Tape::evaluate(const Node& n, const Matrix& a, const Matrix* b) const {
  switch (n.op) {
    case Op::matmul:
      return matmul_value(a, *b, n.flag_a, n.flag_b);
    case Op::add:
      return a + *b;
    case Op::sub:
      return a - *b;
    case Op::hadamard:
      return a.cwiseProduct(*b);
    case Op::scale:
      return n.factor * a;
    case Op::row_broadcast:
      return a.reshaped(1, a.size()).replicate(n.i0, 1);
    case Op::sigma:
      return a.unaryExpr([](double x) { return activation::sigma(x); });
    case Op::dsigma:
      return a.unaryExpr([](double x) { return activation::dsigma(x); });
    case Op::d2sigma:
      return a.unaryExpr([](double x) { return activation::d2sigma(x); });
    case Op::square:
      return a.cwiseAbs2();
    case Op::abs:
      return a.cwiseAbs();
    case Op::sum:
      return Matrix::Constant(1, 1, a.sum());
    case Op::row_sum:
      return a.rowwise().sum();
    case Op::col_slice:
      return a.middleCols(n.i0, n.i1);
    case Op::hcat: {
      Matrix out(a.rows(), a.cols() + b->cols());
      out << a, *b;
      return out;
    }
    case Op::leaf:
      break;
  }
  throw std::logic_error("leaf nodes are not evaluated");
}

Var Tape::record(Op op, Var a, Var b, double factor, Index i0, Index i1, bool ta, bool tb) {
  if (!a.valid() || a.id >= static_cast<int>(nodes_.size()) ||
      (b.valid() && b.id >= static_cast<int>(nodes_.size()))) {
    throw std::invalid_argument("operand does not belong to this tape");
  }
  Node n;
  n.op = op;
  n.a = a.id;
  n.b = b.id;
  n.factor = factor;
  n.i0 = i0;
  n.i1 = i1;
  n.flag_a = ta;
  n.flag_b = tb;
  n.requires_grad = nodes_[a.id].requires_grad || (b.valid() && nodes_[b.id].requires_grad);
  n.value = evaluate(n, nodes_[a.id].value, b.valid() ? &nodes_[b.id].value : nullptr);
  return push(std::move(n));
}

Var Tape::matmul(Var a, Var b, bool transpose_a, bool transpose_b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  const Index inner_a = transpose_a ? A.rows() : A.cols();
  const Index inner_b = transpose_b ? B.cols() : B.rows();
  if (inner_a != inner_b) {
    throw std::invalid_argument(
        fmt::format("matmul: inner dimensions {} and {} differ", inner_a, inner_b));
  }
  return record(Op::matmul, a, b, 0.0, 0, 0, transpose_a, transpose_b);
}

Var Tape::add(Var a, Var b) {
  require_same_shape(value(a), value(b), "add");
  return record(Op::add, a, b);
}

Var Tape::sub(Var a, Var b) {
  require_same_shape(value(a), value(b), "sub");
  return record(Op::sub, a, b);
}

Var Tape::hadamard(Var a, Var b) {
  require_same_shape(value(a), value(b), "hadamard");
  return record(Op::hadamard, a, b);
}

Var Tape::scale(Var a, double factor) { return record(Op::scale, a, Var{}, factor); }

Var Tape::row_broadcast(Var v, Index rows) {
  const Matrix& V = value(v);
  if (V.rows() != 1 && V.cols() != 1) throw std::invalid_argument("row_broadcast expects a vector");
  return record(Op::row_broadcast, v, Var{}, 0.0, rows);
}

Var Tape::sigma(Var a) { return record(Op::sigma, a); }
Var Tape::dsigma(Var a) { return record(Op::dsigma, a); }
Var Tape::d2sigma(Var a) { return record(Op::d2sigma, a); }
Var Tape::square(Var a) { return record(Op::square, a); }
Var Tape::abs(Var a) { return record(Op::abs, a); }
Var Tape::sum(Var a) { return record(Op::sum, a); }
Var Tape::row_sum(Var a) { return record(Op::row_sum, a); }

Var Tape::col_slice(Var a, Index start, Index count) {
  const Matrix& A = value(a);
  if (start < 0 || count < 1 || start + count > A.cols()) {
    throw std::invalid_argument(
        fmt::format("col_slice [{}, {}) outside {} columns", start, start + count, A.cols()));
  }
  return record(Op::col_slice, a, Var{}, 0.0, start, count);
}

Var Tape::hcat(Var a, Var b) {
  if (value(a).rows() != value(b).rows()) throw std::invalid_argument("hcat: row counts differ");
  return record(Op::hcat, a, b);
}

double Tape::scalar(Var v) const {
  const Matrix& m = value(v);
  if (m.size() != 1) throw std::invalid_argument("node is not a scalar");
  return m(0, 0);
}

template <typename Expr>
void Tape::accumulate_expr(int id, const Expr& g) {
  if (!nodes_[id].requires_grad) return;
  if (!has_adjoint_[id]) {
    adjoints_[id] = g;
    has_adjoint_[id] = true;
  } else {
    adjoints_[id] += g;
  }
}

void Tape::accumulate(int id, const Matrix& g) { accumulate_expr(id, g); }

void Tape::propagate(int id, const Matrix& g) {
  const Node& n = nodes_[id];
  switch (n.op) {
    case Op::leaf:
      return;
    case Op::matmul: {
      const Matrix& A = nodes_[n.a].value;
      const Matrix& B = nodes_[n.b].value;
      if (nodes_[n.a].requires_grad) {
        if (!n.flag_a && !n.flag_b) accumulate_expr(n.a, g * B.transpose());
        else if (n.flag_a && !n.flag_b) accumulate_expr(n.a, B * g.transpose());
        else if (!n.flag_a && n.flag_b) accumulate_expr(n.a, g * B);
        else accumulate_expr(n.a, B.transpose() * g.transpose());
      }
      if (nodes_[n.b].requires_grad) {
        if (!n.flag_a && !n.flag_b) accumulate_expr(n.b, A.transpose() * g);
        else if (n.flag_a && !n.flag_b) accumulate_expr(n.b, A * g);
        else if (!n.flag_a && n.flag_b) accumulate_expr(n.b, g.transpose() * A);
        else accumulate_expr(n.b, g.transpose() * A.transpose());
      }
      return;
    }
    case Op::add:
      accumulate(n.a, g);
      accumulate(n.b, g);
      return;
    case Op::sub:
      accumulate(n.a, g);
      accumulate_expr(n.b, -g);
      return;
    case Op::hadamard:
      accumulate_expr(n.a, g.cwiseProduct(nodes_[n.b].value));
      accumulate_expr(n.b, g.cwiseProduct(nodes_[n.a].value));
      return;
    case Op::scale:
      accumulate_expr(n.a, n.factor * g);
      return;
    case Op::row_broadcast: {
      const Matrix& V = nodes_[n.a].value;
      const Matrix colsum = g.colwise().sum();
      accumulate_expr(n.a, colsum.reshaped(V.rows(), V.cols()));
      return;
    }
    case Op::sigma:
      accumulate_expr(n.a, g.cwiseProduct(nodes_[n.a].value.unaryExpr(
                               [](double x) { return activation::dsigma(x); })));
      return;
    case Op::dsigma:
      accumulate_expr(n.a, g.cwiseProduct(nodes_[n.a].value.unaryExpr(
                               [](double x) { return activation::d2sigma(x); })));
      return;
    case Op::d2sigma:
      accumulate_expr(n.a, g.cwiseProduct(nodes_[n.a].value.unaryExpr(
                               [](double x) { return activation::d3sigma(x); })));
      return;
    case Op::square:
      accumulate_expr(n.a, 2.0 * g.cwiseProduct(nodes_[n.a].value));
      return;
    case Op::abs:
      accumulate_expr(n.a, g.cwiseProduct(nodes_[n.a].value.unaryExpr([](double x) {
        return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
      })));
      return;
    case Op::sum: {
      const Matrix& A = nodes_[n.a].value;
      accumulate_expr(n.a, Matrix::Constant(A.rows(), A.cols(), g(0, 0)));
      return;
    }
    case Op::row_sum:
      accumulate_expr(n.a, g.replicate(1, nodes_[n.a].value.cols()));
      return;
    case Op::col_slice: {
      if (!nodes_[n.a].requires_grad) return;
      const Matrix& A = nodes_[n.a].value;
      if (!has_adjoint_[n.a]) {
        adjoints_[n.a] = Matrix::Zero(A.rows(), A.cols());
        has_adjoint_[n.a] = true;
      }
      adjoints_[n.a].middleCols(n.i0, n.i1) += g;
      return;
    }
    case Op::hcat: {
      const Index ca = nodes_[n.a].value.cols();
      accumulate_expr(n.a, g.leftCols(ca));
      accumulate_expr(n.b, g.rightCols(g.cols() - ca));
      return;
    }
  }
}

void Tape::backward(Var root) {
  if (!root.valid() || root.id >= static_cast<int>(nodes_.size())) {
    throw std::invalid_argument("backward: root does not belong to this tape");
  }
  if (nodes_[root.id].value.size() != 1) {
    throw std::invalid_argument("backward: root must be a 1x1 scalar");
  }
  adjoints_.assign(nodes_.size(), Matrix());
  has_adjoint_.assign(nodes_.size(), false);
  if (!nodes_[root.id].requires_grad) return;
  adjoints_[root.id] = Matrix::Ones(1, 1);
  has_adjoint_[root.id] = true;
  for (int id = root.id; id >= 0; --id) {
    if (!has_adjoint_[id]) continue;
    propagate(id, adjoints_[id]);
    // Intermediate adjoints are not needed once propagated.
    if (nodes_[id].op != Op::leaf) {
      adjoints_[id] = Matrix();
      has_adjoint_[id] = false;
    }
  }
}

Matrix Tape::adjoint(Var v) const {
  const Matrix& val = nodes_.at(v.id).value;
  if (static_cast<std::size_t>(v.id) < has_adjoint_.size() && has_adjoint_[v.id]) {
    return adjoints_[v.id];
  }
  return Matrix::Zero(val.rows(), val.cols());
}

Matrix Tape::replay(Var root) const {
  std::vector<Matrix> recomputed(root.id + 1);
  std::vector<const Matrix*> vals(root.id + 1, nullptr);
  for (int id = 0; id <= root.id; ++id) {
    const Node& n = nodes_[id];
    if (n.op == Op::leaf) {
      vals[id] = &n.value;
    } else {
      recomputed[id] = evaluate(n, *vals[n.a], n.b >= 0 ? vals[n.b] : nullptr);
      vals[id] = &recomputed[id];
    }
  }
  return *vals[root.id];
}

void Tape::clear() {
  nodes_.clear();
  adjoints_.clear();
  has_adjoint_.clear();
}

}  // namespace otflow::ad
