#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace otflow::ad {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

// Handle to a node on a Tape. Only meaningful together with the tape that issued it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

enum class Op : std::uint8_t {
  leaf,
  matmul,
  add,
  sub,
  hadamard,
  scale,
  row_broadcast,
  sigma,
  dsigma,
  d2sigma,
  square,
  abs,
  sum,
  row_sum,
  col_slice,
  hcat,
};

// Append-only record of matrix-valued primitives. Values are computed eagerly
// when a primitive is recorded; backward() then walks the record in reverse.
class Tape {
 public:
  // Leaf whose adjoint is accumulated.
  Var variable(Matrix value);
  // Leaf that is not differentiated.
  Var constant(Matrix value);

  // op(a) * op(b) where op transposes when the matching flag is set.
  Var matmul(Var a, Var b, bool transpose_a = false, bool transpose_b = false);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var hadamard(Var a, Var b);
  Var scale(Var a, double factor);
  // Repeats a vector (1 x c or c x 1) as the rows of an n x c matrix.
  Var row_broadcast(Var v, Index rows);
  Var sigma(Var a);    // log(e^x + e^-x)
  Var dsigma(Var a);   // tanh(x)
  Var d2sigma(Var a);  // 1 - tanh(x)^2
  Var square(Var a);
  // |x| with subgradient 0 at x == 0.
  Var abs(Var a);
  Var sum(Var a);      // 1 x 1
  Var row_sum(Var a);  // n x 1
  Var col_slice(Var a, Index start, Index count);
  Var hcat(Var a, Var b);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  double scalar(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Seeds the 1 x 1 root with 1 and accumulates adjoints of every node that
  // depends on a variable. Throws std::invalid_argument for a non-scalar root.
  void backward(Var root);
  // Adjoint of v after backward(); zero matrix of v's shape when v received none.
  Matrix adjoint(Var v) const;

  // Recomputes every non-leaf value in append order from the stored leaves and
  // returns the recomputed value of `root`. Recorded values are left untouched.
  Matrix replay(Var root) const;

  std::size_t size() const { return nodes_.size(); }
  void clear();

 private:
  struct Node {
    Op op = Op::leaf;
    int a = -1;
    int b = -1;
    double factor = 0.0;
    Index i0 = 0;
    Index i1 = 0;
    bool flag_a = false;
    bool flag_b = false;
    bool requires_grad = false;
    Matrix value;
  };

  Var push(Node node);
  Var record(Op op, Var a, Var b = Var{}, double factor = 0.0, Index i0 = 0, Index i1 = 0,
             bool ta = false, bool tb = false);
  Matrix evaluate(const Node& node, const Matrix& a, const Matrix* b) const;
  void propagate(int id, const Matrix& g);
  void accumulate(int id, const Matrix& g);
  template <typename Expr>
  void accumulate_expr(int id, const Expr& g);

  std::vector<Node> nodes_;
  std::vector<Matrix> adjoints_;
  std::vector<bool> has_adjoint_;
};

}  // namespace otflow::ad
