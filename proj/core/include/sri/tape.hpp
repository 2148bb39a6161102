#pragma once

#include <complex>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "sri/tensor.hpp"

namespace sri::ad {

enum class Op : std::uint8_t {
  Leaf,
  Const,
  Add,
  Sub,
  Neg,
  Mul,
  Scale,
  SMul,
  SBcast,
  Recip,
  Tanh,
  Sigmoid,
  Softplus,
  Exp,
  Log,
  Sqrt,
  Sum,
  MatVec,
  TMatVec,
  Outer,
  MatMul,
  Transpose,
  Reshape,
  Slice,
  Embed,
  Concat,
  Conv2d,
  Conv2dT,
  ConvWGrad,
  ChBias,
  ChSum,
  ChBcast,
  LogAbsDet,
  MatInvT,
};

const char* op_name(Op op);

class Tape;

// Handle to a node on a tape. Cheap to copy; invalid after rollback past id.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  const Shape& shape() const;
};

struct Node {
  Op op = Op::Const;
  std::vector<int> in;
  double c = 0.0;     // Scale factor
  int i0 = 0, i1 = 0; // Slice/Embed offset, ChBcast spatial dims
  Tensor val;
  Tensor tan;
  bool grad = false;    // depends on some leaf
  bool has_tan = false; // tangent currently set
};

// Records primitive operations eagerly (values computed on creation) in
// topological order. The reverse sweep emits its adjoint arithmetic as new
// nodes on the same tape, so gradients are themselves differentiable and a
// single forward tangent sweep yields derivatives of anything built on top,
// including gradients and Jacobian entries.
class Tape {
 public:
  Var leaf(Tensor v);
  Var constant(Tensor v);
  Var constant_scalar(double v);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var neg(Var a);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var smul(Var s, Var x);  // scalar node times tensor
  Var sbcast(Var s, Shape target);
  Var recip(Var a);
  Var tanh(Var a);
  Var sigmoid(Var a);
  Var softplus(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var sqrt(Var a);
  Var sum(Var a);
  Var matvec(Var w, Var x);   // [m,n] x [n] -> [m]
  Var tmatvec(Var w, Var x);  // [m,n] x [m] -> [n], i.e. w^T x
  Var outer(Var u, Var v);    // [m] x [n] -> [m,n]
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var reshape(Var a, Shape s);
  Var slice(Var a, int offset, int len);       // flat slice
  Var embed(Var a, int offset, int total);     // flat zero-pad, adjoint of slice
  Var concat(std::span<const Var> parts);      // flat concat
  Var conv2d(Var x, Var w);    // [Ci,H,W] * [Co,Ci,3,3] -> [Co,H,W], pad 1
  Var conv2d_t(Var y, Var w);  // adjoint map of conv2d in its first argument
  Var conv_wgrad(Var x, Var y);
  Var ch_bias(Var x, Var b);
  Var ch_sum(Var x);
  Var ch_bcast(Var v, int h, int w);
  Var log_abs_det(Var a);  // value via eigenvalues, derivative via LU
  Var mat_inv_t(Var a);

  // Composites built from primitives.
  Var square(Var a) { return mul(a, a); }
  Var dot(Var a, Var b) { return sum(mul(a, b)); }
  Var gelu(Var a);  // tanh formulation

  // Reverse sweep from `output`. Emits adjoint nodes and returns the cotangent
  // node for each entry of `wrt` that is reachable; absent key means zero.
  // Without a seed the output must hold exactly one element.
  std::unordered_map<int, Var> backward(Var output, std::span<const Var> wrt,
                                        std::optional<Var> seed = std::nullopt);
  // Value-only variant: extracts gradients then rolls the tape back.
  std::unordered_map<int, Tensor> backward_values(Var output, std::span<const Var> wrt,
                                                  const Tensor* seed = nullptr);

  // Forward (tangent) mode over already-recorded nodes.
  void set_tangent(Var v, Tensor t);
  void forward_tangents(int from = 0);
  const Tensor* tangent(Var v) const;
  void clear_tangents();

  int mark() const { return static_cast<int>(nodes_.size()); }
  void rollback(int mark);
  int size() const { return static_cast<int>(nodes_.size()); }
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

  bool finite_checks = true;

 private:
  friend struct Var;
  Var push(Node nd);
  Tensor eval(const Node& nd) const;
  Tensor jvp(const Node& nd, int id) const;
  void emit_adjoints(int id, const Node& snapshot, std::vector<int>& cot);
  void accumulate(std::vector<int>& cot, int target, Var contrib);

  std::vector<Node> nodes_;
};

// Jacobian of a vector-valued node with respect to a vector-valued node,
// assembled one row at a time from VJPs with unit cotangents.
Tensor jacobian_values(Tape& t, Var out, Var in);  // [n_out, n_in]; rolls back
Var jacobian_graph(Tape& t, Var out, Var in);      // leaves rows on the tape

// Jacobian of a user-supplied map at a point, both dims equal d.
Tensor jacobian(const std::function<Var(Tape&, Var)>& map, const Tensor& x);

// Sum of log |lambda_i| over the eigenvalues of a square matrix; throws
// SingularMatrixError when any |lambda_i| falls below 1e-12.
double log_abs_det_value(const Tensor& square);
std::vector<std::complex<double>> eigenvalues_of(const Tensor& square);
double min_abs_eigenvalue(const Tensor& square);

struct GradCheckRow {
  int index;
  double analytic;
  double numeric;
  double rel_err;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::vector<GradCheckRow> rows;
  bool pass(double tol) const { return max_rel_err < tol; }
};

// Compares backward() output against central finite differences of f.
GradCheckReport grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double h);
// Same comparison for an externally supplied gradient (negative-control use).
GradCheckReport grad_check_explicit(const std::function<double(const Tensor&)>& f,
                                    const Tensor& analytic_grad, const Tensor& x, double h);

}  // namespace sri::ad
