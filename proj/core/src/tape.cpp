#include "sri/tape.hpp"

#include <cmath>
#include <cstring>

#include "linalg.hpp"
#include "sri/error.hpp"

namespace sri::ad {

namespace {

constexpr double kSingularEigThreshold = 1e-12;

void check_same(const Tensor& a, const Tensor& b, const char* who) {
  if (!same_shape(a, b))
    throw ShapeError(std::string(who) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
}

void check_rank(const Tensor& a, std::size_t rank, const char* who) {
  if (a.shape.size() != rank)
    throw ShapeError(std::string(who) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape));
}

double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

double stable_sigmoid(double x) {
  if (x >= 0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

// Local dense helpers for value-level derivative rules.
Tensor mat_mul_vals(const Tensor& a, const Tensor& b) {
  int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out({m, n});
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      double av = a[static_cast<std::int64_t>(i) * k + p];
      if (av == 0.0) continue;
      for (int j = 0; j < n; ++j)
        out[static_cast<std::int64_t>(i) * n + j] += av * b[static_cast<std::int64_t>(p) * n + j];
    }
  return out;
}

Tensor transpose_vals(const Tensor& a) {
  int m = a.shape[0], n = a.shape[1];
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<std::int64_t>(j) * m + i] = a[static_cast<std::int64_t>(i) * n + j];
  return out;
}

struct ConvDims {
  int ci, h, w, co;
};

ConvDims conv_dims(const Tensor& x, const Tensor& kernel, bool x_is_output_side) {
  check_rank(kernel, 4, "conv kernel");
  if (kernel.shape[2] != 3 || kernel.shape[3] != 3)
    throw ShapeError("conv kernel must be 3x3, got " + shape_str(kernel.shape));
  check_rank(x, 3, "conv input");
  ConvDims d{};
  d.co = kernel.shape[0];
  d.ci = kernel.shape[1];
  d.h = x.shape[1];
  d.w = x.shape[2];
  int expect = x_is_output_side ? d.co : d.ci;
  if (x.shape[0] != expect)
    throw ShapeError("conv channel mismatch: input " + shape_str(x.shape) + " vs kernel " +
                     shape_str(kernel.shape));
  return d;
}

// y[o,h,w] = sum_{i,p,q} k[o,i,p,q] x[i,h+p-1,w+q-1]
Tensor conv2d_vals(const Tensor& x, const Tensor& k) {
  ConvDims d = conv_dims(x, k, false);
  Tensor y({d.co, d.h, d.w});
  for (int o = 0; o < d.co; ++o)
    for (int i = 0; i < d.ci; ++i) {
      const double* kp = &k.data[(static_cast<std::size_t>(o) * d.ci + i) * 9];
      for (int p = 0; p < 3; ++p)
        for (int q = 0; q < 3; ++q) {
          double kv = kp[p * 3 + q];
          if (kv == 0.0) continue;
          int h0 = std::max(0, 1 - p), h1 = std::min(d.h, d.h + 1 - p);
          int w0 = std::max(0, 1 - q), w1 = std::min(d.w, d.w + 1 - q);
          for (int h = h0; h < h1; ++h) {
            const double* xr = &x.data[(static_cast<std::size_t>(i) * d.h + h + p - 1) * d.w];
            double* yr = &y.data[(static_cast<std::size_t>(o) * d.h + h) * d.w];
            for (int w = w0; w < w1; ++w) yr[w] += kv * xr[w + q - 1];
          }
        }
    }
  return y;
}

// Adjoint of conv2d in its input: xbar[i,h,w] = sum_{o,p,q} k[o,i,p,q] y[o,h-p+1,w-q+1]
Tensor conv2d_t_vals(const Tensor& y, const Tensor& k) {
  ConvDims d = conv_dims(y, k, true);
  Tensor x({d.ci, d.h, d.w});
  for (int o = 0; o < d.co; ++o)
    for (int i = 0; i < d.ci; ++i) {
      const double* kp = &k.data[(static_cast<std::size_t>(o) * d.ci + i) * 9];
      for (int p = 0; p < 3; ++p)
        for (int q = 0; q < 3; ++q) {
          double kv = kp[p * 3 + q];
          if (kv == 0.0) continue;
          int h0 = std::max(0, p - 1), h1 = std::min(d.h, d.h + p - 1);
          int w0 = std::max(0, q - 1), w1 = std::min(d.w, d.w + q - 1);
          for (int h = h0; h < h1; ++h) {
            const double* yr = &y.data[(static_cast<std::size_t>(o) * d.h + h - p + 1) * d.w];
            double* xr = &x.data[(static_cast<std::size_t>(i) * d.h + h) * d.w];
            for (int w = w0; w < w1; ++w) xr[w] += kv * yr[w - q + 1];
          }
        }
    }
  return x;
}

// kbar[o,i,p,q] = sum_{h,w} x[i,h+p-1,w+q-1] y[o,h,w]
Tensor conv_wgrad_vals(const Tensor& x, const Tensor& y) {
  check_rank(x, 3, "conv_wgrad x");
  check_rank(y, 3, "conv_wgrad y");
  if (x.shape[1] != y.shape[1] || x.shape[2] != y.shape[2])
    throw ShapeError("conv_wgrad spatial mismatch");
  int ci = x.shape[0], h = x.shape[1], w = x.shape[2], co = y.shape[0];
  Tensor k({co, ci, 3, 3});
  for (int o = 0; o < co; ++o)
    for (int i = 0; i < ci; ++i)
      for (int p = 0; p < 3; ++p)
        for (int q = 0; q < 3; ++q) {
          double s = 0;
          int h0 = std::max(0, 1 - p), h1 = std::min(h, h + 1 - p);
          int w0 = std::max(0, 1 - q), w1 = std::min(w, w + 1 - q);
          for (int hh = h0; hh < h1; ++hh) {
            const double* xr = &x.data[(static_cast<std::size_t>(i) * h + hh + p - 1) * w];
            const double* yr = &y.data[(static_cast<std::size_t>(o) * h + hh) * w];
            for (int ww = w0; ww < w1; ++ww) s += xr[ww + q - 1] * yr[ww];
          }
          k[((static_cast<std::int64_t>(o) * ci + i) * 3 + p) * 3 + q] = s;
        }
  return k;
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Const: return "const";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Neg: return "neg";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::SMul: return "smul";
    case Op::SBcast: return "sbcast";
    case Op::Recip: return "recip";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Softplus: return "softplus";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sqrt: return "sqrt";
    case Op::Sum: return "sum";
    case Op::MatVec: return "matvec";
    case Op::TMatVec: return "tmatvec";
    case Op::Outer: return "outer";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Reshape: return "reshape";
    case Op::Slice: return "slice";
    case Op::Embed: return "embed";
    case Op::Concat: return "concat";
    case Op::Conv2d: return "conv2d";
    case Op::Conv2dT: return "conv2d_t";
    case Op::ConvWGrad: return "conv_wgrad";
    case Op::ChBias: return "ch_bias";
    case Op::ChSum: return "ch_sum";
    case Op::ChBcast: return "ch_bcast";
    case Op::LogAbsDet: return "log_abs_det";
    case Op::MatInvT: return "mat_inv_t";
  }
  return "?";
}

const Tensor& Var::value() const { return tape->node(id).val; }
const Shape& Var::shape() const { return tape->node(id).val.shape; }

Var Tape::push(Node nd) {
  int id = static_cast<int>(nodes_.size());
  if (nd.op != Op::Leaf && nd.op != Op::Const) {
    nd.grad = false;
    for (int i : nd.in) nd.grad = nd.grad || nodes_[static_cast<std::size_t>(i)].grad;
  }
  if (finite_checks && !nd.val.finite())
    throw NonFiniteError(std::string("non-finite value from op '") + op_name(nd.op) +
                             "' at node #" + std::to_string(id),
                         id);
  nodes_.push_back(std::move(nd));
  return Var{this, id};
}

Var Tape::leaf(Tensor v) {
  Node nd;
  nd.op = Op::Leaf;
  nd.val = std::move(v);
  nd.grad = true;
  return push(std::move(nd));
}

Var Tape::constant(Tensor v) {
  Node nd;
  nd.op = Op::Const;
  nd.val = std::move(v);
  return push(std::move(nd));
}

Var Tape::constant_scalar(double v) { return constant(Tensor::scalar(v)); }

namespace {
Node make(Op op, std::initializer_list<int> in) {
  Node nd;
  nd.op = op;
  nd.in.assign(in);
  return nd;
}
}  // namespace

Var Tape::add(Var a, Var b) {
  check_same(a.value(), b.value(), "add");
  Node nd = make(Op::Add, {a.id, b.id});
  nd.val = a.value();
  const Tensor& bv = b.value();
  for (std::int64_t i = 0; i < nd.val.size(); ++i) nd.val[i] += bv[i];
  return push(std::move(nd));
}

Var Tape::sub(Var a, Var b) {
  check_same(a.value(), b.value(), "sub");
  Node nd = make(Op::Sub, {a.id, b.id});
  nd.val = a.value();
  const Tensor& bv = b.value();
  for (std::int64_t i = 0; i < nd.val.size(); ++i) nd.val[i] -= bv[i];
  return push(std::move(nd));
}

Var Tape::neg(Var a) {
  Node nd = make(Op::Neg, {a.id});
  nd.val = a.value();
  for (auto& v : nd.val.data) v = -v;
  return push(std::move(nd));
}

Var Tape::mul(Var a, Var b) {
  check_same(a.value(), b.value(), "mul");
  Node nd = make(Op::Mul, {a.id, b.id});
  nd.val = a.value();
  const Tensor& bv = b.value();
  for (std::int64_t i = 0; i < nd.val.size(); ++i) nd.val[i] *= bv[i];
  return push(std::move(nd));
}

Var Tape::scale(Var a, double c) {
  Node nd = make(Op::Scale, {a.id});
  nd.c = c;
  nd.val = a.value();
  for (auto& v : nd.val.data) v *= c;
  return push(std::move(nd));
}

Var Tape::smul(Var s, Var x) {
  if (s.value().size() != 1) throw ShapeError("smul: scalar operand has more than one element");
  Node nd = make(Op::SMul, {s.id, x.id});
  double sv = s.value().data[0];
  nd.val = x.value();
  for (auto& v : nd.val.data) v *= sv;
  return push(std::move(nd));
}

Var Tape::sbcast(Var s, Shape target) {
  if (s.value().size() != 1) throw ShapeError("sbcast: scalar operand has more than one element");
  Node nd = make(Op::SBcast, {s.id});
  nd.val = Tensor::full(std::move(target), s.value().data[0]);
  return push(std::move(nd));
}

Var Tape::recip(Var a) {
  Node nd = make(Op::Recip, {a.id});
  nd.val = a.value();
  for (auto& v : nd.val.data) v = 1.0 / v;
  return push(std::move(nd));
}

Var Tape::tanh(Var a) {
  Node nd = make(Op::Tanh, {a.id});
  nd.val = a.value();
  for (auto& v : nd.val.data) v = std::tanh(v);
  return push(std::move(nd));
}

Var Tape::sigmoid(Var a) {
  Node nd = make(Op::Sigmoid, {a.id});
  nd.val = a.value();
  for (auto& v : nd.val.data) v = stable_sigmoid(v);
  return push(std::move(nd));
}

Var Tape::softplus(Var a) {
  Node nd = make(Op::Softplus, {a.id});
  nd.val = a.value();
  for (auto& v : nd.val.data) v = stable_softplus(v);
  return push(std::move(nd));
}

Var Tape::exp(Var a) {
  Node nd = make(Op::Exp, {a.id});
  nd.val = a.value();
  for (auto& v : nd.val.data) v = std::exp(v);
  return push(std::move(nd));
}

Var Tape::log(Var a) {
  Node nd = make(Op::Log, {a.id});
  nd.val = a.value();
  for (auto& v : nd.val.data) v = std::log(v);
  return push(std::move(nd));
}

Var Tape::sqrt(Var a) {
  Node nd = make(Op::Sqrt, {a.id});
  nd.val = a.value();
  for (auto& v : nd.val.data) v = std::sqrt(v);
  return push(std::move(nd));
}

Var Tape::sum(Var a) {
  Node nd = make(Op::Sum, {a.id});
  double s = 0;
  for (double v : a.value().data) s += v;
  nd.val = Tensor::scalar(s);
  return push(std::move(nd));
}

Var Tape::matvec(Var w, Var x) {
  check_rank(w.value(), 2, "matvec w");
  check_rank(x.value(), 1, "matvec x");
  int m = w.shape()[0], n = w.shape()[1];
  if (x.shape()[0] != n) throw ShapeError("matvec dims " + shape_str(w.shape()) + " x " + shape_str(x.shape()));
  Node nd = make(Op::MatVec, {w.id, x.id});
  nd.val = Tensor({m});
  const Tensor& wv = w.value();
  const Tensor& xv = x.value();
  for (int i = 0; i < m; ++i) {
    double s = 0;
    const double* row = &wv.data[static_cast<std::size_t>(i) * n];
    for (int j = 0; j < n; ++j) s += row[j] * xv[j];
    nd.val[i] = s;
  }
  return push(std::move(nd));
}

Var Tape::tmatvec(Var w, Var x) {
  check_rank(w.value(), 2, "tmatvec w");
  check_rank(x.value(), 1, "tmatvec x");
  int m = w.shape()[0], n = w.shape()[1];
  if (x.shape()[0] != m) throw ShapeError("tmatvec dims " + shape_str(w.shape()) + " x " + shape_str(x.shape()));
  Node nd = make(Op::TMatVec, {w.id, x.id});
  nd.val = Tensor({n});
  const Tensor& wv = w.value();
  const Tensor& xv = x.value();
  for (int i = 0; i < m; ++i) {
    double xi = xv[i];
    if (xi == 0.0) continue;
    const double* row = &wv.data[static_cast<std::size_t>(i) * n];
    for (int j = 0; j < n; ++j) nd.val[j] += row[j] * xi;
  }
  return push(std::move(nd));
}

Var Tape::outer(Var u, Var v) {
  check_rank(u.value(), 1, "outer u");
  check_rank(v.value(), 1, "outer v");
  int m = u.shape()[0], n = v.shape()[0];
  Node nd = make(Op::Outer, {u.id, v.id});
  nd.val = Tensor({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) nd.val[static_cast<std::int64_t>(i) * n + j] = u.value()[i] * v.value()[j];
  return push(std::move(nd));
}

Var Tape::matmul(Var a, Var b) {
  check_rank(a.value(), 2, "matmul a");
  check_rank(b.value(), 2, "matmul b");
  if (a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Node nd = make(Op::MatMul, {a.id, b.id});
  nd.val = mat_mul_vals(a.value(), b.value());
  return push(std::move(nd));
}

Var Tape::transpose(Var a) {
  check_rank(a.value(), 2, "transpose");
  Node nd = make(Op::Transpose, {a.id});
  nd.val = transpose_vals(a.value());
  return push(std::move(nd));
}

Var Tape::reshape(Var a, Shape s) {
  if (numel(s) != a.value().size())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(s));
  Node nd = make(Op::Reshape, {a.id});
  nd.val = Tensor(std::move(s), a.value().data);
  return push(std::move(nd));
}

Var Tape::slice(Var a, int offset, int len) {
  if (offset < 0 || len < 0 || offset + len > a.value().size())
    throw ShapeError("slice [" + std::to_string(offset) + "," + std::to_string(offset + len) +
                     ") out of range for " + shape_str(a.shape()));
  Node nd = make(Op::Slice, {a.id});
  nd.i0 = offset;
  nd.i1 = len;
  nd.val = Tensor({len});
  std::memcpy(nd.val.data.data(), a.value().data.data() + offset, sizeof(double) * static_cast<std::size_t>(len));
  return push(std::move(nd));
}

Var Tape::embed(Var a, int offset, int total) {
  int len = static_cast<int>(a.value().size());
  if (offset < 0 || offset + len > total) throw ShapeError("embed out of range");
  Node nd = make(Op::Embed, {a.id});
  nd.i0 = offset;
  nd.i1 = total;
  nd.val = Tensor({total});
  std::memcpy(nd.val.data.data() + offset, a.value().data.data(), sizeof(double) * static_cast<std::size_t>(len));
  return push(std::move(nd));
}

Var Tape::concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat of zero parts");
  Node nd;
  nd.op = Op::Concat;
  std::int64_t total = 0;
  for (const Var& p : parts) {
    nd.in.push_back(p.id);
    total += p.value().size();
  }
  nd.val = Tensor({static_cast<int>(total)});
  std::int64_t off = 0;
  for (const Var& p : parts) {
    std::memcpy(nd.val.data.data() + off, p.value().data.data(),
                sizeof(double) * static_cast<std::size_t>(p.value().size()));
    off += p.value().size();
  }
  return push(std::move(nd));
}

Var Tape::conv2d(Var x, Var w) {
  Node nd = make(Op::Conv2d, {x.id, w.id});
  nd.val = conv2d_vals(x.value(), w.value());
  return push(std::move(nd));
}

Var Tape::conv2d_t(Var y, Var w) {
  Node nd = make(Op::Conv2dT, {y.id, w.id});
  nd.val = conv2d_t_vals(y.value(), w.value());
  return push(std::move(nd));
}

Var Tape::conv_wgrad(Var x, Var y) {
  Node nd = make(Op::ConvWGrad, {x.id, y.id});
  nd.val = conv_wgrad_vals(x.value(), y.value());
  return push(std::move(nd));
}

Var Tape::ch_bias(Var x, Var b) {
  check_rank(x.value(), 3, "ch_bias x");
  check_rank(b.value(), 1, "ch_bias b");
  if (x.shape()[0] != b.shape()[0]) throw ShapeError("ch_bias channel mismatch");
  Node nd = make(Op::ChBias, {x.id, b.id});
  nd.val = x.value();
  int c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  for (int i = 0; i < c; ++i) {
    double bv = b.value()[i];
    double* row = &nd.val.data[static_cast<std::size_t>(i) * hw];
    for (int j = 0; j < hw; ++j) row[j] += bv;
  }
  return push(std::move(nd));
}

Var Tape::ch_sum(Var x) {
  check_rank(x.value(), 3, "ch_sum");
  Node nd = make(Op::ChSum, {x.id});
  int c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  nd.val = Tensor({c});
  for (int i = 0; i < c; ++i) {
    double s = 0;
    const double* row = &x.value().data[static_cast<std::size_t>(i) * hw];
    for (int j = 0; j < hw; ++j) s += row[j];
    nd.val[i] = s;
  }
  return push(std::move(nd));
}

Var Tape::ch_bcast(Var v, int h, int w) {
  check_rank(v.value(), 1, "ch_bcast");
  Node nd = make(Op::ChBcast, {v.id});
  nd.i0 = h;
  nd.i1 = w;
  int c = v.shape()[0];
  nd.val = Tensor({c, h, w});
  for (int i = 0; i < c; ++i) {
    double vv = v.value()[i];
    double* row = &nd.val.data[static_cast<std::size_t>(i) * h * w];
    for (int j = 0; j < h * w; ++j) row[j] = vv;
  }
  return push(std::move(nd));
}

Var Tape::log_abs_det(Var a) {
  Node nd = make(Op::LogAbsDet, {a.id});
  nd.val = Tensor::scalar(log_abs_det_value(a.value()));
  return push(std::move(nd));
}

Var Tape::mat_inv_t(Var a) {
  Node nd = make(Op::MatInvT, {a.id});
  nd.val = detail::inverse_transpose(a.value());
  return push(std::move(nd));
}

Var Tape::gelu(Var a) {
  // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
  constexpr double kGeluCoef = 0.7978845608028654;
  Var x3 = mul(a, mul(a, a));
  Var inner = scale(add(a, scale(x3, 0.044715)), kGeluCoef);
  Var t = tanh(inner);
  Var one = constant(Tensor::full(a.shape(), 1.0));
  return scale(mul(a, add(one, t)), 0.5);
}

void Tape::accumulate(std::vector<int>& cot, int target, Var contrib) {
  if (cot[static_cast<std::size_t>(target)] < 0) {
    cot[static_cast<std::size_t>(target)] = contrib.id;
  } else {
    Var prev{this, cot[static_cast<std::size_t>(target)]};
    cot[static_cast<std::size_t>(target)] = add(prev, contrib).id;
  }
}

void Tape::emit_adjoints(int id, const Node& snap, std::vector<int>& cot) {
  Var g{this, cot[static_cast<std::size_t>(id)]};
  Var out{this, id};
  auto in = [&](int k) { return Var{this, snap.in[static_cast<std::size_t>(k)]}; };
  auto wants = [&](int k) { return nodes_[static_cast<std::size_t>(snap.in[static_cast<std::size_t>(k)])].grad; };

  switch (snap.op) {
    case Op::Leaf:
    case Op::Const:
      return;
    case Op::Add:
      if (wants(0)) accumulate(cot, snap.in[0], g);
      if (wants(1)) accumulate(cot, snap.in[1], g);
      return;
    case Op::Sub:
      if (wants(0)) accumulate(cot, snap.in[0], g);
      if (wants(1)) accumulate(cot, snap.in[1], neg(g));
      return;
    case Op::Neg:
      if (wants(0)) accumulate(cot, snap.in[0], neg(g));
      return;
    case Op::Mul:
      if (wants(0)) accumulate(cot, snap.in[0], mul(g, in(1)));
      if (wants(1)) accumulate(cot, snap.in[1], mul(g, in(0)));
      return;
    case Op::Scale:
      if (wants(0)) accumulate(cot, snap.in[0], scale(g, snap.c));
      return;
    case Op::SMul:
      if (wants(0)) accumulate(cot, snap.in[0], sum(mul(g, in(1))));
      if (wants(1)) accumulate(cot, snap.in[1], smul(in(0), g));
      return;
    case Op::SBcast:
      if (wants(0)) accumulate(cot, snap.in[0], sum(g));
      return;
    case Op::Recip:
      if (wants(0)) accumulate(cot, snap.in[0], neg(mul(g, mul(out, out))));
      return;
    case Op::Tanh:
      if (wants(0)) accumulate(cot, snap.in[0], sub(g, mul(g, mul(out, out))));
      return;
    case Op::Sigmoid:
      if (wants(0)) accumulate(cot, snap.in[0], mul(g, sub(out, mul(out, out))));
      return;
    case Op::Softplus:
      if (wants(0)) accumulate(cot, snap.in[0], mul(g, sigmoid(in(0))));
      return;
    case Op::Exp:
      if (wants(0)) accumulate(cot, snap.in[0], mul(g, out));
      return;
    case Op::Log:
      if (wants(0)) accumulate(cot, snap.in[0], mul(g, recip(in(0))));
      return;
    case Op::Sqrt:
      if (wants(0)) accumulate(cot, snap.in[0], scale(mul(g, recip(out)), 0.5));
      return;
    case Op::Sum:
      if (wants(0)) accumulate(cot, snap.in[0], sbcast(g, in(0).shape()));
      return;
    case Op::MatVec:
      if (wants(0)) accumulate(cot, snap.in[0], outer(g, in(1)));
      if (wants(1)) accumulate(cot, snap.in[1], tmatvec(in(0), g));
      return;
    case Op::TMatVec:
      if (wants(0)) accumulate(cot, snap.in[0], outer(in(1), g));
      if (wants(1)) accumulate(cot, snap.in[1], matvec(in(0), g));
      return;
    case Op::Outer:
      if (wants(0)) accumulate(cot, snap.in[0], matvec(g, in(1)));
      if (wants(1)) accumulate(cot, snap.in[1], tmatvec(g, in(0)));
      return;
    case Op::MatMul:
      if (wants(0)) accumulate(cot, snap.in[0], matmul(g, transpose(in(1))));
      if (wants(1)) accumulate(cot, snap.in[1], matmul(transpose(in(0)), g));
      return;
    case Op::Transpose:
      if (wants(0)) accumulate(cot, snap.in[0], transpose(g));
      return;
    case Op::Reshape:
      if (wants(0)) accumulate(cot, snap.in[0], reshape(g, in(0).shape()));
      return;
    case Op::Slice:
      if (wants(0))
        accumulate(cot, snap.in[0],
                   reshape(embed(g, snap.i0, static_cast<int>(in(0).value().size())), in(0).shape()));
      return;
    case Op::Embed:
      if (wants(0)) accumulate(cot, snap.in[0], slice(g, snap.i0, static_cast<int>(in(0).value().size())));
      return;
    case Op::Concat: {
      int off = 0;
      for (std::size_t k = 0; k < snap.in.size(); ++k) {
        int len = static_cast<int>(nodes_[static_cast<std::size_t>(snap.in[k])].val.size());
        if (nodes_[static_cast<std::size_t>(snap.in[k])].grad) {
          Var part = slice(g, off, len);
          Var src{this, snap.in[k]};
          accumulate(cot, snap.in[k], reshape(part, src.shape()));
        }
        off += len;
      }
      return;
    }
    case Op::Conv2d:
      if (wants(0)) accumulate(cot, snap.in[0], conv2d_t(g, in(1)));
      if (wants(1)) accumulate(cot, snap.in[1], conv_wgrad(in(0), g));
      return;
    case Op::Conv2dT:
      if (wants(0)) accumulate(cot, snap.in[0], conv2d(g, in(1)));
      if (wants(1)) accumulate(cot, snap.in[1], conv_wgrad(g, in(0)));
      return;
    case Op::ConvWGrad:
      if (wants(0)) accumulate(cot, snap.in[0], conv2d_t(in(1), g));
      if (wants(1)) accumulate(cot, snap.in[1], conv2d(in(0), g));
      return;
    case Op::ChBias:
      if (wants(0)) accumulate(cot, snap.in[0], g);
      if (wants(1)) accumulate(cot, snap.in[1], ch_sum(g));
      return;
    case Op::ChSum:
      if (wants(0)) {
        const Shape& s = in(0).shape();
        accumulate(cot, snap.in[0], ch_bcast(g, s[1], s[2]));
      }
      return;
    case Op::ChBcast:
      if (wants(0)) accumulate(cot, snap.in[0], ch_sum(g));
      return;
    case Op::LogAbsDet:
      if (wants(0)) accumulate(cot, snap.in[0], smul(g, mat_inv_t(in(0))));
      return;
    case Op::MatInvT:
      // A_bar = -B G^T B with B = A^{-T}
      if (wants(0)) accumulate(cot, snap.in[0], neg(matmul(matmul(out, transpose(g)), out)));
      return;
  }
}

std::unordered_map<int, Var> Tape::backward(Var output, std::span<const Var> wrt,
                                            std::optional<Var> seed) {
  if (!output.valid() || output.tape != this) throw Error("backward: output not on this tape");
  std::vector<int> cot(static_cast<std::size_t>(output.id) + 1, -1);
  Var s;
  if (seed.has_value()) {
    if (!same_shape(seed->value(), output.value()))
      throw ShapeError("backward: seed shape " + shape_str(seed->shape()) +
                       " does not match output " + shape_str(output.shape()));
    s = *seed;
  } else {
    if (output.value().size() != 1)
      throw ShapeError("backward: non-scalar output of shape " + shape_str(output.shape()) +
                       " requires an explicit cotangent seed");
    s = constant(Tensor(output.shape(), std::vector<double>(1, 1.0)));
  }
  cot[static_cast<std::size_t>(output.id)] = s.id;
  for (int id = output.id; id >= 0; --id) {
    if (cot[static_cast<std::size_t>(id)] < 0) continue;
    if (!nodes_[static_cast<std::size_t>(id)].grad) continue;
    Node snap;  // inputs/attrs only; values are fetched by id at emission time
    snap.op = nodes_[static_cast<std::size_t>(id)].op;
    snap.in = nodes_[static_cast<std::size_t>(id)].in;
    snap.c = nodes_[static_cast<std::size_t>(id)].c;
    snap.i0 = nodes_[static_cast<std::size_t>(id)].i0;
    snap.i1 = nodes_[static_cast<std::size_t>(id)].i1;
    emit_adjoints(id, snap, cot);
  }
  std::unordered_map<int, Var> out;
  for (const Var& w : wrt) {
    if (!w.valid() || w.tape != this) throw Error("backward: wrt not on this tape");
    if (w.id <= output.id && cot[static_cast<std::size_t>(w.id)] >= 0)
      out.emplace(w.id, Var{this, cot[static_cast<std::size_t>(w.id)]});
  }
  return out;
}

std::unordered_map<int, Tensor> Tape::backward_values(Var output, std::span<const Var> wrt,
                                                      const Tensor* seed) {
  int m = mark();
  std::optional<Var> s;
  if (seed) s = constant(*seed);
  auto grads = backward(output, wrt, s);
  std::unordered_map<int, Tensor> out;
  for (auto& [id, v] : grads) out.emplace(id, v.value());
  rollback(m);
  return out;
}

void Tape::set_tangent(Var v, Tensor t) {
  Node& nd = node(v.id);
  if (!same_shape(nd.val, t)) throw ShapeError("set_tangent: shape mismatch");
  nd.tan = std::move(t);
  nd.has_tan = true;
}

const Tensor* Tape::tangent(Var v) const {
  const Node& nd = node(v.id);
  return nd.has_tan ? &nd.tan : nullptr;
}

void Tape::clear_tangents() {
  for (auto& nd : nodes_) {
    nd.tan = Tensor();
    nd.has_tan = false;
  }
}

void Tape::forward_tangents(int from) {
  for (int id = std::max(from, 0); id < size(); ++id) {
    Node& nd = nodes_[static_cast<std::size_t>(id)];
    if (nd.op == Op::Leaf || nd.op == Op::Const) continue;  // tangents only via set_tangent
    bool any = false;
    for (int i : nd.in)
      if (nodes_[static_cast<std::size_t>(i)].has_tan) {
        any = true;
        break;
      }
    if (!any) {
      nd.has_tan = false;
      continue;
    }
    Tensor t = jvp(nd, id);
    nd.tan = std::move(t);
    nd.has_tan = true;
  }
}

Tensor Tape::jvp(const Node& nd, int) const {
  auto val = [&](int k) -> const Tensor& { return nodes_[static_cast<std::size_t>(nd.in[static_cast<std::size_t>(k)])].val; };
  auto tan = [&](int k) -> Tensor {
    const Node& p = nodes_[static_cast<std::size_t>(nd.in[static_cast<std::size_t>(k)])];
    return p.has_tan ? p.tan : Tensor::zeros(p.val.shape);
  };
  switch (nd.op) {
    case Op::Leaf:
    case Op::Const:
      return Tensor::zeros(nd.val.shape);
    case Op::Add: {
      Tensor t = tan(0);
      axpy(1.0, tan(1), t);
      return t;
    }
    case Op::Sub: {
      Tensor t = tan(0);
      axpy(-1.0, tan(1), t);
      return t;
    }
    case Op::Neg: {
      Tensor t = tan(0);
      for (auto& v : t.data) v = -v;
      return t;
    }
    case Op::Mul: {
      Tensor t = tan(0);
      const Tensor& b = val(1);
      for (std::int64_t i = 0; i < t.size(); ++i) t[i] *= b[i];
      Tensor u = tan(1);
      const Tensor& a = val(0);
      for (std::int64_t i = 0; i < u.size(); ++i) t[i] += a[i] * u[i];
      return t;
    }
    case Op::Scale: {
      Tensor t = tan(0);
      for (auto& v : t.data) v *= nd.c;
      return t;
    }
    case Op::SMul: {
      double sv = val(0).data[0];
      double st = tan(0).data[0];
      Tensor t = tan(1);
      const Tensor& x = val(1);
      for (std::int64_t i = 0; i < t.size(); ++i) t[i] = sv * t[i] + st * x[i];
      return t;
    }
    case Op::SBcast:
      return Tensor::full(nd.val.shape, tan(0).data[0]);
    case Op::Recip: {
      Tensor t = tan(0);
      for (std::int64_t i = 0; i < t.size(); ++i) {
        double y = nd.val[i];
        t[i] = -t[i] * y * y;
      }
      return t;
    }
    case Op::Tanh: {
      Tensor t = tan(0);
      for (std::int64_t i = 0; i < t.size(); ++i) t[i] *= 1.0 - nd.val[i] * nd.val[i];
      return t;
    }
    case Op::Sigmoid: {
      Tensor t = tan(0);
      for (std::int64_t i = 0; i < t.size(); ++i) t[i] *= nd.val[i] * (1.0 - nd.val[i]);
      return t;
    }
    case Op::Softplus: {
      Tensor t = tan(0);
      const Tensor& a = val(0);
      for (std::int64_t i = 0; i < t.size(); ++i) t[i] *= stable_sigmoid(a[i]);
      return t;
    }
    case Op::Exp: {
      Tensor t = tan(0);
      for (std::int64_t i = 0; i < t.size(); ++i) t[i] *= nd.val[i];
      return t;
    }
    case Op::Log: {
      Tensor t = tan(0);
      const Tensor& a = val(0);
      for (std::int64_t i = 0; i < t.size(); ++i) t[i] /= a[i];
      return t;
    }
    case Op::Sqrt: {
      Tensor t = tan(0);
      for (std::int64_t i = 0; i < t.size(); ++i) t[i] *= 0.5 / nd.val[i];
      return t;
    }
    case Op::Sum: {
      double s = 0;
      for (double v : tan(0).data) s += v;
      return Tensor::scalar(s);
    }
    case Op::MatVec: {
      Tensor wt = tan(0), xt = tan(1);
      const Tensor& w = val(0);
      const Tensor& x = val(1);
      int m = w.shape[0], n = w.shape[1];
      Tensor out({m});
      for (int i = 0; i < m; ++i) {
        double s = 0;
        for (int j = 0; j < n; ++j)
          s += wt[static_cast<std::int64_t>(i) * n + j] * x[j] + w[static_cast<std::int64_t>(i) * n + j] * xt[j];
        out[i] = s;
      }
      return out;
    }
    case Op::TMatVec: {
      Tensor wt = tan(0), xt = tan(1);
      const Tensor& w = val(0);
      const Tensor& x = val(1);
      int m = w.shape[0], n = w.shape[1];
      Tensor out({n});
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          out[j] += wt[static_cast<std::int64_t>(i) * n + j] * x[i] + w[static_cast<std::int64_t>(i) * n + j] * xt[i];
      return out;
    }
    case Op::Outer: {
      Tensor ut = tan(0), vt = tan(1);
      const Tensor& u = val(0);
      const Tensor& v = val(1);
      int m = u.shape[0], n = v.shape[0];
      Tensor out({m, n});
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          out[static_cast<std::int64_t>(i) * n + j] = ut[i] * v[j] + u[i] * vt[j];
      return out;
    }
    case Op::MatMul: {
      Tensor t = mat_mul_vals(tan(0), val(1));
      Tensor u = mat_mul_vals(val(0), tan(1));
      axpy(1.0, u, t);
      return t;
    }
    case Op::Transpose:
      return transpose_vals(tan(0));
    case Op::Reshape:
      return Tensor(nd.val.shape, tan(0).data);
    case Op::Slice: {
      Tensor t = tan(0);
      Tensor out({nd.i1});
      std::memcpy(out.data.data(), t.data.data() + nd.i0, sizeof(double) * static_cast<std::size_t>(nd.i1));
      return out;
    }
    case Op::Embed: {
      Tensor t = tan(0);
      Tensor out({nd.i1});
      std::memcpy(out.data.data() + nd.i0, t.data.data(), sizeof(double) * t.data.size());
      return out;
    }
    case Op::Concat: {
      Tensor out(nd.val.shape);
      std::int64_t off = 0;
      for (std::size_t k = 0; k < nd.in.size(); ++k) {
        const Node& p = nodes_[static_cast<std::size_t>(nd.in[k])];
        if (p.has_tan)
          std::memcpy(out.data.data() + off, p.tan.data.data(), sizeof(double) * p.tan.data.size());
        off += p.val.size();
      }
      return out;
    }
    case Op::Conv2d: {
      Tensor t = conv2d_vals(tan(0), val(1));
      Tensor u = conv2d_vals(val(0), tan(1));
      axpy(1.0, u, t);
      return t;
    }
    case Op::Conv2dT: {
      Tensor t = conv2d_t_vals(tan(0), val(1));
      Tensor u = conv2d_t_vals(val(0), tan(1));
      axpy(1.0, u, t);
      return t;
    }
    case Op::ConvWGrad: {
      Tensor t = conv_wgrad_vals(tan(0), val(1));
      Tensor u = conv_wgrad_vals(val(0), tan(1));
      axpy(1.0, u, t);
      return t;
    }
    case Op::ChBias: {
      Tensor t = tan(0);
      Tensor bt = tan(1);
      int c = t.shape[0], hw = t.shape[1] * t.shape[2];
      for (int i = 0; i < c; ++i) {
        double bv = bt[i];
        double* row = &t.data[static_cast<std::size_t>(i) * hw];
        for (int j = 0; j < hw; ++j) row[j] += bv;
      }
      return t;
    }
    case Op::ChSum: {
      Tensor t = tan(0);
      int c = t.shape[0], hw = t.shape[1] * t.shape[2];
      Tensor out({c});
      for (int i = 0; i < c; ++i) {
        double s = 0;
        const double* row = &t.data[static_cast<std::size_t>(i) * hw];
        for (int j = 0; j < hw; ++j) s += row[j];
        out[i] = s;
      }
      return out;
    }
    case Op::ChBcast: {
      Tensor t = tan(0);
      Tensor out(nd.val.shape);
      int c = t.shape[0], hw = nd.i0 * nd.i1;
      for (int i = 0; i < c; ++i) {
        double* row = &out.data[static_cast<std::size_t>(i) * hw];
        for (int j = 0; j < hw; ++j) row[j] = t[i];
      }
      return out;
    }
    case Op::LogAbsDet: {
      // d log|det A| = tr(A^{-1} dA), via the LU factors of A
      const Tensor& a = val(0);
      Tensor at = tan(0);
      int n = a.shape[0];
      detail::Lu lu = detail::lu_factor(a);
      std::vector<double> col(static_cast<std::size_t>(n));
      double tr = 0;
      for (int j = 0; j < n; ++j) {
        for (int i = 0; i < n; ++i) col[static_cast<std::size_t>(i)] = at[static_cast<std::int64_t>(i) * n + j];
        lu.solve(col);
        tr += col[static_cast<std::size_t>(j)];
      }
      return Tensor::scalar(tr);
    }
    case Op::MatInvT: {
      // B = A^{-T}; dB = -B dA^T B
      Tensor at = transpose_vals(tan(0));
      Tensor t = mat_mul_vals(nd.val, at);
      t = mat_mul_vals(t, nd.val);
      for (auto& v : t.data) v = -v;
      return t;
    }
  }
  throw Error("jvp: unhandled op");
}

void Tape::rollback(int m) {
  if (m < 0 || m > size()) throw Error("rollback: bad mark");
  nodes_.resize(static_cast<std::size_t>(m));
}

Tensor jacobian_values(Tape& t, Var out, Var in) {
  int n_out = static_cast<int>(out.value().size());
  int n_in = static_cast<int>(in.value().size());
  Tensor jac({n_out, n_in});
  std::vector<Var> wrt{in};
  for (int i = 0; i < n_out; ++i) {
    int m = t.mark();
    Tensor seed = Tensor::zeros(out.shape());
    seed[i] = 1.0;
    Var seed_v = t.constant(std::move(seed));
    auto g = t.backward(out, wrt, seed_v);
    if (auto it = g.find(in.id); it != g.end()) {
      const Tensor& row = it->second.value();
      std::memcpy(&jac.data[static_cast<std::size_t>(i) * n_in], row.data.data(),
                  sizeof(double) * static_cast<std::size_t>(n_in));
    }
    t.rollback(m);
  }
  return jac;
}

Var jacobian_graph(Tape& t, Var out, Var in) {
  int n_out = static_cast<int>(out.value().size());
  int n_in = static_cast<int>(in.value().size());
  std::vector<Var> rows;
  rows.reserve(static_cast<std::size_t>(n_out));
  std::vector<Var> wrt{in};
  for (int i = 0; i < n_out; ++i) {
    Tensor seed = Tensor::zeros(out.shape());
    seed[i] = 1.0;
    Var seed_v = t.constant(std::move(seed));
    auto g = t.backward(out, wrt, seed_v);
    if (auto it = g.find(in.id); it != g.end())
      rows.push_back(t.reshape(it->second, {n_in}));
    else
      rows.push_back(t.constant(Tensor::zeros({n_in})));
  }
  return t.reshape(t.concat(rows), {n_out, n_in});
}

Tensor jacobian(const std::function<Var(Tape&, Var)>& map, const Tensor& x) {
  Tape t;
  Var in = t.leaf(x);
  Var out = map(t, in);
  if (out.value().size() != x.size())
    throw ShapeError("jacobian: output dim " + std::to_string(out.value().size()) +
                     " does not match input dim " + std::to_string(x.size()));
  return jacobian_values(t, out, in);
}

double log_abs_det_value(const Tensor& square) {
  auto eig = detail::eigenvalues(square);
  double s = 0;
  for (const auto& l : eig) {
    double m = std::abs(l);
    if (m < kSingularEigThreshold)
      throw SingularMatrixError("log_abs_det: |eigenvalue| = " + std::to_string(m) +
                                " below singularity threshold; map not invertible");
    s += std::log(m);
  }
  return s;
}

std::vector<std::complex<double>> eigenvalues_of(const Tensor& square) {
  return detail::eigenvalues(square);
}

double min_abs_eigenvalue(const Tensor& square) {
  auto eig = detail::eigenvalues(square);
  double m = std::numeric_limits<double>::infinity();
  for (const auto& l : eig) m = std::min(m, std::abs(l));
  return m;
}

GradCheckReport grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double h) {
  if (h <= 0) throw Error("grad_check: h must be positive");
  Tensor analytic;
  {
    Tape t;
    Var xi = t.leaf(x);
    Var y = f(t, xi);
    if (y.value().size() != 1) throw ShapeError("grad_check: f must produce a scalar");
    auto g = t.backward_values(y, std::vector<Var>{xi});
    analytic = g.count(xi.id) ? g.at(xi.id) : Tensor::zeros(x.shape);
  }
  auto value_at = [&f](const Tensor& p) {
    Tape t;
    Var xi = t.leaf(p);
    return f(t, xi).value().item();
  };
  GradCheckReport rep;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    Tensor xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    double numeric = (value_at(xp) - value_at(xm)) / (2.0 * h);
    double a = analytic[i];
    double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
    double rel = std::fabs(a - numeric) / denom;
    rep.rows.push_back({static_cast<int>(i), a, numeric, rel});
    rep.max_rel_err = std::max(rep.max_rel_err, rel);
  }
  return rep;
}

GradCheckReport grad_check_explicit(const std::function<double(const Tensor&)>& f,
                                    const Tensor& analytic_grad, const Tensor& x, double h) {
  if (h <= 0) throw Error("grad_check: h must be positive");
  GradCheckReport rep;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    Tensor xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    double numeric = (f(xp) - f(xm)) / (2.0 * h);
    double a = analytic_grad[i];
    double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
    double rel = std::fabs(a - numeric) / denom;
    rep.rows.push_back({static_cast<int>(i), a, numeric, rel});
    rep.max_rel_err = std::max(rep.max_rel_err, rel);
  }
  return rep;
}

}  // namespace sri::ad
