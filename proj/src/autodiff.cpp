#include "snf/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "snf/errors.hpp"

namespace snf {

namespace {

#if defined(__GLIBC__)
// Tapes allocate and free many same-sized multi-megabyte buffers per step.
// glibc would serve each from a fresh mmap and page-fault it in again; keeping
// them on the heap makes repeated steps reuse warm memory.
const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();
#endif

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

Tape& tape_of(Var a) {
  if (!a.valid()) throw ValidationError("operation on an unbound Var");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (&tape_of(b) != &t) throw ValidationError("operands recorded on different tapes");
  return t;
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ValidationError(std::string(op) + " requires a rank-2 tensor, got " + shape_str(t.shape()));
  }
}

enum class Bc { Same, Scalar, Row, Col };

struct BroadcastPlan {
  Shape out;
  Bc a = Bc::Same;
  Bc b = Bc::Same;
  std::size_t cols = 1;
};

BroadcastPlan plan_broadcast(const Shape& sa, const Shape& sb, const char* op) {
  BroadcastPlan p;
  if (sa == sb) {
    p.out = sa;
  } else if (shape_size(sa) == 1) {
    p.out = sb;
    p.a = Bc::Scalar;
  } else if (shape_size(sb) == 1) {
    p.out = sa;
    p.b = Bc::Scalar;
  } else if (sa.size() == 2 && sb.size() == 2) {
    if (sa[1] == sb[1] && sa[0] == 1) {
      p.out = sb;
      p.a = Bc::Row;
    } else if (sa[1] == sb[1] && sb[0] == 1) {
      p.out = sa;
      p.b = Bc::Row;
    } else if (sa[0] == sb[0] && sa[1] == 1) {
      p.out = sb;
      p.a = Bc::Col;
    } else if (sa[0] == sb[0] && sb[1] == 1) {
      p.out = sa;
      p.b = Bc::Col;
    } else {
      throw ValidationError(std::string(op) + ": cannot broadcast " + shape_str(sa) + " with " + shape_str(sb));
    }
  } else {
    throw ValidationError(std::string(op) + ": cannot broadcast " + shape_str(sa) + " with " + shape_str(sb));
  }
  p.cols = p.out.size() == 2 ? p.out[1] : 1;
  return p;
}

inline std::size_t bc_index(Bc mode, std::size_t i, std::size_t cols) {
  switch (mode) {
    case Bc::Same: return i;
    case Bc::Scalar: return 0;
    case Bc::Row: return i % cols;
    case Bc::Col: return i / cols;
  }
  return i;
}

// Sum a gradient of the broadcast output shape back to the operand's shape.
Tensor reduce_to(const Tensor& g, Bc mode, const Shape& target, std::size_t cols) {
  if (mode == Bc::Same) return g;
  Tensor out(target, 0.0);
  auto gd = g.data();
  auto od = out.data();
  for (std::size_t i = 0; i < gd.size(); ++i) od[bc_index(mode, i, cols)] += gd[i];
  return out;
}

template <class F, class DA, class DB>
Var binary(const char* name, Var a, Var b, F f, DA dfa, DB dfb) {
  Tape& tape = tape_of(a, b);
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  BroadcastPlan p = plan_broadcast(va.shape(), vb.shape(), name);
  Tensor out(p.out);
  auto od = out.data();
  auto ad = va.data();
  auto bd = vb.data();
  if (p.a == Bc::Same && p.b == Bc::Same) {
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = f(ad[i], bd[i]);
  } else {
    for (std::size_t i = 0; i < od.size(); ++i) {
      od[i] = f(ad[bc_index(p.a, i, p.cols)], bd[bc_index(p.b, i, p.cols)]);
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(name, std::move(out), {ia, ib}, [p, ia, ib, dfa, dfb](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& xa = t.value(ia);
    const Tensor& xb = t.value(ib);
    const Tensor& y = t.value(self);
    auto gd = g.data();
    auto ad = xa.data();
    auto bd = xb.data();
    auto yd = y.data();
    if (t.requires_grad(ia)) {
      Tensor ga(p.out);
      auto d = ga.data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] = gd[i] * dfa(ad[bc_index(p.a, i, p.cols)], bd[bc_index(p.b, i, p.cols)], yd[i]);
      }
      t.accumulate(ia, reduce_to(ga, p.a, xa.shape(), p.cols));
    }
    if (t.requires_grad(ib)) {
      Tensor gb(p.out);
      auto d = gb.data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] = gd[i] * dfb(ad[bc_index(p.a, i, p.cols)], bd[bc_index(p.b, i, p.cols)], yd[i]);
      }
      t.accumulate(ib, reduce_to(gb, p.b, xb.shape(), p.cols));
    }
  });
}

// dfdx(x, y) gives the local derivative given input x and output y.
template <class F, class D>
Var unary(const char* name, Var x, F f, D dfdx) {
  Tape& tape = tape_of(x);
  const Tensor& vx = x.value();
  Tensor out(vx.shape());
  auto od = out.data();
  auto xd = vx.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = f(xd[i]);
  const std::size_t ix = x.id();
  return tape.record(name, std::move(out), {ix}, [ix, dfdx](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& xv = t.value(ix);
    const Tensor& y = t.value(self);
    Tensor gx(xv.shape());
    auto d = gx.data();
    auto gd = g.data();
    auto xd = xv.data();
    auto yd = y.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = gd[i] * dfdx(xd[i], yd[i]);
    t.accumulate(ix, std::move(gx));
  });
}

// a + sign * b. The backward pass forwards the incoming gradient instead of
// evaluating per-element derivatives.
Var signed_sum(const char* name, Var a, Var b, double sign) {
  Tape& tape = tape_of(a, b);
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  BroadcastPlan p = plan_broadcast(va.shape(), vb.shape(), name);
  Tensor out(p.out);
  auto od = out.data();
  auto ad = va.data();
  auto bd = vb.data();
  if (p.a == Bc::Same && p.b == Bc::Same) {
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + sign * bd[i];
  } else {
    for (std::size_t i = 0; i < od.size(); ++i) {
      od[i] = ad[bc_index(p.a, i, p.cols)] + sign * bd[bc_index(p.b, i, p.cols)];
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(name, std::move(out), {ia, ib}, [p, ia, ib, sign](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.requires_grad(ia)) t.accumulate(ia, reduce_to(g, p.a, t.value(ia).shape(), p.cols));
    if (t.requires_grad(ib)) {
      Tensor gb = reduce_to(g, p.b, t.value(ib).shape(), p.cols);
      if (sign != 1.0)
        for (double& v : gb.data()) v *= sign;
      t.accumulate(ib, std::move(gb));
    }
  });
}

double stable_softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

const Tensor& Var::value() const {
  if (!tape_) throw ValidationError("value() on an unbound Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NumericalError("non-finite value passed as tape leaf");
  Node n;
  n.op = "leaf";
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string op, Tensor value, std::vector<std::size_t> inputs, Backward backward) {
  if (!value.all_finite()) throw NumericalError("non-finite value produced by op '" + op + "'");
  Node n;
  n.op = std::move(op);
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](std::size_t i) { return nodes_[i].requires_grad; });
  if (n.requires_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(std::size_t id, Tensor&& g) {
  if (nodes_[id].requires_grad && !has_grad_[id] && g.shape() == nodes_[id].value.shape() && g.all_finite()) {
    grads_[id] = std::move(g);
    has_grad_[id] = true;
    return;
  }
  accumulate(id, static_cast<const Tensor&>(g));
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  if (!nodes_[id].requires_grad) return;
  if (g.shape() != nodes_[id].value.shape()) {
    throw ValidationError("gradient shape " + shape_str(g.shape()) + " does not match node shape " +
                          shape_str(nodes_[id].value.shape()));
  }
  if (!g.all_finite()) throw NumericalError("NaN/Inf gradient encountered in backward pass");
  if (!has_grad_[id]) {
    grads_[id] = g;
    has_grad_[id] = true;
    return;
  }
  auto d = grads_[id].data();
  auto s = g.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

std::vector<Tensor> Tape::grad(Var loss, std::span<const Var> params) {
  if (loss.tape() != this) throw ValidationError("loss was not recorded on this tape");
  if (loss.value().size() != 1) {
    throw ValidationError("grad() requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  grads_.assign(nodes_.size(), Tensor());
  has_grad_.assign(nodes_.size(), false);
  const std::size_t root = loss.id();
  if (nodes_[root].requires_grad) {
    grads_[root] = Tensor(nodes_[root].value.shape(), 1.0);
    has_grad_[root] = true;
  }
  for (std::size_t k = root + 1; k-- > 0;) {
    Node& n = nodes_[k];
    if (!has_grad_[k] || !n.backward) continue;
    try {
      n.backward(*this, k);
    } catch (const NumericalError&) {
      throw NumericalError("NaN/Inf gradient encountered in backward pass of op '" + n.op + "'");
    }
  }
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Var& p : params) {
    if (p.tape() != this) throw ValidationError("parameter was not recorded on this tape");
    out.push_back(has_grad_[p.id()] ? grads_[p.id()] : Tensor(p.value().shape(), 0.0));
  }
  grads_.clear();
  has_grad_.clear();
  return out;
}

Var add(Var a, Var b) { return signed_sum("add", a, b, 1.0); }

Var sub(Var a, Var b) { return signed_sum("sub", a, b, -1.0); }

Var mul(Var a, Var b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Var div(Var a, Var b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Var operator+(Var a, Var b) { return add(a, b); }
Var operator-(Var a, Var b) { return sub(a, b); }
Var operator*(Var a, Var b) { return mul(a, b); }
Var operator/(Var a, Var b) { return div(a, b); }

Var operator-(Var a) {
  return unary("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var operator+(Var a, double c) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.data()) v += c;
  const std::size_t ia = a.id();
  return tape.record("add_const", std::move(out), {ia},
                     [ia](Tape& t, std::size_t self) { t.accumulate(ia, t.grad_of(self)); });
}
Var operator+(double c, Var a) { return a + c; }
Var operator-(Var a, double c) { return a + (-c); }
Var operator-(double c, Var a) {
  return unary("rsub_const", a, [c](double x) { return c - x; }, [](double, double) { return -1.0; });
}
Var operator*(Var a, double c) {
  return unary("mul_const", a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}
Var operator*(double c, Var a) { return a * c; }
Var operator/(Var a, double c) { return a * (1.0 / c); }

Var matmul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  require_rank2(va, "matmul");
  require_rank2(vb, "matmul");
  const std::size_t m = va.rows(), k = va.cols(), n = vb.cols();
  if (vb.rows() != k) {
    throw ValidationError("matmul shape mismatch: " + shape_str(va.shape()) + " x " + shape_str(vb.shape()));
  }
  Tensor out(Shape{m, n});
  if (m && n && k) {
    MutMap(out.data().data(), m, n).noalias() = ConstMap(va.data().data(), m, k) * ConstMap(vb.data().data(), k, n);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record("matmul", std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.requires_grad(ia)) {
      Tensor ga(Shape{m, k});
      if (m && n && k) {
        MutMap(ga.data().data(), m, k).noalias() =
            ConstMap(g.data().data(), m, n) * ConstMap(t.value(ib).data().data(), k, n).transpose();
      }
      t.accumulate(ia, std::move(ga));
    }
    if (t.requires_grad(ib)) {
      Tensor gb(Shape{k, n});
      if (m && n && k) {
        MutMap(gb.data().data(), k, n).noalias() =
            ConstMap(t.value(ia).data().data(), m, k).transpose() * ConstMap(g.data().data(), m, n);
      }
      t.accumulate(ib, std::move(gb));
    }
  });
}

Var affine(Var x, Var w, Var b) {
  Tape& tape = tape_of(x, w);
  tape_of(x, b);
  const Tensor& vx = x.value();
  const Tensor& vw = w.value();
  const Tensor& vb = b.value();
  require_rank2(vx, "affine");
  require_rank2(vw, "affine");
  const std::size_t m = vx.rows(), k = vx.cols(), n = vw.cols();
  if (vw.rows() != k || vb.size() != n) {
    throw ValidationError("affine shape mismatch: " + shape_str(vx.shape()) + " x " + shape_str(vw.shape()) + " + " +
                          shape_str(vb.shape()));
  }
  Tensor out(Shape{m, n});
  if (m && n) {
    auto o = MutMap(out.data().data(), m, n);
    o.rowwise() = Eigen::Map<const Eigen::RowVectorXd>(vb.data().data(), static_cast<Eigen::Index>(n));
    if (k) o.noalias() += ConstMap(vx.data().data(), m, k) * ConstMap(vw.data().data(), k, n);
  }
  const std::size_t ix = x.id(), iw = w.id(), ib = b.id();
  const Shape bshape = vb.shape();
  return tape.record("affine", std::move(out), {ix, iw, ib}, [ix, iw, ib, m, k, n, bshape](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const auto gm = ConstMap(g.data().data(), m, n);
    if (t.requires_grad(ix)) {
      Tensor gx(Shape{m, k});
      if (m && n && k) MutMap(gx.data().data(), m, k).noalias() = gm * ConstMap(t.value(iw).data().data(), k, n).transpose();
      t.accumulate(ix, std::move(gx));
    }
    if (t.requires_grad(iw)) {
      Tensor gw(Shape{k, n});
      if (m && n && k) MutMap(gw.data().data(), k, n).noalias() = ConstMap(t.value(ix).data().data(), m, k).transpose() * gm;
      t.accumulate(iw, std::move(gw));
    }
    if (t.requires_grad(ib)) {
      Tensor gb(bshape);
      if (n) Eigen::Map<Eigen::RowVectorXd>(gb.data().data(), static_cast<Eigen::Index>(n)) = gm.colwise().sum();
      t.accumulate(ib, std::move(gb));
    }
  });
}

Var transpose(Var a) {
  Tape& tape = tape_of(a);
  const Tensor& va = a.value();
  require_rank2(va, "transpose");
  const std::size_t m = va.rows(), n = va.cols();
  Tensor out(Shape{n, m});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out.at(c, r) = va.at(r, c);
  const std::size_t ia = a.id();
  return tape.record("transpose", std::move(out), {ia}, [ia, m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor ga(Shape{m, n});
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) ga.at(r, c) = g.at(c, r);
    t.accumulate(ia, std::move(ga));
  });
}

Var exp(Var x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(Var x) {
  return unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var tanh(Var x) {
  return unary("tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var x) {
  return unary("relu", x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Var softplus(Var x) {
  return unary("softplus", x, stable_softplus, [](double v, double) { return stable_sigmoid(v); });
}

Var sigmoid(Var x) {
  return unary("sigmoid", x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var square(Var x) {
  return unary("square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var sqrt(Var x) {
  return unary("sqrt", x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Var pow(Var x, double p) {
  return unary(
      "pow", x, [p](double v) { return std::pow(v, p); },
      [p](double v, double) { return p * std::pow(v, p - 1.0); });
}

Var clamp(Var x, double lo, double hi) {
  return unary(
      "clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Var sum(Var x) {
  Tape& tape = tape_of(x);
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t ix = x.id();
  return tape.record("sum", Tensor::scalar(s), {ix}, [ix](Tape& t, std::size_t self) {
    t.accumulate(ix, Tensor(t.value(ix).shape(), t.grad_of(self).item()));
  });
}

Var sum(Var x, int axis) {
  Tape& tape = tape_of(x);
  const Tensor& v = x.value();
  require_rank2(v, "sum(axis)");
  const std::size_t m = v.rows(), n = v.cols();
  if (axis != 0 && axis != 1) throw ValidationError("sum: axis must be 0 or 1");
  Tensor out(axis == 0 ? Shape{1, n} : Shape{m, 1});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[axis == 0 ? c : r] += v.at(r, c);
  const std::size_t ix = x.id();
  return tape.record("sum_axis", std::move(out), {ix}, [ix, axis, m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor gx(Shape{m, n});
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) gx.at(r, c) = g[axis == 0 ? c : r];
    t.accumulate(ix, std::move(gx));
  });
}

Var mean(Var x) { return sum(x) * (1.0 / static_cast<double>(x.value().size())); }

Var mean(Var x, int axis) {
  const double n = static_cast<double>(axis == 0 ? x.value().rows() : x.value().cols());
  return sum(x, axis) * (1.0 / n);
}

Var logsumexp_rows(Var x) {
  Tape& tape = tape_of(x);
  const Tensor& v = x.value();
  require_rank2(v, "logsumexp_rows");
  const std::size_t m = v.rows(), n = v.cols();
  if (n == 0) throw ValidationError("logsumexp over an empty axis");
  Tensor out(Shape{m, 1});
  for (std::size_t r = 0; r < m; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, v.at(r, c));
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += std::exp(v.at(r, c) - mx);
    out[r] = mx + std::log(s);
  }
  const std::size_t ix = x.id();
  return tape.record("logsumexp", std::move(out), {ix}, [ix, m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& xv = t.value(ix);
    const Tensor& y = t.value(self);
    Tensor gx(Shape{m, n});
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) gx.at(r, c) = g[r] * std::exp(xv.at(r, c) - y[r]);
    t.accumulate(ix, std::move(gx));
  });
}

Var softmax_rows(Var x) {
  Tape& tape = tape_of(x);
  const Tensor& v = x.value();
  require_rank2(v, "softmax_rows");
  const std::size_t m = v.rows(), n = v.cols();
  Tensor out(Shape{m, n});
  for (std::size_t r = 0; r < m; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, v.at(r, c));
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += (out.at(r, c) = std::exp(v.at(r, c) - mx));
    for (std::size_t c = 0; c < n; ++c) out.at(r, c) /= s;
  }
  const std::size_t ix = x.id();
  return tape.record("softmax", std::move(out), {ix}, [ix, m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& y = t.value(self);
    Tensor gx(Shape{m, n});
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += g.at(r, c) * y.at(r, c);
      for (std::size_t c = 0; c < n; ++c) gx.at(r, c) = y.at(r, c) * (g.at(r, c) - dot);
    }
    t.accumulate(ix, std::move(gx));
  });
}

Var gather_cols(Var x, std::span<const std::size_t> index) {
  Tape& tape = tape_of(x);
  const Tensor& v = x.value();
  require_rank2(v, "gather_cols");
  const std::size_t m = v.rows(), n = v.cols();
  if (index.size() != m) throw ValidationError("gather_cols: index length does not match row count");
  std::vector<std::size_t> idx(index.begin(), index.end());
  Tensor out(Shape{m, 1});
  for (std::size_t r = 0; r < m; ++r) {
    if (idx[r] >= n) throw ValidationError("gather_cols: index out of range");
    out[r] = v.at(r, idx[r]);
  }
  const std::size_t ix = x.id();
  return tape.record("gather", std::move(out), {ix}, [ix, m, n, idx = std::move(idx)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor gx(Shape{m, n});
    for (std::size_t r = 0; r < m; ++r) gx.at(r, idx[r]) = g[r];
    t.accumulate(ix, std::move(gx));
  });
}

Var select_cols(Var x, std::span<const std::size_t> cols) {
  Tape& tape = tape_of(x);
  const Tensor& v = x.value();
  require_rank2(v, "select_cols");
  const std::size_t m = v.rows(), n = v.cols(), k = cols.size();
  std::vector<std::size_t> sel(cols.begin(), cols.end());
  Tensor out(Shape{m, k});
  for (std::size_t c : sel)
    if (c >= n) throw ValidationError("select_cols: column index out of range");
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < k; ++j) out.at(r, j) = v.at(r, sel[j]);
  const std::size_t ix = x.id();
  return tape.record("select_cols", std::move(out), {ix}, [ix, m, n, k, sel = std::move(sel)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor gx(Shape{m, n});
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < k; ++j) gx.at(r, sel[j]) += g.at(r, j);
    t.accumulate(ix, std::move(gx));
  });
}

Var select_rows(Var x, std::span<const std::size_t> rows) {
  Tape& tape = tape_of(x);
  const Tensor& v = x.value();
  require_rank2(v, "select_rows");
  const std::size_t m = v.rows(), n = v.cols(), k = rows.size();
  std::vector<std::size_t> sel(rows.begin(), rows.end());
  Tensor out(Shape{k, n});
  for (std::size_t i = 0; i < k; ++i) {
    if (sel[i] >= m) throw ValidationError("select_rows: row index out of range");
    std::copy_n(v.data().begin() + static_cast<std::ptrdiff_t>(sel[i] * n), n,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  const std::size_t ix = x.id();
  return tape.record("select_rows", std::move(out), {ix}, [ix, m, n, k, sel = std::move(sel)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor gx(Shape{m, n});
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t c = 0; c < n; ++c) gx.at(sel[i], c) += g.at(i, c);
    t.accumulate(ix, std::move(gx));
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ValidationError("concat_cols of zero tensors");
  Tape& tape = tape_of(parts[0]);
  const std::size_t m = parts[0].value().rows();
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (&tape_of(p) != &tape) throw ValidationError("concat_cols: operands on different tapes");
    require_rank2(p.value(), "concat_cols");
    if (p.value().rows() != m) throw ValidationError("concat_cols: row counts differ");
    widths.push_back(p.value().cols());
    ids.push_back(p.id());
    total += p.value().cols();
  }
  Tensor out(Shape{m, total});
  std::size_t off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& v = parts[i].value();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < widths[i]; ++c) out.at(r, off + c) = v.at(r, c);
    off += widths[i];
  }
  return tape.record("concat_cols", std::move(out), ids, [ids, widths, m, total](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    std::size_t off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.requires_grad(ids[i])) {
        Tensor gi(Shape{m, widths[i]});
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < widths[i]; ++c) gi.at(r, c) = g.at(r, off + c);
        t.accumulate(ids[i], gi);
      }
      off += widths[i];
    }
    (void)total;
  });
}

Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

Var reshape(Var x, Shape shape) {
  Tape& tape = tape_of(x);
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return tape.record("reshape", std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
    t.accumulate(ix, t.grad_of(self).reshaped(t.value(ix).shape()));
  });
}

Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes) {
  Tensor out(Shape{labels.size(), classes});
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= classes) throw ValidationError("one_hot: label out of range");
    out.at(r, labels[r]) = 1.0;
  }
  return out;
}

}  // namespace snf
