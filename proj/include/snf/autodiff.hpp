#pragma once

// Reverse-mode automatic differentiation over dense float64 tensors.
//
// A Tape records every operation applied to Vars created from it. Nodes are
// appended in evaluation order, so the node vector is already a topological
// order and the backward sweep is a single reverse pass over it.
//
//   Tape tape;
//   Var w = tape.leaf(weights);
//   Var loss = sum(square(matmul(x, w)));
//   std::vector<Tensor> g = tape.grad(loss, {w});
//
// Broadcasting is deliberately narrow: equal shapes, a size-1 operand, a
// (1 x n) row against (m x n), or an (m x 1) column against (m x n). Anything
// else raises ValidationError.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "snf/tensor.hpp"

namespace snf {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Gradients of a scalar loss with respect to each of `params`. Parameters
  // that do not influence the loss get zero tensors of matching shape.
  std::vector<Tensor> grad(Var loss, std::span<const Var> params);
  std::vector<Tensor> grad(Var loss, std::initializer_list<Var> params) {
    return grad(loss, std::span<const Var>(params.begin(), params.size()));
  }

  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::string& op(std::size_t id) const { return nodes_[id].op; }

  // Used by op implementations.
  Var record(std::string op, Tensor value, std::vector<std::size_t> inputs, Backward backward);
  const Tensor& grad_of(std::size_t id) const { return grads_[id]; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  void accumulate(std::size_t id, const Tensor& g);
  void accumulate(std::size_t id, Tensor&& g);

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<std::size_t> inputs;
    Backward backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<bool> has_grad_;
};

// Elementwise binary ops with the broadcasting rules above.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator+(Var a, double c);
Var operator+(double c, Var a);
Var operator-(Var a, double c);
Var operator-(double c, Var a);
Var operator*(Var a, double c);
Var operator*(double c, Var a);
Var operator/(Var a, double c);

Var matmul(Var a, Var b);
// x W + b with b (1 x out) broadcast over rows; one node instead of three.
Var affine(Var x, Var w, Var b);
Var transpose(Var a);

Var exp(Var x);
Var log(Var x);
Var tanh(Var x);
Var relu(Var x);
Var softplus(Var x);
Var sigmoid(Var x);
Var square(Var x);
Var sqrt(Var x);
Var pow(Var x, double p);
// Values clipped into [lo, hi]; zero gradient where clipping is active.
Var clamp(Var x, double lo, double hi);

Var sum(Var x);
// axis 0 -> (1 x cols), axis 1 -> (rows x 1)
Var sum(Var x, int axis);
Var mean(Var x);
Var mean(Var x, int axis);
// Row-wise reductions over the last axis of a rank-2 tensor.
Var logsumexp_rows(Var x);
Var softmax_rows(Var x);

// out[r] = x[r, index[r]], shape (rows x 1).
Var gather_cols(Var x, std::span<const std::size_t> index);
Var select_cols(Var x, std::span<const std::size_t> cols);
Var select_rows(Var x, std::span<const std::size_t> rows);
Var concat_cols(std::span<const Var> parts);
Var concat_cols(std::initializer_list<Var> parts);
Var reshape(Var x, Shape shape);

Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes);

}  // namespace snf
