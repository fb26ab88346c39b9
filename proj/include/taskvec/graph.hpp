#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "taskvec/rng.hpp"
#include "taskvec/tensor.hpp"

namespace taskvec {

class Graph;

// Lightweight handle to a recorded node. Cheap to copy; only valid for the
// lifetime of the owning Graph.
struct Var {
  Graph* graph = nullptr;
  int index = -1;

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
};

// Extension point for fused operations recorded on the tape. forward() runs
// when the node is built; backward() receives the upstream adjoint and must
// accumulate into input_grads (entries are null for non-differentiable
// inputs).
class CustomOp {
 public:
  virtual ~CustomOp() = default;
  virtual std::string name() const = 0;
  virtual Tensor forward(const std::vector<const Tensor*>& inputs) = 0;
  virtual void backward(const Tensor& upstream, const Tensor& value,
                        const std::vector<const Tensor*>& inputs,
                        const std::vector<Tensor*>& input_grads) = 0;
};

// Reverse-mode tape over dense double tensors. Recording is eager: each op
// computes its value immediately and appends one node, so tape order is
// topological by construction. Nodes live in a deque, so references returned
// by value()/grad() stay valid while more ops are recorded. Single-threaded
// per instance.
class Graph {
 public:
  enum class Op {
    kLeaf,
    kConstant,
    kAdd,
    kMul,
    kMatmul,
    kNeg,
    kExp,
    kLog,
    kSigmoid,
    kTanh,
    kRelu,
    kAbs,
    kClamp,
    kAffine,
    kSum,
    kMean,
    kL2Norm,
    kSoftmaxXent,
    kCustom,
  };

  Var leaf(Tensor value);
  Var constant(Tensor value);
  Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  // Elementwise with limited broadcasting: equal shapes, a 1-element operand,
  // or a 1-D row vector against the columns of a 2-D operand.
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var sub(Var a, Var b) { return add(a, neg(b)); }

  Var matmul(Var a, Var b);

  Var neg(Var x);
  Var exp(Var x);
  Var log(Var x);
  Var sigmoid(Var x);
  Var tanh(Var x);
  Var relu(Var x);
  Var abs(Var x);
  Var clamp(Var x, double lo, double hi);
  // a*x + b, elementwise with scalar constants.
  Var affine(Var x, double a, double b);

  Var sum(Var x);
  Var mean(Var x);
  Var l2norm(Var x);

  // Per-sample cross entropy of row-wise softmax against integer labels:
  // logits (B, C) -> (B,). Nonnegative; zero only for a point mass on the
  // label.
  Var softmax_cross_entropy(Var logits, const std::vector<int>& labels);

  Var custom(std::shared_ptr<CustomOp> op, const std::vector<Var>& inputs);

  // Reverse-mode sweep from a scalar loss. Resets all adjoints first, so the
  // same graph may be swept repeatedly from different losses.
  void backward(Var loss);

  const Tensor& value(int index) const { return nodes_[index].value; }
  const Tensor& grad(int index) const;
  bool requires_grad(int index) const { return nodes_[index].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Op op;
    std::vector<int> inputs;
    bool requires_grad = false;
    double p0 = 0.0, p1 = 0.0;
    Tensor value;
    Tensor grad;
    bool grad_live = false;
    std::vector<int> labels;
    std::shared_ptr<CustomOp> custom;
  };

  enum class Bcast { kSame, kScalarRight, kScalarLeft, kRowRight };

  Var push(Node node);
  Var unary(Op op, Var x, double p0 = 0.0, double p1 = 0.0);
  Var binary(Op op, Var a, Var b);
  static Bcast broadcast_mode(const Tensor& a, const Tensor& b, const char* what);
  void check_finite(const Tensor& t, const char* what) const;
  Tensor& grad_buffer(int index);
  void backward_node(int index);

  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(index); }
inline const Tensor& Var::grad() const { return graph->grad(index); }

inline Var operator+(Var a, Var b) { return a.graph->add(a, b); }
inline Var operator-(Var a, Var b) { return a.graph->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.graph->mul(a, b); }
inline Var operator-(Var x) { return x.graph->neg(x); }

// Reparameterized Gaussian draw: mu + exp(clamp(log_var)/2) * eps with
// eps ~ N(0, 1) recorded as a constant, so gradients reach mu and log_var.
// log_var is clamped to [-10, 10] before exponentiation.
Var sample_gaussian_reparam(Graph& g, Var mu, Var log_var, RngStream& rng);

// Max over coordinates of |reverse-mode - central difference| /
// max(1, |reverse-mode| + |central difference|). fn must be a pure function
// of the leaf it is handed.
double grad_check(const std::function<Var(Graph&, Var)>& fn, const Tensor& x,
                  double eps);

}  // namespace taskvec
