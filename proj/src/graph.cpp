#include "taskvec/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>

namespace taskvec {
namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var Graph::push(Node node) {
  const int index = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(node));
  return Var{this, index};
}

void Graph::check_finite(const Tensor& t, const char* what) const {
  if (!t.all_finite()) {
    throw NumericError(std::string(what) + " produced a non-finite value");
  }
}

Var Graph::leaf(Tensor value) {
  check_finite(value, "leaf");
  Node n;
  n.op = Op::kLeaf;
  n.requires_grad = true;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::constant(Tensor value) {
  check_finite(value, "constant");
  Node n;
  n.op = Op::kConstant;
  n.requires_grad = false;
  n.value = std::move(value);
  return push(std::move(n));
}

Graph::Bcast Graph::broadcast_mode(const Tensor& a, const Tensor& b,
                                   const char* what) {
  if (a.same_shape(b)) return Bcast::kSame;
  if (b.numel() == 1) return Bcast::kScalarRight;
  if (a.numel() == 1) return Bcast::kScalarLeft;
  if (a.ndim() == 2 && b.ndim() == 1 && b.dim(0) == a.dim(1)) {
    return Bcast::kRowRight;
  }
  throw ShapeError(std::string(what) + ": incompatible shapes " +
                   shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

Var Graph::binary(Op op, Var a, Var b) {
  const Tensor& av = nodes_[a.index].value;
  const Tensor& bv = nodes_[b.index].value;
  const char* what = op == Op::kAdd ? "add" : "mul";
  const Bcast mode = broadcast_mode(av, bv, what);

  Node n;
  n.op = op;
  n.inputs = {a.index, b.index};
  n.requires_grad =
      nodes_[a.index].requires_grad || nodes_[b.index].requires_grad;

  const Tensor& big = mode == Bcast::kScalarLeft ? bv : av;
  Tensor out(big.shape());
  const std::size_t m = big.numel();
  if (op == Op::kAdd) {
    switch (mode) {
      case Bcast::kSame:
        for (std::size_t i = 0; i < m; ++i) out[i] = av[i] + bv[i];
        break;
      case Bcast::kScalarRight:
        for (std::size_t i = 0; i < m; ++i) out[i] = av[i] + bv[0];
        break;
      case Bcast::kScalarLeft:
        for (std::size_t i = 0; i < m; ++i) out[i] = av[0] + bv[i];
        break;
      case Bcast::kRowRight: {
        const std::size_t cols = static_cast<std::size_t>(av.dim(1));
        for (std::size_t i = 0; i < m; ++i) out[i] = av[i] + bv[i % cols];
        break;
      }
    }
  } else {
    switch (mode) {
      case Bcast::kSame:
        for (std::size_t i = 0; i < m; ++i) out[i] = av[i] * bv[i];
        break;
      case Bcast::kScalarRight:
        for (std::size_t i = 0; i < m; ++i) out[i] = av[i] * bv[0];
        break;
      case Bcast::kScalarLeft:
        for (std::size_t i = 0; i < m; ++i) out[i] = av[0] * bv[i];
        break;
      case Bcast::kRowRight: {
        const std::size_t cols = static_cast<std::size_t>(av.dim(1));
        for (std::size_t i = 0; i < m; ++i) out[i] = av[i] * bv[i % cols];
        break;
      }
    }
  }
  check_finite(out, what);
  n.value = std::move(out);
  return push(std::move(n));
}

Var Graph::add(Var a, Var b) { return binary(Op::kAdd, a, b); }
Var Graph::mul(Var a, Var b) { return binary(Op::kMul, a, b); }

Var Graph::matmul(Var a, Var b) {
  const Tensor& av = nodes_[a.index].value;
  const Tensor& bv = nodes_[b.index].value;
  if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) +
                     " and " + shape_str(bv.shape()));
  }
  const std::size_t rows = static_cast<std::size_t>(av.dim(0));
  const std::size_t inner = static_cast<std::size_t>(av.dim(1));
  const std::size_t cols = static_cast<std::size_t>(bv.dim(1));

  Tensor out({av.dim(0), bv.dim(1)});
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t k = 0; k < inner; ++k) {
      const double aik = av[i * inner + k];
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < cols; ++j) {
        out[i * cols + j] += aik * bv[k * cols + j];
      }
    }
  }
  check_finite(out, "matmul");

  Node n;
  n.op = Op::kMatmul;
  n.inputs = {a.index, b.index};
  n.requires_grad =
      nodes_[a.index].requires_grad || nodes_[b.index].requires_grad;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Graph::unary(Op op, Var x, double p0, double p1) {
  const Tensor& xv = nodes_[x.index].value;
  Node n;
  n.op = op;
  n.inputs = {x.index};
  n.requires_grad = nodes_[x.index].requires_grad;
  n.p0 = p0;
  n.p1 = p1;

  const char* what = "unary";
  switch (op) {
    case Op::kNeg: {
      what = "neg";
      Tensor out(xv.shape());
      for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = -xv[i];
      n.value = std::move(out);
      break;
    }
    case Op::kExp: {
      what = "exp";
      Tensor out(xv.shape());
      for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = std::exp(xv[i]);
      n.value = std::move(out);
      break;
    }
    case Op::kLog: {
      what = "log";
      Tensor out(xv.shape());
      for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = std::log(xv[i]);
      n.value = std::move(out);
      break;
    }
    case Op::kSigmoid: {
      what = "sigmoid";
      Tensor out(xv.shape());
      for (std::size_t i = 0; i < xv.numel(); ++i) {
        out[i] = stable_sigmoid(xv[i]);
      }
      n.value = std::move(out);
      break;
    }
    case Op::kTanh: {
      what = "tanh";
      Tensor out(xv.shape());
      for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = std::tanh(xv[i]);
      n.value = std::move(out);
      break;
    }
    case Op::kRelu: {
      what = "relu";
      Tensor out(xv.shape());
      for (std::size_t i = 0; i < xv.numel(); ++i) {
        out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
      }
      n.value = std::move(out);
      break;
    }
    case Op::kAbs: {
      what = "abs";
      Tensor out(xv.shape());
      for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = std::fabs(xv[i]);
      n.value = std::move(out);
      break;
    }
    case Op::kClamp: {
      what = "clamp";
      Tensor out(xv.shape());
      for (std::size_t i = 0; i < xv.numel(); ++i) {
        out[i] = std::clamp(xv[i], p0, p1);
      }
      n.value = std::move(out);
      break;
    }
    case Op::kAffine: {
      what = "affine";
      Tensor out(xv.shape());
      for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = p0 * xv[i] + p1;
      n.value = std::move(out);
      break;
    }
    case Op::kSum: {
      what = "sum";
      double acc = 0.0;
      for (std::size_t i = 0; i < xv.numel(); ++i) acc += xv[i];
      n.value = Tensor::scalar(acc);
      break;
    }
    case Op::kMean: {
      what = "mean";
      double acc = 0.0;
      for (std::size_t i = 0; i < xv.numel(); ++i) acc += xv[i];
      n.value = Tensor::scalar(acc / static_cast<double>(xv.numel()));
      break;
    }
    case Op::kL2Norm: {
      what = "l2norm";
      double acc = 0.0;
      for (std::size_t i = 0; i < xv.numel(); ++i) acc += xv[i] * xv[i];
      n.value = Tensor::scalar(std::sqrt(acc));
      break;
    }
    default:
      throw std::logic_error("unary: unexpected op");
  }
  check_finite(n.value, what);
  return push(std::move(n));
}

Var Graph::neg(Var x) { return unary(Op::kNeg, x); }
Var Graph::exp(Var x) { return unary(Op::kExp, x); }
Var Graph::log(Var x) { return unary(Op::kLog, x); }
Var Graph::sigmoid(Var x) { return unary(Op::kSigmoid, x); }
Var Graph::tanh(Var x) { return unary(Op::kTanh, x); }
Var Graph::relu(Var x) { return unary(Op::kRelu, x); }
Var Graph::abs(Var x) { return unary(Op::kAbs, x); }

Var Graph::clamp(Var x, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must be <= hi");
  return unary(Op::kClamp, x, lo, hi);
}

Var Graph::affine(Var x, double a, double b) {
  return unary(Op::kAffine, x, a, b);
}

Var Graph::sum(Var x) { return unary(Op::kSum, x); }
Var Graph::mean(Var x) { return unary(Op::kMean, x); }
Var Graph::l2norm(Var x) { return unary(Op::kL2Norm, x); }

Var Graph::softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
  const Tensor& lv = nodes_[logits.index].value;
  if (lv.ndim() != 2) {
    throw ShapeError("softmax_cross_entropy: logits must be 2-D, got " +
                     shape_str(lv.shape()));
  }
  const std::size_t batch = static_cast<std::size_t>(lv.dim(0));
  const std::size_t classes = static_cast<std::size_t>(lv.dim(1));
  if (labels.size() != batch) {
    throw ShapeError("softmax_cross_entropy: got " +
                     std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(batch));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::invalid_argument("softmax_cross_entropy: label out of range");
    }
  }

  Tensor out({lv.dim(0)});
  for (std::size_t i = 0; i < batch; ++i) {
    const double* row = lv.data() + i * classes;
    double hi = row[0];
    for (std::size_t j = 1; j < classes; ++j) hi = std::max(hi, row[j]);
    double acc = 0.0;
    for (std::size_t j = 0; j < classes; ++j) acc += std::exp(row[j] - hi);
    const double lse = hi + std::log(acc);
    out[i] = lse - row[static_cast<std::size_t>(labels[i])];
  }
  check_finite(out, "softmax_cross_entropy");

  Node n;
  n.op = Op::kSoftmaxXent;
  n.inputs = {logits.index};
  n.requires_grad = nodes_[logits.index].requires_grad;
  n.labels = labels;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Graph::custom(std::shared_ptr<CustomOp> op, const std::vector<Var>& inputs) {
  if (!op) throw std::invalid_argument("custom: null op");
  Node n;
  n.op = Op::kCustom;
  std::vector<const Tensor*> views;
  views.reserve(inputs.size());
  for (Var v : inputs) {
    if (v.graph != this) {
      throw std::invalid_argument("custom: input from a different graph");
    }
    n.inputs.push_back(v.index);
    n.requires_grad = n.requires_grad || nodes_[v.index].requires_grad;
    views.push_back(&nodes_[v.index].value);
  }
  n.value = op->forward(views);
  check_finite(n.value, op->name().c_str());
  n.custom = std::move(op);
  return push(std::move(n));
}

const Tensor& Graph::grad(int index) const {
  const Node& n = nodes_[index];
  if (!n.requires_grad) {
    throw std::logic_error("grad: node does not require gradients");
  }
  if (!n.grad_live) {
    throw std::logic_error("grad: backward has not reached this node");
  }
  return n.grad;
}

Tensor& Graph::grad_buffer(int index) {
  Node& n = nodes_[index];
  if (!n.grad_live) {
    n.grad = Tensor(n.value.shape());
    n.grad_live = true;
  }
  return n.grad;
}

void Graph::backward(Var loss) {
  if (loss.graph != this) {
    throw std::invalid_argument("backward: loss from a different graph");
  }
  Node& root = nodes_[loss.index];
  if (!root.value.is_scalar()) {
    throw ShapeError("backward: loss must be scalar, got " +
                     shape_str(root.value.shape()));
  }
  if (!root.requires_grad) {
    throw std::logic_error("backward: loss does not depend on any leaf");
  }
  for (Node& n : nodes_) n.grad_live = false;
  grad_buffer(loss.index)[0] = 1.0;
  for (int i = loss.index; i >= 0; --i) {
    backward_node(i);
  }
  // Leaves the sweep never reached have zero gradient, not an error.
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.op == Op::kLeaf && !n.grad_live) {
      grad_buffer(static_cast<int>(i));
    }
  }
}

void Graph::backward_node(int index) {
  Node& n = nodes_[index];
  if (!n.grad_live || !n.requires_grad) return;
  if (n.op == Op::kLeaf || n.op == Op::kConstant) return;
  const Tensor& up = n.grad;

  auto wants = [&](int in) { return nodes_[in].requires_grad; };

  switch (n.op) {
    case Op::kAdd:
    case Op::kMul: {
      const int ia = n.inputs[0];
      const int ib = n.inputs[1];
      const Tensor& av = nodes_[ia].value;
      const Tensor& bv = nodes_[ib].value;
      const Bcast mode = broadcast_mode(av, bv, "add");
      const bool is_mul = n.op == Op::kMul;
      const std::size_t m = up.numel();

      if (wants(ia)) {
        Tensor& ga = grad_buffer(ia);
        switch (mode) {
          case Bcast::kSame:
          case Bcast::kScalarRight:
            for (std::size_t i = 0; i < m; ++i) {
              double g = up[i];
              if (is_mul) g *= mode == Bcast::kSame ? bv[i] : bv[0];
              ga[i] += g;
            }
            break;
          case Bcast::kScalarLeft:
            for (std::size_t i = 0; i < m; ++i) {
              ga[0] += is_mul ? up[i] * bv[i] : up[i];
            }
            break;
          case Bcast::kRowRight: {
            const std::size_t cols = static_cast<std::size_t>(av.dim(1));
            for (std::size_t i = 0; i < m; ++i) {
              ga[i] += is_mul ? up[i] * bv[i % cols] : up[i];
            }
            break;
          }
        }
      }
      if (wants(ib)) {
        Tensor& gb = grad_buffer(ib);
        switch (mode) {
          case Bcast::kSame:
          case Bcast::kScalarLeft:
            for (std::size_t i = 0; i < m; ++i) {
              double g = up[i];
              if (is_mul) g *= mode == Bcast::kSame ? av[i] : av[0];
              gb[i] += g;
            }
            break;
          case Bcast::kScalarRight:
            for (std::size_t i = 0; i < m; ++i) {
              gb[0] += is_mul ? up[i] * av[i] : up[i];
            }
            break;
          case Bcast::kRowRight: {
            const std::size_t cols = static_cast<std::size_t>(av.dim(1));
            for (std::size_t i = 0; i < m; ++i) {
              gb[i % cols] += is_mul ? up[i] * av[i] : up[i];
            }
            break;
          }
        }
      }
      break;
    }
    case Op::kMatmul: {
      const int ia = n.inputs[0];
      const int ib = n.inputs[1];
      const Tensor& av = nodes_[ia].value;
      const Tensor& bv = nodes_[ib].value;
      const std::size_t rows = static_cast<std::size_t>(av.dim(0));
      const std::size_t inner = static_cast<std::size_t>(av.dim(1));
      const std::size_t cols = static_cast<std::size_t>(bv.dim(1));
      if (wants(ia)) {
        Tensor& ga = grad_buffer(ia);  // up (r,c) @ b^T (c,k)
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < cols; ++j) {
            const double u = up[i * cols + j];
            if (u == 0.0) continue;
            for (std::size_t k = 0; k < inner; ++k) {
              ga[i * inner + k] += u * bv[k * cols + j];
            }
          }
        }
      }
      if (wants(ib)) {
        Tensor& gb = grad_buffer(ib);  // a^T (k,r) @ up (r,c)
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t k = 0; k < inner; ++k) {
            const double a = av[i * inner + k];
            if (a == 0.0) continue;
            for (std::size_t j = 0; j < cols; ++j) {
              gb[k * cols + j] += a * up[i * cols + j];
            }
          }
        }
      }
      break;
    }
    case Op::kNeg: {
      Tensor& gx = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < up.numel(); ++i) gx[i] -= up[i];
      break;
    }
    case Op::kExp: {
      Tensor& gx = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < up.numel(); ++i) gx[i] += up[i] * n.value[i];
      break;
    }
    case Op::kLog: {
      const Tensor& xv = nodes_[n.inputs[0]].value;
      Tensor& gx = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < up.numel(); ++i) gx[i] += up[i] / xv[i];
      break;
    }
    case Op::kSigmoid: {
      Tensor& gx = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < up.numel(); ++i) {
        const double s = n.value[i];
        gx[i] += up[i] * s * (1.0 - s);
      }
      break;
    }
    case Op::kTanh: {
      Tensor& gx = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < up.numel(); ++i) {
        const double t = n.value[i];
        gx[i] += up[i] * (1.0 - t * t);
      }
      break;
    }
    case Op::kRelu: {
      const Tensor& xv = nodes_[n.inputs[0]].value;
      Tensor& gx = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < up.numel(); ++i) {
        if (xv[i] > 0.0) gx[i] += up[i];
      }
      break;
    }
    case Op::kAbs: {
      const Tensor& xv = nodes_[n.inputs[0]].value;
      Tensor& gx = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < up.numel(); ++i) {
        if (xv[i] > 0.0) {
          gx[i] += up[i];
        } else if (xv[i] < 0.0) {
          gx[i] -= up[i];
        }
      }
      break;
    }
    case Op::kClamp: {
      const Tensor& xv = nodes_[n.inputs[0]].value;
      Tensor& gx = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < up.numel(); ++i) {
        if (xv[i] >= n.p0 && xv[i] <= n.p1) gx[i] += up[i];
      }
      break;
    }
    case Op::kAffine: {
      Tensor& gx = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < up.numel(); ++i) gx[i] += up[i] * n.p0;
      break;
    }
    case Op::kSum: {
      Tensor& gx = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += up[0];
      break;
    }
    case Op::kMean: {
      Tensor& gx = grad_buffer(n.inputs[0]);
      const double scale = up[0] / static_cast<double>(gx.numel());
      for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += scale;
      break;
    }
    case Op::kL2Norm: {
      const Tensor& xv = nodes_[n.inputs[0]].value;
      Tensor& gx = grad_buffer(n.inputs[0]);
      const double norm = n.value[0];
      if (norm > 0.0) {
        const double scale = up[0] / norm;
        for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += scale * xv[i];
      }
      break;
    }
    case Op::kSoftmaxXent: {
      const Tensor& lv = nodes_[n.inputs[0]].value;
      Tensor& gx = grad_buffer(n.inputs[0]);
      const std::size_t batch = static_cast<std::size_t>(lv.dim(0));
      const std::size_t classes = static_cast<std::size_t>(lv.dim(1));
      for (std::size_t i = 0; i < batch; ++i) {
        const double* row = lv.data() + i * classes;
        double hi = row[0];
        for (std::size_t j = 1; j < classes; ++j) hi = std::max(hi, row[j]);
        double acc = 0.0;
        for (std::size_t j = 0; j < classes; ++j) acc += std::exp(row[j] - hi);
        const double u = up[i];
        for (std::size_t j = 0; j < classes; ++j) {
          double p = std::exp(row[j] - hi) / acc;
          if (static_cast<int>(j) == n.labels[i]) p -= 1.0;
          gx[i * classes + j] += u * p;
        }
      }
      break;
    }
    case Op::kCustom: {
      std::vector<const Tensor*> views;
      std::vector<Tensor*> grads;
      views.reserve(n.inputs.size());
      grads.reserve(n.inputs.size());
      for (int in : n.inputs) {
        views.push_back(&nodes_[in].value);
        grads.push_back(wants(in) ? &grad_buffer(in) : nullptr);
      }
      n.custom->backward(up, n.value, views, grads);
      break;
    }
    case Op::kLeaf:
    case Op::kConstant:
      break;
  }
}

Var sample_gaussian_reparam(Graph& g, Var mu, Var log_var, RngStream& rng) {
  const Shape& shape = mu.value().shape();
  if (!log_var.value().same_shape(mu.value())) {
    throw ShapeError("sample_gaussian_reparam: mu " + shape_str(shape) +
                     " vs log_var " + shape_str(log_var.value().shape()));
  }
  Tensor eps(shape);
  for (std::size_t i = 0; i < eps.numel(); ++i) eps[i] = rng.normal();
  Var sigma = g.exp(g.affine(g.clamp(log_var, -10.0, 10.0), 0.5, 0.0));
  return g.add(mu, g.mul(sigma, g.constant(std::move(eps))));
}

double grad_check(const std::function<Var(Graph&, Var)>& fn, const Tensor& x,
                  double eps) {
  Graph g;
  Var input = g.leaf(x);
  Var loss = fn(g, input);
  if (!loss.value().is_scalar()) {
    throw ShapeError("grad_check: fn must return a scalar");
  }
  g.backward(loss);
  const Tensor analytic = input.grad();

  auto eval = [&](const Tensor& point) {
    Graph h;
    Var v = h.leaf(point);
    return fn(h, v).value()[0];
  };

  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + eps;
    const double hi = eval(probe);
    probe[i] = saved - eps;
    const double lo = eval(probe);
    probe[i] = saved;
    const double fd = (hi - lo) / (2.0 * eps);
    const double a = analytic[i];
    const double rel =
        std::fabs(a - fd) / std::max(1.0, std::fabs(a) + std::fabs(fd));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace taskvec
