#include "taskvec/gating.hpp"

#include <cmath>
#include <stdexcept>

namespace taskvec {
namespace {

constexpr double kEpsV = 1e-8;

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

void GateParams::validate() const {
  if (!(rho > 0.0)) throw std::invalid_argument("GateParams: rho must be > 0");
  if (!(eta >= 0.0 && eta <= 1.0)) {
    throw std::invalid_argument("GateParams: eta must lie in [0,1]");
  }
  if (!(psi1 >= 0.0)) {
    throw std::invalid_argument("GateParams: psi1 must be >= 0");
  }
}

Tensor gradient_sensitivity_batch(const Tensor& x_batch,
                                  const InferenceNet& net) {
  if (x_batch.ndim() != 2 ||
      static_cast<std::size_t>(x_batch.dim(1)) != net.input_dim()) {
    throw ShapeError("gradient_sensitivity: x must be (B, " +
                     std::to_string(net.input_dim()) + ")");
  }
  const std::size_t batch = static_cast<std::size_t>(x_batch.dim(0));
  const std::size_t d = net.input_dim();
  const std::size_t h = net.hidden_dim();
  const std::size_t c = net.head_size();
  const Tensor& enc_w = net.weights().tensor("enc.W");  // (d, h)
  const Tensor& enc_b = net.weights().tensor("enc.b");  // (h)
  const Tensor& mu_w = net.weights().tensor("mu.W");    // (h, c)

  Tensor out({static_cast<std::int64_t>(batch), static_cast<std::int64_t>(c)});
  std::vector<double> act(h);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* x = x_batch.data() + b * d;
    for (std::size_t j = 0; j < h; ++j) {
      double pre = enc_b[j];
      for (std::size_t i = 0; i < d; ++i) pre += x[i] * enc_w[i * h + j];
      const double t = std::tanh(pre);
      act[j] = 1.0 - t * t;  // tanh'(pre)
    }
    // d mu_k / d x_i = sum_j enc_w[i,j] * act[j] * mu_w[j,k]
    for (std::size_t k = 0; k < c; ++k) {
      double norm_sq = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        double g = 0.0;
        for (std::size_t j = 0; j < h; ++j) {
          g += enc_w[i * h + j] * act[j] * mu_w[j * c + k];
        }
        norm_sq += g * g;
      }
      out[b * c + k] = std::sqrt(norm_sq);
    }
  }
  if (!out.all_finite()) {
    throw NumericError("gradient_sensitivity: non-finite sensitivities");
  }
  return out;
}

Tensor gradient_sensitivity(const Tensor& x, const InferenceNet& net) {
  Tensor row({1, static_cast<std::int64_t>(x.numel())}, x.vec());
  Tensor flat = gradient_sensitivity_batch(row, net);
  return Tensor({static_cast<std::int64_t>(net.n_tasks()),
                 static_cast<std::int64_t>(net.n_blocks())},
                flat.vec());
}

BatchStats batch_stats(const Tensor& z_batch) {
  if (z_batch.ndim() != 2 || z_batch.dim(0) < 1) {
    throw ShapeError("batch_stats: expected a (B, C) batch");
  }
  const std::size_t b = static_cast<std::size_t>(z_batch.dim(0));
  const std::size_t c = static_cast<std::size_t>(z_batch.dim(1));
  BatchStats st{Tensor({static_cast<std::int64_t>(c)}),
                Tensor({static_cast<std::int64_t>(c)})};
  for (std::size_t j = 0; j < c; ++j) {
    double sum = 0.0;
    for (std::size_t i = 0; i < b; ++i) sum += z_batch[i * c + j];
    const double mean = sum / static_cast<double>(b);
    double var = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      const double d = z_batch[i * c + j] - mean;
      var += d * d;
    }
    st.mean[j] = mean;
    st.std[j] = std::sqrt(var / static_cast<double>(b));
  }
  return st;
}

Tensor distributional_deviation(const Tensor& z_batch,
                                const BatchStats& stats) {
  if (z_batch.ndim() != 2 ||
      z_batch.dim(1) != stats.mean.dim(0)) {
    throw ShapeError("distributional_deviation: batch/stats mismatch");
  }
  const std::size_t b = static_cast<std::size_t>(z_batch.dim(0));
  const std::size_t c = static_cast<std::size_t>(z_batch.dim(1));
  Tensor v(z_batch.shape());
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      v[i * c + j] = std::fabs(z_batch[i * c + j] - stats.mean[j]) /
                     (stats.std[j] + kEpsV);
    }
  }
  return v;
}

Tensor distributional_deviation(const Tensor& z_batch) {
  return distributional_deviation(z_batch, batch_stats(z_batch));
}

void EmaStats::update(const BatchStats& batch) {
  if (!initialized) {
    mean = batch.mean;
    std = batch.std;
    initialized = true;
    return;
  }
  for (std::size_t i = 0; i < mean.numel(); ++i) {
    mean[i] = decay * mean[i] + (1.0 - decay) * batch.mean[i];
    std[i] = decay * std[i] + (1.0 - decay) * batch.std[i];
  }
}

Tensor uncertainty(const Tensor& s, const Tensor& v, double eta) {
  check_same_shape(s, v, "uncertainty");
  if (!(eta >= 0.0 && eta <= 1.0)) {
    throw std::invalid_argument("uncertainty: eta must lie in [0,1]");
  }
  Tensor u(s.shape());
  for (std::size_t i = 0; i < u.numel(); ++i) {
    u[i] = eta * s[i] + (1.0 - eta) * v[i];
  }
  return u;
}

Tensor threshold(const Tensor& u, const GateParams& gp) {
  gp.validate();
  Tensor gamma(u.shape());
  for (std::size_t i = 0; i < gamma.numel(); ++i) {
    gamma[i] = gp.psi1 * (1.0 + gp.psi2 * u[i]);
  }
  return gamma;
}

Tensor hard_gate(const Tensor& z, const Tensor& gamma) {
  check_same_shape(z, gamma, "hard_gate");
  Tensor out(z.shape());
  for (std::size_t i = 0; i < z.numel(); ++i) {
    out[i] = std::fabs(z[i]) >= gamma[i] ? z[i] : 0.0;
  }
  return out;
}

Tensor soft_gate(const Tensor& z, const Tensor& gamma, double rho) {
  check_same_shape(z, gamma, "soft_gate");
  if (!(rho > 0.0)) throw std::invalid_argument("soft_gate: rho must be > 0");
  Tensor omega(z.shape());
  for (std::size_t i = 0; i < z.numel(); ++i) {
    omega[i] = sigmoid((std::fabs(z[i]) - gamma[i]) / rho);
  }
  return omega;
}

double boundary_loss(const Tensor& z, const Tensor& gamma, double margin) {
  check_same_shape(z, gamma, "boundary_loss");
  if (!(margin > 0.0)) {
    throw std::invalid_argument("boundary_loss: margin must be > 0");
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < z.numel(); ++i) {
    loss += std::max(0.0, margin - std::fabs(z[i] - gamma[i]));
  }
  return loss;
}

double exploration_loss(const GateParams& gp, double eps) {
  if (!(eps > 0.0)) {
    throw std::invalid_argument("exploration_loss: eps must be > 0");
  }
  return -std::log(std::fabs(gp.psi1 - gp.psi1_0) + eps) -
         std::log(std::fabs(gp.psi2 - gp.psi2_0) + eps);
}

double uncertainty_loss(const Tensor& u, const Tensor& gated) {
  check_same_shape(u, gated, "uncertainty_loss");
  double loss = 0.0;
  for (std::size_t i = 0; i < u.numel(); ++i) {
    if (gated[i] != 0.0) loss += u[i];
  }
  return loss;
}

double uncertainty_loss_soft(const Tensor& u, const Tensor& omega) {
  check_same_shape(u, omega, "uncertainty_loss_soft");
  double loss = 0.0;
  for (std::size_t i = 0; i < u.numel(); ++i) loss += u[i] * omega[i];
  return loss;
}

GateState compute_gate_state(const Tensor& z, const Tensor& s, const Tensor& v,
                             const GateParams& gp) {
  gp.validate();
  GateState state;
  state.S = s;
  state.V = v;
  state.U = uncertainty(s, v, gp.eta);
  state.Gamma = threshold(state.U, gp);
  state.Omega = soft_gate(z, state.Gamma, gp.rho);
  return state;
}

double reg_total(const Tensor& z, const GateState& state, const GateParams& gp,
                 const RegWeights& w) {
  if (w.lambda_b < 0.0 || w.lambda_e < 0.0 || w.lambda_u < 0.0) {
    throw std::invalid_argument("reg_total: weights must be >= 0");
  }
  const double lb = boundary_loss(z, state.Gamma, w.margin);
  const double le = exploration_loss(gp, w.eps);
  const double lu = uncertainty_loss(state.U, hard_gate(z, state.Gamma));
  return w.lambda_b * lb + w.lambda_e * le + w.lambda_u * lu;
}

double gated_ratio(const Tensor& gated) {
  if (gated.numel() == 0) {
    throw std::invalid_argument("gated_ratio: empty coefficient set");
  }
  std::size_t nonzero = 0;
  for (std::size_t i = 0; i < gated.numel(); ++i) {
    if (gated[i] != 0.0) ++nonzero;
  }
  return static_cast<double>(nonzero) / static_cast<double>(gated.numel());
}

Var threshold_graph(Graph& g, Var psi1, Var psi2, const Tensor& u) {
  Var scaled = g.mul(psi2, g.constant(u));           // psi2 * U
  return g.mul(psi1, g.affine(scaled, 1.0, 1.0));    // psi1 * (1 + psi2*U)
}

Var soft_gate_graph(Graph& g, Var z, Var gamma, double rho) {
  if (!(rho > 0.0)) {
    throw std::invalid_argument("soft_gate_graph: rho must be > 0");
  }
  return g.sigmoid(g.affine(g.sub(g.abs(z), gamma), 1.0 / rho, 0.0));
}

Var boundary_loss_graph(Graph& g, Var z, Var gamma, double margin) {
  if (!(margin > 0.0)) {
    throw std::invalid_argument("boundary_loss_graph: margin must be > 0");
  }
  return g.sum(g.relu(g.affine(g.abs(g.sub(z, gamma)), -1.0, margin)));
}

Var exploration_loss_graph(Graph& g, Var psi1, Var psi2, double psi1_0,
                           double psi2_0, double eps) {
  if (!(eps > 0.0)) {
    throw std::invalid_argument("exploration_loss_graph: eps must be > 0");
  }
  Var d1 = g.abs(g.affine(psi1, 1.0, -psi1_0));
  Var d2 = g.abs(g.affine(psi2, 1.0, -psi2_0));
  return g.add(g.neg(g.log(g.affine(d1, 1.0, eps))),
               g.neg(g.log(g.affine(d2, 1.0, eps))));
}

Var uncertainty_loss_soft_graph(Graph& g, const Tensor& u, Var omega) {
  return g.sum(g.mul(g.constant(u), omega));
}

}  // namespace taskvec
