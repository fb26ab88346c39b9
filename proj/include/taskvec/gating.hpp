#pragma once

#include "taskvec/graph.hpp"
#include "taskvec/inference_net.hpp"

namespace taskvec {

struct GateParams {
  double psi1 = 0.05;  // base threshold
  double psi2 = 1.0;   // uncertainty sensitivity
  double rho = 0.05;   // gate temperature
  double eta = 0.5;    // uncertainty mixing weight
  double psi1_0 = 0.05;
  double psi2_0 = 1.0;
  void validate() const;
};

struct RegWeights {
  double lambda_b = 1e-4;
  double lambda_e = 1e-3;
  double lambda_u = 1e-2;
  double margin = 0.1;
  double eps = 1e-5;
};

struct GateState {
  Tensor S;      // gradient sensitivity, >= 0
  Tensor V;      // distributional deviation, >= 0
  Tensor U;      // eta*S + (1-eta)*V
  Tensor Gamma;  // adaptive thresholds
  Tensor Omega;  // soft gate values in (0,1)
};

// Per-coefficient L2 norm of the input-gradient of the posterior mean head,
// computed from the closed-form Jacobian of the one-hidden-layer net.
// x: length-d sample -> (N, M).
Tensor gradient_sensitivity(const Tensor& x, const InferenceNet& net);
// X: (B, d) -> (B, N*M).
Tensor gradient_sensitivity_batch(const Tensor& x_batch,
                                  const InferenceNet& net);

struct BatchStats {
  Tensor mean;  // per coefficient
  Tensor std;   // population standard deviation
};

// Population statistics over axis 0 of a (B, C) coefficient batch.
BatchStats batch_stats(const Tensor& z_batch);

// |z - mean| / (std + eps_v), elementwise against per-coefficient stats.
Tensor distributional_deviation(const Tensor& z_batch, const BatchStats& stats);
// Convenience: stats taken from the batch itself.
Tensor distributional_deviation(const Tensor& z_batch);

// Frozen inference-time statistics: exponential moving averages of the
// training batches (batch-of-one inference has no batch statistics).
struct EmaStats {
  Tensor mean, std;
  bool initialized = false;
  double decay = 0.99;
  void update(const BatchStats& batch);
  BatchStats snapshot() const { return {mean, std}; }
};

Tensor uncertainty(const Tensor& s, const Tensor& v, double eta);

// Gamma = psi1 * (1 + psi2 * U).
Tensor threshold(const Tensor& u, const GateParams& gp);

// z kept iff |z| >= Gamma (ties retained), else exactly zero.
Tensor hard_gate(const Tensor& z, const Tensor& gamma);

// Omega = sigmoid((|z| - Gamma) / rho).
Tensor soft_gate(const Tensor& z, const Tensor& gamma, double rho);

double boundary_loss(const Tensor& z, const Tensor& gamma, double margin);
double exploration_loss(const GateParams& gp, double eps);
// Hard-indicator variant: sum of U over gated coefficients that stayed
// nonzero.
double uncertainty_loss(const Tensor& u, const Tensor& gated);
// Soft training surrogate: sum of U * Omega.
double uncertainty_loss_soft(const Tensor& u, const Tensor& omega);

GateState compute_gate_state(const Tensor& z, const Tensor& s, const Tensor& v,
                             const GateParams& gp);

double reg_total(const Tensor& z, const GateState& state, const GateParams& gp,
                 const RegWeights& w);

// Fraction of coefficients left nonzero by the hard gate.
double gated_ratio(const Tensor& gated);

// Graph-side pieces for training. psi1/psi2 are scalar Vars (leaves when the
// gate is being learned); U enters detached, as a constant.
Var threshold_graph(Graph& g, Var psi1, Var psi2, const Tensor& u);
Var soft_gate_graph(Graph& g, Var z, Var gamma, double rho);
Var boundary_loss_graph(Graph& g, Var z, Var gamma, double margin);
Var exploration_loss_graph(Graph& g, Var psi1, Var psi2, double psi1_0,
                           double psi2_0, double eps);
Var uncertainty_loss_soft_graph(Graph& g, const Tensor& u, Var omega);

}  // namespace taskvec
