#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "taskvec/graph.hpp"
#include "taskvec/task_vectors.hpp"

namespace taskvec {

// Per-sample posterior over an N x M coefficient matrix.
struct PosteriorParams {
  Tensor pi;       // inclusion probabilities, strictly inside (0,1)
  Tensor mu;       // slab means
  Tensor log_var;  // slab log variances, clamped to [-10, 10]

  std::size_t tasks() const { return static_cast<std::size_t>(mu.dim(0)); }
  std::size_t blocks() const { return static_cast<std::size_t>(mu.dim(1)); }
  void validate() const;
};

// Amortized posterior network: one tanh hidden layer (width 4d by default)
// and three linear heads of size N*M each. Zero-initialized heads start the
// posterior at mu=0, sigma=1, pi=0.5 for every input.
class InferenceNet {
 public:
  InferenceNet(std::size_t input_dim, std::size_t n_tasks,
               std::size_t n_blocks, std::size_t hidden_dim = 0);

  static InferenceNet init(std::size_t input_dim, std::size_t n_tasks,
                           std::size_t n_blocks, RngStream& rng,
                           std::size_t hidden_dim = 0);

  std::size_t input_dim() const { return input_dim_; }
  std::size_t hidden_dim() const { return hidden_dim_; }
  std::size_t n_tasks() const { return n_tasks_; }
  std::size_t n_blocks() const { return n_blocks_; }
  std::size_t head_size() const { return n_tasks_ * n_blocks_; }

  ParamSet& weights() { return weights_; }
  const ParamSet& weights() const { return weights_; }

 private:
  std::size_t input_dim_, hidden_dim_, n_tasks_, n_blocks_;
  ParamSet weights_;
};

// Net weights recorded on a graph, as leaves (training) or constants (eval).
struct NetVars {
  Var enc_w, enc_b, pi_w, pi_b, mu_w, mu_b, lv_w, lv_b;
  std::vector<std::pair<std::string, Var>> named() const;
};

NetVars register_net(Graph& g, const InferenceNet& net, bool trainable);

// Posterior heads for a batch: each Var has shape (B, N*M).
struct PosteriorVars {
  Var pi, mu, log_var;
};

// x: (B, d) already on the graph. Differentiable in both x and the weights.
PosteriorVars infer_posterior_batch(Graph& g, Var x, const NetVars& net);

// Single-sample convenience wrapper; x is a length-d vector.
PosteriorParams infer_posterior(const Tensor& x, const InferenceNet& net);

// Reparameterized Gaussian coefficients z = mu + sigma * eps.
CoefficientMatrix sample_coefficients_gaussian(const PosteriorParams& post,
                                               RngStream& rng);

enum class BernoulliEstimator { kStraightThrough, kScoreFunction };

struct SpikeSlabDraw {
  CoefficientMatrix z_tilde;  // omega * z
  Tensor omega;               // binary inclusions
  Tensor z;                   // the underlying Gaussian draw
};

SpikeSlabDraw sample_coefficients_spike_slab(const PosteriorParams& post,
                                             RngStream& rng);

// Training-path draws recorded on a graph. pi/mu/log_var may be any equal
// shape (typically (B, N*M)).
Var sample_coefficients_gaussian(Graph& g, Var mu, Var log_var, RngStream& rng);

struct SpikeSlabVars {
  Var z_tilde;
  Tensor omega;
  // log q(omega | pi), differentiable in pi; the score-function surrogate
  // hangs off this. Recorded for both estimators.
  Var log_prob_omega;
};

// Straight-through: forward value is omega*z while the backward pass treats
// omega as pi plus a constant, so gradients reach the pi head directly.
// Score-function: omega enters as a constant and pi only receives gradients
// through log_prob_omega.
SpikeSlabVars sample_coefficients_spike_slab(Graph& g, Var pi, Var mu,
                                             Var log_var, RngStream& rng,
                                             BernoulliEstimator estimator);

}  // namespace taskvec
