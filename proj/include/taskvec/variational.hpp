#pragma once

#include <functional>
#include <vector>

#include "taskvec/graph.hpp"
#include "taskvec/inference_net.hpp"

namespace taskvec {

struct PriorSpec {
  enum class Kind { kGaussian, kSpikeSlab };
  Kind kind = Kind::kGaussian;
  double slab_var = 1.0;  // sigma^2 of the slab / Gaussian prior
  double pi_prior = 0.5;  // mixture weight of the slab
  void validate() const;
};

struct ElboBreakdown {
  double expected_log_lik = 0.0;
  double kl_bernoulli_total = 0.0;
  double kl_gaussian_total = 0.0;
  double elbo = 0.0;
};

// KL(Bernoulli(gamma) || Bernoulli(pi_prior)), with 0*log0 = 0.
double kl_bernoulli(double gamma, double pi_prior);

// KL(N(mu, var) || N(0, slab_var)) = 0.5*[log(s2/v) + (v + mu^2)/s2 - 1].
double kl_gaussian_slab(double mu, double var, double slab_var);

// Graph counterparts, summed over all elements into a scalar Var. gamma must
// lie strictly inside (0,1) (sigmoid output); log_var is a log variance.
Var kl_bernoulli_sum(Graph& g, Var gamma, double pi_prior);
Var kl_gaussian_slab_sum(Graph& g, Var mu, Var log_var, double slab_var);
// Spike-and-slab Gaussian term: sum of gamma * KL(N(mu,var) || slab).
Var kl_gaussian_slab_weighted_sum(Graph& g, Var gamma, Var mu, Var log_var,
                                  double slab_var);

// Bridges coefficients to a predictive model: given per-sample coefficients
// z (B, N*M) already on the graph, append ops that return per-sample label
// log-likelihoods log p(y_b | x_b, z_b) of shape (B,). Implementations
// capture x (and the composed model) themselves.
using LogLikBuilder =
    std::function<Var(Graph& g, Var z, const std::vector<int>& y)>;

// Noise draws for one ELBO evaluation, so finite-difference probes can hold
// the Monte Carlo randomness fixed. shift[k] stores omega - pi at the freeze
// point: the straight-through path is pi + shift, matching the tape's view.
struct NoiseDraws {
  std::vector<Tensor> eps;
  std::vector<Tensor> omega;
  std::vector<Tensor> shift;
};

struct ElboGraph {
  NetVars net;
  PosteriorVars heads;      // (B, N*M)
  Var expected_log_lik;     // scalar: (1/K) sum_k mean_b loglik
  Var kl_bernoulli_total;   // scalar: mean over batch of summed Bernoulli KLs
  Var kl_gaussian_total;    // scalar: mean over batch of summed Gaussian KLs
  Var elbo;                 // ELL - KL_bern - KL_gauss (+ zero-valued score
                            // surrogate when that estimator is active)
};

// Records the full amortized ELBO on g. Exactly one of rng/frozen must be
// non-null; capture (optional) receives the draws actually used.
ElboGraph build_elbo_graph(Graph& g, const Tensor& x_batch,
                           const std::vector<int>& y, const InferenceNet& net,
                           bool trainable, const LogLikBuilder& model,
                           const PriorSpec& prior, int k_samples,
                           RngStream* rng, const NoiseDraws* frozen,
                           NoiseDraws* capture,
                           BernoulliEstimator estimator =
                               BernoulliEstimator::kStraightThrough);

// Value-level evaluators (net enters as constants, K Monte Carlo samples).
ElboBreakdown elbo_gaussian(const Tensor& x_batch, const std::vector<int>& y,
                            const InferenceNet& net, const LogLikBuilder& model,
                            const PriorSpec& prior, RngStream& rng,
                            int k_samples = 16);

ElboBreakdown elbo_spike_slab(const Tensor& x_batch, const std::vector<int>& y,
                              const InferenceNet& net,
                              const LogLikBuilder& model,
                              const PriorSpec& prior, RngStream& rng,
                              int k_samples = 16);

struct McEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

// Monte Carlo estimate of the summed Gaussian KL between the posterior slabs
// and the prior slab, as an independent oracle for kl_gaussian_slab.
McEstimate mc_kl_estimate(const PosteriorParams& post, const PriorSpec& prior,
                          int n_samples, RngStream& rng);

// Same idea for the Bernoulli part: MC estimate of the summed indicator KL.
McEstimate mc_kl_bernoulli_estimate(const PosteriorParams& post,
                                    const PriorSpec& prior, int n_samples,
                                    RngStream& rng);

}  // namespace taskvec
