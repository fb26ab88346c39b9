#include "taskvec/variational.hpp"

#include <cmath>
#include <stdexcept>

namespace taskvec {
namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

double log_normal_pdf(double z, double mu, double var) {
  const double d = z - mu;
  return -0.5 * (std::log(kTwoPi * var) + d * d / var);
}

// Elementwise KL(N(mu, e^lv) || N(0, s2)) on the graph.
Var kl_gaussian_elem(Graph& g, Var mu, Var log_var, double slab_var) {
  Var lv = g.clamp(log_var, -10.0, 10.0);
  Var log_term = g.affine(lv, -0.5, 0.5 * std::log(slab_var) - 0.5);
  Var moment = g.add(g.exp(lv), g.mul(mu, mu));
  return g.add(log_term, g.affine(moment, 0.5 / slab_var, 0.0));
}

}  // namespace

void PriorSpec::validate() const {
  if (!(slab_var > 0.0) || !std::isfinite(slab_var)) {
    throw std::invalid_argument("PriorSpec: slab variance must be positive");
  }
  if (!(pi_prior > 0.0 && pi_prior < 1.0)) {
    throw std::invalid_argument(
        "PriorSpec: pi_prior must lie strictly inside (0,1)");
  }
}

double kl_bernoulli(double gamma, double pi_prior) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) {
    throw std::invalid_argument("kl_bernoulli: gamma must lie in [0,1]");
  }
  if (!(pi_prior > 0.0 && pi_prior < 1.0)) {
    throw std::invalid_argument(
        "kl_bernoulli: pi_prior must lie strictly inside (0,1)");
  }
  double kl = 0.0;
  if (gamma > 0.0) kl += gamma * std::log(gamma / pi_prior);
  if (gamma < 1.0) kl += (1.0 - gamma) * std::log((1.0 - gamma) / (1.0 - pi_prior));
  return kl;
}

double kl_gaussian_slab(double mu, double var, double slab_var) {
  if (!(var > 0.0) || !(slab_var > 0.0)) {
    throw std::invalid_argument("kl_gaussian_slab: variances must be positive");
  }
  return 0.5 * (std::log(slab_var / var) + (var + mu * mu) / slab_var - 1.0);
}

Var kl_bernoulli_sum(Graph& g, Var gamma, double pi_prior) {
  if (!(pi_prior > 0.0 && pi_prior < 1.0)) {
    throw std::invalid_argument(
        "kl_bernoulli_sum: pi_prior must lie strictly inside (0,1)");
  }
  Var one_minus = g.affine(gamma, -1.0, 1.0);
  Var on = g.mul(gamma, g.affine(g.log(gamma), 1.0, -std::log(pi_prior)));
  Var off = g.mul(one_minus,
                  g.affine(g.log(one_minus), 1.0, -std::log(1.0 - pi_prior)));
  return g.sum(g.add(on, off));
}

Var kl_gaussian_slab_sum(Graph& g, Var mu, Var log_var, double slab_var) {
  return g.sum(kl_gaussian_elem(g, mu, log_var, slab_var));
}

Var kl_gaussian_slab_weighted_sum(Graph& g, Var gamma, Var mu, Var log_var,
                                  double slab_var) {
  return g.sum(g.mul(gamma, kl_gaussian_elem(g, mu, log_var, slab_var)));
}

ElboGraph build_elbo_graph(Graph& g, const Tensor& x_batch,
                           const std::vector<int>& y, const InferenceNet& net,
                           bool trainable, const LogLikBuilder& model,
                           const PriorSpec& prior, int k_samples,
                           RngStream* rng, const NoiseDraws* frozen,
                           NoiseDraws* capture, BernoulliEstimator estimator) {
  prior.validate();
  if (x_batch.ndim() != 2 ||
      static_cast<std::size_t>(x_batch.dim(1)) != net.input_dim()) {
    throw ShapeError("build_elbo_graph: x must be (B, " +
                     std::to_string(net.input_dim()) + "), got " +
                     shape_str(x_batch.shape()));
  }
  const std::size_t batch = static_cast<std::size_t>(x_batch.dim(0));
  if (y.size() != batch) {
    throw ShapeError("build_elbo_graph: label count does not match batch");
  }
  if (k_samples < 1) {
    throw std::invalid_argument("build_elbo_graph: k_samples must be >= 1");
  }
  if ((rng == nullptr) == (frozen == nullptr)) {
    throw std::invalid_argument(
        "build_elbo_graph: exactly one of rng/frozen must be set");
  }
  if (frozen && static_cast<int>(frozen->eps.size()) < k_samples) {
    throw std::invalid_argument("build_elbo_graph: frozen draws too short");
  }
  const bool spike = prior.kind == PriorSpec::Kind::kSpikeSlab;

  ElboGraph out;
  out.net = register_net(g, net, trainable);
  Var x = g.constant(x_batch);
  out.heads = infer_posterior_batch(g, x, out.net);

  const double inv_b = 1.0 / static_cast<double>(batch);
  if (spike) {
    out.kl_bernoulli_total =
        g.affine(kl_bernoulli_sum(g, out.heads.pi, prior.pi_prior), inv_b, 0.0);
    out.kl_gaussian_total = g.affine(
        kl_gaussian_slab_weighted_sum(g, out.heads.pi, out.heads.mu,
                                      out.heads.log_var, prior.slab_var),
        inv_b, 0.0);
  } else {
    out.kl_bernoulli_total = g.constant_scalar(0.0);
    out.kl_gaussian_total = g.affine(
        kl_gaussian_slab_sum(g, out.heads.mu, out.heads.log_var,
                             prior.slab_var),
        inv_b, 0.0);
  }

  const Shape head_shape = out.heads.mu.value().shape();
  Var sigma = g.exp(g.affine(out.heads.log_var, 0.5, 0.0));
  Var ll_acc = g.constant_scalar(0.0);
  Var surrogate_acc = g.constant_scalar(0.0);
  bool have_surrogate = false;

  for (int k = 0; k < k_samples; ++k) {
    Tensor eps(head_shape);
    if (frozen) {
      eps = frozen->eps[static_cast<std::size_t>(k)];
    } else {
      for (std::size_t i = 0; i < eps.numel(); ++i) eps[i] = rng->normal();
    }
    if (capture) capture->eps.push_back(eps);

    Var z = g.add(out.heads.mu, g.mul(sigma, g.constant(eps)));
    Var z_tilde = z;

    if (spike) {
      const Tensor& pi_val = out.heads.pi.value();
      Tensor omega(head_shape);
      Tensor shift(head_shape);
      if (frozen) {
        omega = frozen->omega[static_cast<std::size_t>(k)];
        shift = frozen->shift[static_cast<std::size_t>(k)];
      } else {
        for (std::size_t i = 0; i < omega.numel(); ++i) {
          omega[i] = rng->uniform() < pi_val[i] ? 1.0 : 0.0;
          shift[i] = omega[i] - pi_val[i];
        }
      }
      if (capture) {
        capture->omega.push_back(omega);
        capture->shift.push_back(shift);
      }

      if (estimator == BernoulliEstimator::kStraightThrough) {
        Var omega_eff = g.add(out.heads.pi, g.constant(shift));
        z_tilde = g.mul(omega_eff, z);
      } else {
        z_tilde = g.mul(g.constant(omega), z);
      }

      if (estimator == BernoulliEstimator::kScoreFunction) {
        Tensor one_minus_omega(head_shape);
        for (std::size_t i = 0; i < omega.numel(); ++i) {
          one_minus_omega[i] = 1.0 - omega[i];
        }
        Var lp = g.sum(g.add(
            g.mul(g.constant(omega), g.log(out.heads.pi)),
            g.mul(g.constant(std::move(one_minus_omega)),
                  g.log(g.affine(out.heads.pi, -1.0, 1.0)))));
        // Zero-valued surrogate whose gradient is the REINFORCE term.
        Var ll_k_preview = model(g, z_tilde, y);
        const Tensor& lv = ll_k_preview.value();
        if (lv.numel() != batch) {
          throw ShapeError("build_elbo_graph: model must return per-sample "
                           "log-likelihoods");
        }
        double ell_k = 0.0;
        for (std::size_t b = 0; b < lv.numel(); ++b) ell_k += lv[b];
        ell_k *= inv_b;
        Var centered = g.sub(lp, g.constant_scalar(lp.value().item()));
        surrogate_acc = g.add(
            surrogate_acc, g.mul(g.constant_scalar(ell_k), centered));
        have_surrogate = true;
        ll_acc = g.add(ll_acc, g.sum(ll_k_preview));
        continue;
      }
    }

    Var ll_k = model(g, z_tilde, y);
    if (ll_k.value().numel() != batch) {
      throw ShapeError("build_elbo_graph: model must return per-sample "
                       "log-likelihoods");
    }
    ll_acc = g.add(ll_acc, g.sum(ll_k));
  }

  out.expected_log_lik =
      g.affine(ll_acc, inv_b / static_cast<double>(k_samples), 0.0);
  out.elbo = g.sub(out.expected_log_lik,
                   g.add(out.kl_bernoulli_total, out.kl_gaussian_total));
  if (have_surrogate) {
    out.elbo = g.add(
        out.elbo,
        g.affine(surrogate_acc, 1.0 / static_cast<double>(k_samples), 0.0));
  }
  return out;
}

namespace {

ElboBreakdown eval_elbo(const Tensor& x, const std::vector<int>& y,
                        const InferenceNet& net, const LogLikBuilder& model,
                        const PriorSpec& prior, RngStream& rng, int k_samples) {
  Graph g;
  ElboGraph eg = build_elbo_graph(g, x, y, net, /*trainable=*/false, model,
                                  prior, k_samples, &rng, nullptr, nullptr);
  ElboBreakdown out;
  out.expected_log_lik = eg.expected_log_lik.value().item();
  out.kl_bernoulli_total = eg.kl_bernoulli_total.value().item();
  out.kl_gaussian_total = eg.kl_gaussian_total.value().item();
  out.elbo = eg.elbo.value().item();
  return out;
}

}  // namespace

ElboBreakdown elbo_gaussian(const Tensor& x_batch, const std::vector<int>& y,
                            const InferenceNet& net, const LogLikBuilder& model,
                            const PriorSpec& prior, RngStream& rng,
                            int k_samples) {
  if (prior.kind != PriorSpec::Kind::kGaussian) {
    throw std::invalid_argument("elbo_gaussian: prior.kind must be gaussian");
  }
  return eval_elbo(x_batch, y, net, model, prior, rng, k_samples);
}

ElboBreakdown elbo_spike_slab(const Tensor& x_batch, const std::vector<int>& y,
                              const InferenceNet& net,
                              const LogLikBuilder& model,
                              const PriorSpec& prior, RngStream& rng,
                              int k_samples) {
  if (prior.kind != PriorSpec::Kind::kSpikeSlab) {
    throw std::invalid_argument(
        "elbo_spike_slab: prior.kind must be spike_slab");
  }
  return eval_elbo(x_batch, y, net, model, prior, rng, k_samples);
}

namespace {

McEstimate finish_estimate(double sum, double sumsq, int n) {
  McEstimate est;
  est.value = sum / n;
  const double sample_var =
      std::max(0.0, (sumsq - n * est.value * est.value) / (n - 1));
  est.std_error = std::sqrt(sample_var / n);
  return est;
}

}  // namespace

McEstimate mc_kl_estimate(const PosteriorParams& post, const PriorSpec& prior,
                          int n_samples, RngStream& rng) {
  post.validate();
  prior.validate();
  if (n_samples < 10000) {
    throw std::invalid_argument("mc_kl_estimate: need at least 1e4 samples");
  }
  double sum = 0.0, sumsq = 0.0;
  for (int s = 0; s < n_samples; ++s) {
    double w = 0.0;
    for (std::size_t i = 0; i < post.mu.numel(); ++i) {
      const double var = std::exp(post.log_var[i]);
      const double z = post.mu[i] + std::sqrt(var) * rng.normal();
      w += log_normal_pdf(z, post.mu[i], var) -
           log_normal_pdf(z, 0.0, prior.slab_var);
    }
    sum += w;
    sumsq += w * w;
  }
  return finish_estimate(sum, sumsq, n_samples);
}

McEstimate mc_kl_bernoulli_estimate(const PosteriorParams& post,
                                    const PriorSpec& prior, int n_samples,
                                    RngStream& rng) {
  post.validate();
  prior.validate();
  if (n_samples < 10000) {
    throw std::invalid_argument(
        "mc_kl_bernoulli_estimate: need at least 1e4 samples");
  }
  double sum = 0.0, sumsq = 0.0;
  for (int s = 0; s < n_samples; ++s) {
    double w = 0.0;
    for (std::size_t i = 0; i < post.pi.numel(); ++i) {
      const double gamma = post.pi[i];
      const bool on = rng.uniform() < gamma;
      const double q = on ? gamma : 1.0 - gamma;
      const double p = on ? prior.pi_prior : 1.0 - prior.pi_prior;
      w += std::log(q / p);
    }
    sum += w;
    sumsq += w * w;
  }
  return finish_estimate(sum, sumsq, n_samples);
}

}  // namespace taskvec
