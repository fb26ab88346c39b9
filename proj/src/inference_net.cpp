#include "taskvec/inference_net.hpp"

#include <cmath>
#include <stdexcept>

namespace taskvec {

void PosteriorParams::validate() const {
  if (!pi.same_shape(mu) || !pi.same_shape(log_var) || pi.ndim() != 2) {
    throw ShapeError("PosteriorParams: heads must share one (N, M) shape");
  }
  for (std::size_t i = 0; i < pi.numel(); ++i) {
    if (!(pi[i] > 0.0 && pi[i] < 1.0)) {
      throw NumericError("PosteriorParams: pi must lie strictly inside (0,1)");
    }
    if (!(log_var[i] >= -10.0 && log_var[i] <= 10.0)) {
      throw NumericError("PosteriorParams: log_var outside clamp range");
    }
    if (!std::isfinite(mu[i])) {
      throw NumericError("PosteriorParams: non-finite mu");
    }
  }
}

InferenceNet::InferenceNet(std::size_t input_dim, std::size_t n_tasks,
                           std::size_t n_blocks, std::size_t hidden_dim)
    : input_dim_(input_dim),
      hidden_dim_(hidden_dim == 0 ? 4 * input_dim : hidden_dim),
      n_tasks_(n_tasks),
      n_blocks_(n_blocks) {
  if (input_dim_ == 0 || n_tasks_ == 0 || n_blocks_ == 0) {
    throw std::invalid_argument("InferenceNet: dimensions must be positive");
  }
  const auto d = static_cast<std::int64_t>(input_dim_);
  const auto h = static_cast<std::int64_t>(hidden_dim_);
  const auto out = static_cast<std::int64_t>(head_size());
  weights_.add("enc.W", Tensor({d, h}));
  weights_.add("enc.b", Tensor({h}));
  weights_.add("pi.W", Tensor({h, out}));
  weights_.add("pi.b", Tensor({out}));
  weights_.add("mu.W", Tensor({h, out}));
  weights_.add("mu.b", Tensor({out}));
  weights_.add("lv.W", Tensor({h, out}));
  weights_.add("lv.b", Tensor({out}));
}

InferenceNet InferenceNet::init(std::size_t input_dim, std::size_t n_tasks,
                                std::size_t n_blocks, RngStream& rng,
                                std::size_t hidden_dim) {
  InferenceNet net(input_dim, n_tasks, n_blocks, hidden_dim);
  Tensor& enc = net.weights_.tensor("enc.W");
  const double scale = 1.0 / std::sqrt(static_cast<double>(input_dim));
  for (std::size_t i = 0; i < enc.numel(); ++i) enc[i] = rng.normal() * scale;
  // Heads stay zero: posterior opens at mu=0, sigma=1, pi=0.5.
  return net;
}

std::vector<std::pair<std::string, Var>> NetVars::named() const {
  return {{"enc.W", enc_w}, {"enc.b", enc_b}, {"pi.W", pi_w}, {"pi.b", pi_b},
          {"mu.W", mu_w},   {"mu.b", mu_b},   {"lv.W", lv_w}, {"lv.b", lv_b}};
}

NetVars register_net(Graph& g, const InferenceNet& net, bool trainable) {
  const ParamSet& w = net.weights();
  auto reg = [&](const char* name) {
    return trainable ? g.leaf(w.tensor(name)) : g.constant(w.tensor(name));
  };
  NetVars nv;
  nv.enc_w = reg("enc.W");
  nv.enc_b = reg("enc.b");
  nv.pi_w = reg("pi.W");
  nv.pi_b = reg("pi.b");
  nv.mu_w = reg("mu.W");
  nv.mu_b = reg("mu.b");
  nv.lv_w = reg("lv.W");
  nv.lv_b = reg("lv.b");
  return nv;
}

PosteriorVars infer_posterior_batch(Graph& g, Var x, const NetVars& net) {
  Var hidden = g.tanh(g.add(g.matmul(x, net.enc_w), net.enc_b));
  PosteriorVars post;
  post.pi = g.sigmoid(g.add(g.matmul(hidden, net.pi_w), net.pi_b));
  post.mu = g.add(g.matmul(hidden, net.mu_w), net.mu_b);
  post.log_var =
      g.clamp(g.add(g.matmul(hidden, net.lv_w), net.lv_b), -10.0, 10.0);
  return post;
}

PosteriorParams infer_posterior(const Tensor& x, const InferenceNet& net) {
  if (x.numel() != net.input_dim()) {
    throw ShapeError("infer_posterior: input has " + std::to_string(x.numel()) +
                     " features, net expects " +
                     std::to_string(net.input_dim()));
  }
  Graph g;
  Var xv = g.constant(Tensor({1, static_cast<std::int64_t>(x.numel())}, x.vec()));
  PosteriorVars heads = infer_posterior_batch(g, xv, register_net(g, net, false));

  const Shape nm = {static_cast<std::int64_t>(net.n_tasks()),
                    static_cast<std::int64_t>(net.n_blocks())};
  PosteriorParams post{Tensor(nm, heads.pi.value().vec()),
                       Tensor(nm, heads.mu.value().vec()),
                       Tensor(nm, heads.log_var.value().vec())};
  post.validate();
  return post;
}

CoefficientMatrix sample_coefficients_gaussian(const PosteriorParams& post,
                                               RngStream& rng) {
  post.validate();
  Tensor z(post.mu.shape());
  for (std::size_t i = 0; i < z.numel(); ++i) {
    z[i] = post.mu[i] + std::exp(0.5 * post.log_var[i]) * rng.normal();
  }
  return CoefficientMatrix(std::move(z));
}

SpikeSlabDraw sample_coefficients_spike_slab(const PosteriorParams& post,
                                             RngStream& rng) {
  post.validate();
  Tensor z(post.mu.shape());
  Tensor omega(post.mu.shape());
  Tensor zt(post.mu.shape());
  for (std::size_t i = 0; i < z.numel(); ++i) {
    z[i] = post.mu[i] + std::exp(0.5 * post.log_var[i]) * rng.normal();
    omega[i] = rng.uniform() < post.pi[i] ? 1.0 : 0.0;
    zt[i] = omega[i] * z[i];
  }
  return SpikeSlabDraw{CoefficientMatrix(std::move(zt)), std::move(omega),
                       std::move(z)};
}

Var sample_coefficients_gaussian(Graph& g, Var mu, Var log_var,
                                 RngStream& rng) {
  return sample_gaussian_reparam(g, mu, log_var, rng);
}

SpikeSlabVars sample_coefficients_spike_slab(Graph& g, Var pi, Var mu,
                                             Var log_var, RngStream& rng,
                                             BernoulliEstimator estimator) {
  const Tensor& pv = pi.value();
  Tensor omega(pv.shape());
  for (std::size_t i = 0; i < omega.numel(); ++i) {
    omega[i] = rng.uniform() < pv[i] ? 1.0 : 0.0;
  }

  Var z = sample_gaussian_reparam(g, mu, log_var, rng);

  SpikeSlabVars out;
  out.omega = omega;
  // log q(omega|pi) = sum omega*log(pi) + (1-omega)*log(1-pi)
  Var one_minus_pi = g.affine(pi, -1.0, 1.0);
  Var off = g.mul(g.log(one_minus_pi), g.constant([&] {
    Tensor t(omega.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 1.0 - omega[i];
    return t;
  }()));
  Var on = g.mul(g.log(pi), g.constant(omega));
  out.log_prob_omega = g.sum(g.add(on, off));

  if (estimator == BernoulliEstimator::kStraightThrough) {
    // omega written as pi + (omega - pi): the value is the binary draw, the
    // derivative w.r.t. pi is the identity.
    Tensor shift(pv.shape());
    for (std::size_t i = 0; i < shift.numel(); ++i) shift[i] = omega[i] - pv[i];
    Var omega_eff = g.add(pi, g.constant(std::move(shift)));
    out.z_tilde = g.mul(omega_eff, z);
  } else {
    out.z_tilde = g.mul(g.constant(omega), z);
  }
  return out;
}

}  // namespace taskvec
