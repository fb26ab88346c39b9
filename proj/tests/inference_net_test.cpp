#include <doctest.h>

#include <cmath>
#include <vector>

#include "taskvec/inference_net.hpp"

using namespace taskvec;

namespace {

// FD check of a scalar graph function against one named weight tensor of the
// net, holding every other tensor constant.
double weight_grad_check(
    const InferenceNet& net, const std::string& which,
    const std::function<Var(Graph&, const NetVars&)>& fn, double eps) {
  InferenceNet probe = net;

  // Analytic gradient.
  Graph g;
  Var target;
  NetVars nv;
  {
    const ParamSet& w = probe.weights();
    auto reg = [&](const char* name) {
      return which == name ? g.leaf(w.tensor(name)) : g.constant(w.tensor(name));
    };
    nv.enc_w = reg("enc.W");
    nv.enc_b = reg("enc.b");
    nv.pi_w = reg("pi.W");
    nv.pi_b = reg("pi.b");
    nv.mu_w = reg("mu.W");
    nv.mu_b = reg("mu.b");
    nv.lv_w = reg("lv.W");
    nv.lv_b = reg("lv.b");
    target = fn(g, nv);
  }
  g.backward(target);
  Var leaf;
  for (const auto& [name, v] : nv.named()) {
    if (name == which) leaf = v;
  }
  const Tensor analytic = leaf.grad();

  Tensor& wt = probe.weights().tensor(which);
  auto eval = [&] {
    Graph h;
    const ParamSet& w = probe.weights();
    NetVars hv;
    hv.enc_w = h.constant(w.tensor("enc.W"));
    hv.enc_b = h.constant(w.tensor("enc.b"));
    hv.pi_w = h.constant(w.tensor("pi.W"));
    hv.pi_b = h.constant(w.tensor("pi.b"));
    hv.mu_w = h.constant(w.tensor("mu.W"));
    hv.mu_b = h.constant(w.tensor("mu.b"));
    hv.lv_w = h.constant(w.tensor("lv.W"));
    hv.lv_b = h.constant(w.tensor("lv.b"));
    return fn(h, hv).value().item();
  };

  double worst = 0.0;
  for (std::size_t i = 0; i < wt.numel(); ++i) {
    const double saved = wt[i];
    wt[i] = saved + eps;
    const double hi = eval();
    wt[i] = saved - eps;
    const double lo = eval();
    wt[i] = saved;
    const double fd = (hi - lo) / (2.0 * eps);
    const double a = analytic[i];
    worst = std::max(worst, std::fabs(a - fd) /
                                std::max(1.0, std::fabs(a) + std::fabs(fd)));
  }
  return worst;
}

}  // namespace

TEST_CASE("zero-weight net opens at mu=0, sigma=1, pi=0.5") {
  InferenceNet net(3, 2, 2);
  Tensor x({3}, {0.7, -1.1, 0.4});
  PosteriorParams post = infer_posterior(x, net);
  REQUIRE(post.tasks() == 2);
  REQUIRE(post.blocks() == 2);
  for (std::size_t i = 0; i < post.mu.numel(); ++i) {
    CHECK(post.mu[i] == 0.0);
    CHECK(post.log_var[i] == 0.0);
    CHECK(post.pi[i] == 0.5);
  }
}

TEST_CASE("infer_posterior is deterministic and pi stays inside (0,1)") {
  RngStream rng(17);
  InferenceNet net = InferenceNet::init(4, 3, 2, rng);
  // Give the heads some life.
  for (const char* head : {"pi.W", "mu.W", "lv.W"}) {
    Tensor& w = net.weights().tensor(head);
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.normal();
  }

  Tensor x = Tensor::randn({4}, rng);
  PosteriorParams a = infer_posterior(x, net);
  PosteriorParams b = infer_posterior(x, net);
  for (std::size_t i = 0; i < a.mu.numel(); ++i) {
    CHECK(a.mu[i] == b.mu[i]);
    CHECK(a.pi[i] == b.pi[i]);
    CHECK(a.log_var[i] == b.log_var[i]);
    CHECK(a.pi[i] > 0.0);
    CHECK(a.pi[i] < 1.0);
    CHECK(a.log_var[i] >= -10.0);
    CHECK(a.log_var[i] <= 10.0);
  }

  CHECK_THROWS_AS(infer_posterior(Tensor({5}), net), ShapeError);
}

TEST_CASE("posterior heads pass gradient checks against every weight") {
  RngStream rng(31);
  InferenceNet net = InferenceNet::init(3, 2, 1, rng, 6);
  for (const char* head : {"pi.W", "mu.W", "lv.W", "pi.b", "mu.b", "lv.b"}) {
    Tensor& w = net.weights().tensor(head);
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.normal() * 0.3;
  }
  Tensor x = Tensor::randn({2, 3}, rng);

  auto head_sum = [&x](Graph& g, const NetVars& nv) {
    PosteriorVars post = infer_posterior_batch(g, g.constant(x), nv);
    // Exercise all three heads in one scalar.
    Var mix = g.add(g.add(post.pi, post.mu),
                    g.mul(post.log_var, post.log_var));
    return g.sum(mix);
  };

  for (const char* name : {"enc.W", "enc.b", "pi.W", "pi.b", "mu.W", "mu.b",
                           "lv.W", "lv.b"}) {
    INFO(name);
    CHECK(weight_grad_check(net, name, head_sum, 1e-5) < 1e-5);
  }
}

TEST_CASE("gaussian coefficient sampling") {
  PosteriorParams post{Tensor({1, 2}, {0.5, 0.5}), Tensor({1, 2}, {1.5, -0.7}),
                       Tensor({1, 2}, {-10.0, 0.0})};

  RngStream rng(5);
  CoefficientMatrix z = sample_coefficients_gaussian(post, rng);
  // Floor-variance draw hugs the mean.
  CHECK(z.values[0] == doctest::Approx(1.5).epsilon(1e-2));

  // Reproducibility.
  RngStream r2(5);
  CoefficientMatrix z2 = sample_coefficients_gaussian(post, r2);
  CHECK(z.values[0] == z2.values[0]);
  CHECK(z.values[1] == z2.values[1]);

  // Mean of many draws within 3 standard errors.
  const int n = 100000;
  double sum = 0.0;
  RngStream r3(7);
  for (int i = 0; i < n; ++i) {
    sum += sample_coefficients_gaussian(post, r3).values[1];
  }
  const double mean = sum / n;
  const double se = 1.0 / std::sqrt(static_cast<double>(n));  // sigma = 1
  CHECK(std::fabs(mean - (-0.7)) < 3.0 * se);
}

TEST_CASE("spike-and-slab sampling hits the documented limits") {
  const double lo = 1e-12, hi = 1.0 - 1e-12;
  PosteriorParams off{Tensor({1, 2}, {lo, lo}), Tensor({1, 2}, {3.0, -2.0}),
                      Tensor({1, 2}, {0.0, 0.0})};
  PosteriorParams on{Tensor({1, 2}, {hi, hi}), Tensor({1, 2}, {3.0, -2.0}),
                     Tensor({1, 2}, {0.0, 0.0})};

  RngStream rng(11);
  for (int i = 0; i < 200; ++i) {
    SpikeSlabDraw d = sample_coefficients_spike_slab(off, rng);
    CHECK(d.z_tilde.values[0] == 0.0);
    CHECK(d.z_tilde.values[1] == 0.0);
  }
  RngStream r2(11);
  for (int i = 0; i < 200; ++i) {
    SpikeSlabDraw d = sample_coefficients_spike_slab(on, r2);
    CHECK(d.z_tilde.values[0] == d.z[0]);
    CHECK(d.omega[0] == 1.0);
  }
}

TEST_CASE("spike-and-slab retained fraction and mean match the posterior") {
  PosteriorParams post{Tensor({1, 1}, {0.5}), Tensor({1, 1}, {0.8}),
                       Tensor({1, 1}, {-1.0})};
  const int n = 100000;
  RngStream rng(23);
  int kept = 0;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    SpikeSlabDraw d = sample_coefficients_spike_slab(post, rng);
    if (d.z_tilde.values[0] != 0.0) ++kept;
    sum += d.z_tilde.values[0];
  }
  CHECK(std::fabs(kept / static_cast<double>(n) - 0.5) < 0.01);

  // E[omega*z] = pi*mu; SE from var(omega*z) = pi*(var + mu^2) - (pi*mu)^2.
  const double want = 0.5 * 0.8;
  const double var = 0.5 * (std::exp(-1.0) + 0.64) - want * want;
  const double se = std::sqrt(var / n);
  CHECK(std::fabs(sum / n - want) < 3.0 * se);
}

TEST_CASE("straight-through estimator exposes the right tape gradients") {
  Tensor pi_v({1, 3}, {0.3, 0.6, 0.9});
  Tensor mu_v({1, 3}, {1.0, -2.0, 0.5});
  Tensor lv_v({1, 3}, {0.0, -1.0, 0.3});

  Graph g;
  Var pi = g.leaf(pi_v);
  Var mu = g.leaf(mu_v);
  Var lv = g.leaf(lv_v);
  RngStream rng(99);
  SpikeSlabVars draw = sample_coefficients_spike_slab(
      g, pi, mu, lv, rng, BernoulliEstimator::kStraightThrough);

  // Forward value is the binary draw times the Gaussian sample.
  for (std::size_t i = 0; i < 3; ++i) {
    if (draw.omega[i] == 0.0) {
      CHECK(draw.z_tilde.value()[i] == doctest::Approx(0.0));
    }
  }

  g.backward(g.sum(draw.z_tilde));
  // d(omega_eff * z)/d mu = omega, /d pi = z (the straight-through identity).
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(mu.grad()[i] == doctest::Approx(draw.omega[i]));
    CHECK(std::isfinite(pi.grad()[i]));
  }
  bool any = false;
  for (std::size_t i = 0; i < 3; ++i) {
    if (pi.grad()[i] != 0.0) any = true;
  }
  CHECK(any);
}

TEST_CASE("score-function estimator keeps pi off the sample path") {
  Tensor pi_v({1, 2}, {0.4, 0.7});
  Tensor mu_v({1, 2}, {1.0, -1.0});
  Tensor lv_v({1, 2}, {0.0, 0.0});

  Graph g;
  Var pi = g.leaf(pi_v);
  Var mu = g.leaf(mu_v);
  Var lv = g.leaf(lv_v);
  RngStream rng(7);
  SpikeSlabVars draw = sample_coefficients_spike_slab(
      g, pi, mu, lv, rng, BernoulliEstimator::kScoreFunction);

  g.backward(g.sum(draw.z_tilde));
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(pi.grad()[i] == 0.0);
    CHECK(mu.grad()[i] == doctest::Approx(draw.omega[i]));
  }

  // log q(omega | pi) matches the hand sum and carries pi gradients.
  double want = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    want += draw.omega[i] == 1.0 ? std::log(pi_v[i]) : std::log(1.0 - pi_v[i]);
  }
  CHECK(draw.log_prob_omega.value().item() == doctest::Approx(want));
  g.backward(draw.log_prob_omega);
  for (std::size_t i = 0; i < 2; ++i) {
    const double expect = draw.omega[i] == 1.0 ? 1.0 / pi_v[i]
                                               : -1.0 / (1.0 - pi_v[i]);
    CHECK(pi.grad()[i] == doctest::Approx(expect));
  }
}

TEST_CASE("posterior validation rejects broken parameters") {
  PosteriorParams bad{Tensor({1, 1}, {0.0}), Tensor({1, 1}, {0.0}),
                      Tensor({1, 1}, {0.0})};
  CHECK_THROWS_AS(bad.validate(), NumericError);
  PosteriorParams bad2{Tensor({1, 1}, {0.5}), Tensor({1, 1}, {0.0}),
                       Tensor({1, 1}, {11.0})};
  CHECK_THROWS_AS(bad2.validate(), NumericError);
  PosteriorParams mism{Tensor({1, 2}, {0.5, 0.5}), Tensor({1, 1}, {0.0}),
                       Tensor({1, 1}, {0.0})};
  CHECK_THROWS_AS(mism.validate(), ShapeError);
}
