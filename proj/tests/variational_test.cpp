#include <doctest.h>

#include <cmath>
#include <vector>

#include "taskvec/variational.hpp"

using namespace taskvec;

namespace {

constexpr double kLn2 = 0.6931471805599453;

// 2-class logistic toy: logits = [0, a*z + c], one coefficient, one sample.
struct LogisticToy {
  double a = 1.0, c = 0.0;
  int label = 1;

  double loglik(double z) const {
    const double t = a * z + c;
    // log softmax over [0, t]
    const double hi = std::max(0.0, t);
    const double lse = hi + std::log(std::exp(-hi) + std::exp(t - hi));
    return (label == 1 ? t : 0.0) - lse;
  }

  LogLikBuilder builder() const {
    const double aa = a, cc = c;
    return [aa, cc](Graph& g, Var z, const std::vector<int>& y) {
      Tensor w({1, 2}, {0.0, aa});
      Tensor b({2}, {0.0, cc});
      Var logits = g.add(g.matmul(z, g.constant(w)), g.constant(b));
      return g.neg(g.softmax_cross_entropy(logits, y));
    };
  }
};

// Simpson integration of f over [lo, hi] with n (even) panels.
template <typename F>
double simpson(F f, double lo, double hi, int n) {
  const double h = (hi - lo) / n;
  double acc = f(lo) + f(hi);
  for (int i = 1; i < n; ++i) {
    acc += f(lo + i * h) * (i % 2 == 1 ? 4.0 : 2.0);
  }
  return acc * h / 3.0;
}

double log_normal(double z, double mu, double var) {
  const double d = z - mu;
  return -0.5 * (std::log(2.0 * M_PI * var) + d * d / var);
}

// Exact log p(y) = log ∫ p(y|z) N(z; 0, slab) dz by quadrature.
double log_marginal_quadrature(const LogisticToy& toy, double slab_var) {
  const double s = std::sqrt(slab_var);
  return std::log(simpson(
      [&](double z) {
        return std::exp(toy.loglik(z) + log_normal(z, 0.0, slab_var));
      },
      -10.0 * s, 10.0 * s, 4000));
}

// Deterministic ELBO for a N(mu, var) posterior: quadrature expected
// log-likelihood minus the closed-form KL.
double elbo_quadrature(const LogisticToy& toy, double mu, double var,
                       double slab_var) {
  const double sd = std::sqrt(var);
  const double ell = simpson(
      [&](double z) {
        return toy.loglik(z) * std::exp(log_normal(z, mu, var));
      },
      mu - 10.0 * sd, mu + 10.0 * sd, 4000);
  return ell - kl_gaussian_slab(mu, var, slab_var);
}

}  // namespace

TEST_CASE("kl_bernoulli matches hand values") {
  CHECK(kl_bernoulli(0.5, 0.5) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(kl_bernoulli(1.0, 0.5) == doctest::Approx(kLn2).epsilon(1e-12));
  CHECK(kl_bernoulli(0.0, 0.5) == doctest::Approx(kLn2).epsilon(1e-12));
  CHECK(kl_bernoulli(0.8, 0.5) ==
        doctest::Approx(0.1927447570217575).epsilon(1e-12));

  CHECK_THROWS(kl_bernoulli(0.5, 0.0));
  CHECK_THROWS(kl_bernoulli(0.5, 1.0));
  CHECK_THROWS(kl_bernoulli(-0.1, 0.5));
  CHECK_THROWS(kl_bernoulli(1.1, 0.5));
}

TEST_CASE("kl_gaussian_slab matches hand values") {
  CHECK(kl_gaussian_slab(0.0, 1.0, 1.0) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(kl_gaussian_slab(1.0, 1.0, 1.0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(kl_gaussian_slab(0.0, 0.25, 1.0) ==
        doctest::Approx(0.3181471805599453).epsilon(1e-12));

  CHECK_THROWS(kl_gaussian_slab(0.0, 0.0, 1.0));
  CHECK_THROWS(kl_gaussian_slab(0.0, 1.0, -1.0));
}

TEST_CASE("both KL divergences are nonnegative everywhere") {
  RngStream rng(606);
  for (int i = 0; i < 10000; ++i) {
    const double gamma = rng.uniform();
    const double pi = 0.001 + 0.998 * rng.uniform();
    CHECK(kl_bernoulli(gamma, pi) >= 0.0);

    const double mu = rng.normal() * 3.0;
    const double var = std::exp(rng.normal());
    const double slab = std::exp(rng.normal());
    CHECK(kl_gaussian_slab(mu, var, slab) >= 0.0);
  }
}

TEST_CASE("graph KL sums agree with the scalar forms and their gradients") {
  RngStream rng(7);
  Tensor logits = Tensor::randn({2, 3}, rng);
  Tensor mu = Tensor::randn({2, 3}, rng);
  Tensor lv = Tensor::randn({2, 3}, rng);
  const double pi_prior = 0.37;
  const double slab = 1.7;

  Graph g;
  Var gamma = g.sigmoid(g.constant(logits));
  Var vmu = g.constant(mu);
  Var vlv = g.constant(lv);

  double want_b = 0.0, want_g = 0.0, want_w = 0.0;
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    const double gm = 1.0 / (1.0 + std::exp(-logits[i]));
    want_b += kl_bernoulli(gm, pi_prior);
    const double kg = kl_gaussian_slab(mu[i], std::exp(lv[i]), slab);
    want_g += kg;
    want_w += gm * kg;
  }
  CHECK(kl_bernoulli_sum(g, gamma, pi_prior).value().item() ==
        doctest::Approx(want_b).epsilon(1e-10));
  CHECK(kl_gaussian_slab_sum(g, vmu, vlv, slab).value().item() ==
        doctest::Approx(want_g).epsilon(1e-10));
  CHECK(kl_gaussian_slab_weighted_sum(g, gamma, vmu, vlv, slab)
            .value()
            .item() == doctest::Approx(want_w).epsilon(1e-10));

  auto bern_fn = [pi_prior](Graph& h, Var x) {
    return kl_bernoulli_sum(h, h.sigmoid(x), pi_prior);
  };
  CHECK(grad_check(bern_fn, logits, 1e-5) < 1e-5);

  auto gauss_mu = [&lv, slab](Graph& h, Var x) {
    return kl_gaussian_slab_sum(h, x, h.constant(lv), slab);
  };
  CHECK(grad_check(gauss_mu, mu, 1e-5) < 1e-5);
  auto gauss_lv = [&mu, slab](Graph& h, Var x) {
    return kl_gaussian_slab_sum(h, h.constant(mu), x, slab);
  };
  CHECK(grad_check(gauss_lv, lv, 1e-5) < 1e-5);
}

TEST_CASE("monte-carlo KL estimates bracket the closed forms") {
  RngStream rng(2025);
  PriorSpec prior;
  prior.slab_var = 1.3;
  prior.pi_prior = 0.4;

  for (int rep = 0; rep < 20; ++rep) {
    PosteriorParams post{Tensor({1, 1}, {0.05 + 0.9 * rng.uniform()}),
                         Tensor({1, 1}, {rng.normal()}),
                         Tensor({1, 1}, {rng.normal()})};
    const double closed_g =
        kl_gaussian_slab(post.mu[0], std::exp(post.log_var[0]), prior.slab_var);
    McEstimate mg = mc_kl_estimate(post, prior, 20000, rng);
    CHECK(std::fabs(mg.value - closed_g) < 3.0 * mg.std_error + 1e-9);

    const double closed_b = kl_bernoulli(post.pi[0], prior.pi_prior);
    McEstimate mb = mc_kl_bernoulli_estimate(post, prior, 20000, rng);
    CHECK(std::fabs(mb.value - closed_b) < 3.0 * mb.std_error + 1e-9);
  }

  // Zero-KL configuration.
  PosteriorParams pinned{Tensor({1, 1}, {prior.pi_prior}),
                         Tensor({1, 1}, {0.0}),
                         Tensor({1, 1}, {std::log(prior.slab_var)})};
  McEstimate mz = mc_kl_estimate(pinned, prior, 20000, rng);
  CHECK(std::fabs(mz.value) < 3.0 * mz.std_error + 1e-9);

  CHECK_THROWS(mc_kl_estimate(pinned, prior, 100, rng));
}

TEST_CASE("monte-carlo KL standard error shrinks like 1/sqrt(n)") {
  RngStream rng(31);
  PriorSpec prior;
  PosteriorParams post{Tensor({1, 1}, {0.5}), Tensor({1, 1}, {1.2}),
                       Tensor({1, 1}, {-0.5})};
  McEstimate small = mc_kl_estimate(post, prior, 10000, rng);
  McEstimate big = mc_kl_estimate(post, prior, 40000, rng);
  CHECK(big.std_error < small.std_error * 0.7);
}

TEST_CASE("gaussian ELBO stays below the quadrature log-marginal") {
  RngStream rng(404);
  for (int rep = 0; rep < 10; ++rep) {
    LogisticToy toy;
    toy.a = 0.5 + rng.uniform() * 2.0;
    toy.c = rng.normal() * 0.5;
    toy.label = rng.uniform() < 0.5 ? 0 : 1;
    const double slab = 0.5 + rng.uniform();

    const double log_z = log_marginal_quadrature(toy, slab);
    for (int q = 0; q < 10; ++q) {
      const double mu = rng.normal();
      const double var = std::exp(rng.normal() * 0.8);
      const double elbo = elbo_quadrature(toy, mu, var, slab);
      CHECK(elbo <= log_z + 1e-6);
    }
  }
}

TEST_CASE("elbo_gaussian breakdown: identity, pinned posterior, MC agreement") {
  // Zero-weight net pins the posterior at mu=0, sigma=1.
  InferenceNet net(2, 1, 1);
  Tensor x({1, 2}, {0.3, -0.2});
  std::vector<int> y = {1};
  LogisticToy toy;
  toy.a = 1.3;
  toy.c = -0.4;

  PriorSpec prior;  // slab_var = 1 → KL(N(0,1) || N(0,1)) = 0
  RngStream rng(55);
  ElboBreakdown b =
      elbo_gaussian(x, y, net, toy.builder(), prior, rng, /*k=*/256);

  CHECK(b.kl_gaussian_total == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(b.kl_bernoulli_total == 0.0);
  CHECK(b.elbo ==
        doctest::Approx(b.expected_log_lik - b.kl_bernoulli_total -
                        b.kl_gaussian_total)
            .epsilon(1e-10));

  // Against the quadrature ELL for q = N(0,1).
  const double want = elbo_quadrature(toy, 0.0, 1.0, prior.slab_var);
  CHECK(b.elbo == doctest::Approx(want).epsilon(0.05));

  CHECK_THROWS(elbo_spike_slab(x, y, net, toy.builder(), prior, rng, 4));
}

TEST_CASE("degenerate posterior recovers the point log-likelihood") {
  InferenceNet net(2, 1, 1);
  // Drive mu to a fixed z* via the mu bias; log-var bias to the clamp floor.
  net.weights().tensor("mu.b")[0] = 0.9;
  net.weights().tensor("lv.b")[0] = -20.0;  // clamps to -10

  LogisticToy toy;
  toy.a = 2.0;
  toy.c = 0.1;
  Tensor x({1, 2}, {0.5, 0.5});
  std::vector<int> y = {1};
  PriorSpec prior;

  RngStream rng(77);
  ElboBreakdown b = elbo_gaussian(x, y, net, toy.builder(), prior, rng, 64);
  const double point = toy.loglik(0.9);
  const double kl = kl_gaussian_slab(0.9, std::exp(-10.0), prior.slab_var);
  CHECK(b.expected_log_lik == doctest::Approx(point).epsilon(1e-3));
  CHECK(b.elbo == doctest::Approx(point - kl).epsilon(1e-3));
}

TEST_CASE("spike-slab ELBO enumeration oracle on a discrete toy") {
  // z discretized to a grid; q(z|omega=1) = N(mu, var) on the grid,
  // q(z|omega=0) = prior slab on the grid. Jensen then holds exactly in the
  // discrete space with the A.2 three-term decomposition.
  RngStream rng(321);
  const std::vector<double> grid = {-1.0, 0.0, 1.0};

  for (int rep = 0; rep < 40; ++rep) {
    LogisticToy toy;
    toy.a = 0.5 + rng.uniform();
    toy.c = rng.normal() * 0.3;
    toy.label = rng.uniform() < 0.5 ? 0 : 1;
    const double slab = 0.6 + rng.uniform();
    const double pi_prior = 0.1 + 0.8 * rng.uniform();

    const double gamma = 0.05 + 0.9 * rng.uniform();
    const double mu = rng.normal() * 0.8;
    const double var = std::exp(rng.normal() * 0.5);

    auto normalized = [&](double m, double v) {
      std::vector<double> p(grid.size());
      double total = 0.0;
      for (std::size_t i = 0; i < grid.size(); ++i) {
        p[i] = std::exp(log_normal(grid[i], m, v));
        total += p[i];
      }
      for (double& pi : p) pi /= total;
      return p;
    };
    const std::vector<double> qz = normalized(mu, var);
    const std::vector<double> pz = normalized(0.0, slab);

    // Exact log-marginal by enumeration over (omega, z).
    double marginal = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      marginal += (1.0 - pi_prior) * pz[i] * std::exp(toy.loglik(0.0));
      marginal += pi_prior * pz[i] * std::exp(toy.loglik(grid[i]));
    }
    const double log_z = std::log(marginal);

    // A.2-style ELBO: E_q[loglik] - KL_bern - gamma * KL(q(z)||p(z)).
    double ell = 0.0, kl_z = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      ell += gamma * qz[i] * toy.loglik(grid[i]);
      kl_z += qz[i] * std::log(qz[i] / pz[i]);
    }
    ell += (1.0 - gamma) * toy.loglik(0.0);
    const double elbo = ell - kl_bernoulli(gamma, pi_prior) - gamma * kl_z;

    CHECK(elbo <= log_z + 1e-9);
  }
}

TEST_CASE("spike-slab ELBO with gamma=1 reduces to the gaussian ELBO") {
  InferenceNet net(2, 2, 1);
  net.weights().tensor("pi.b")[0] = 17.0;  // sigmoid -> 1 - 4e-8
  net.weights().tensor("pi.b")[1] = 17.0;
  net.weights().tensor("mu.b")[0] = 0.4;
  net.weights().tensor("mu.b")[1] = -0.3;

  Tensor x({1, 2}, {0.1, 0.2});
  std::vector<int> y = {1};
  // Two coefficients enter one logistic unit through a weight row.
  LogLikBuilder model = [](Graph& g, Var z, const std::vector<int>& yy) {
    Tensor w({2, 2}, {0.0, 1.0, 0.0, -0.5});
    Var logits = g.matmul(z, g.constant(w));
    return g.neg(g.softmax_cross_entropy(logits, yy));
  };

  PriorSpec gprior;
  gprior.kind = PriorSpec::Kind::kGaussian;
  gprior.slab_var = 1.2;
  PriorSpec ssprior = gprior;
  ssprior.kind = PriorSpec::Kind::kSpikeSlab;
  ssprior.pi_prior = 0.3;

  // Shared frozen noise so both objectives see identical Gaussian draws and
  // the spike draws are all-ones (gamma = 1).
  const int k = 8;
  NoiseDraws frozen;
  RngStream rng(13);
  for (int s = 0; s < k; ++s) {
    frozen.eps.push_back(Tensor::randn({1, 2}, rng));
    Tensor ones({1, 2});
    ones[0] = ones[1] = 1.0;
    frozen.omega.push_back(ones);
    Tensor shift({1, 2});
    // omega - pi with pi essentially 1: shift essentially 0.
    shift[0] = shift[1] = 0.0;
    frozen.shift.push_back(shift);
  }

  Graph g1;
  ElboGraph eg = build_elbo_graph(g1, x, y, net, false, model, gprior, k,
                                  nullptr, &frozen, nullptr);
  Graph g2;
  ElboGraph es = build_elbo_graph(g2, x, y, net, false, model, ssprior, k,
                                  nullptr, &frozen, nullptr);

  CHECK(es.expected_log_lik.value().item() ==
        doctest::Approx(eg.expected_log_lik.value().item()).epsilon(1e-6));
  // Bernoulli KL reduces to sum over coefficients of ln(1/pi_prior).
  CHECK(es.kl_bernoulli_total.value().item() ==
        doctest::Approx(2.0 * std::log(1.0 / ssprior.pi_prior)).epsilon(1e-5));
  // gamma-weighted Gaussian KL reduces to the unweighted one.
  CHECK(es.kl_gaussian_total.value().item() ==
        doctest::Approx(eg.kl_gaussian_total.value().item()).epsilon(1e-5));
  CHECK(es.elbo.value().item() ==
        doctest::Approx(eg.elbo.value().item() -
                        2.0 * std::log(1.0 / ssprior.pi_prior))
            .epsilon(1e-5));
}

TEST_CASE("ELBO gradients pass finite-difference checks with frozen noise") {
  RngStream init(88);
  InferenceNet net = InferenceNet::init(3, 2, 1, init, 6);
  RngStream wiggle(89);
  for (const char* head : {"pi.W", "pi.b", "mu.W", "mu.b", "lv.W", "lv.b"}) {
    Tensor& w = net.weights().tensor(head);
    for (std::size_t i = 0; i < w.numel(); ++i) {
      w[i] += wiggle.normal() * 0.2;
    }
  }

  Tensor x = Tensor::randn({4, 3}, init);
  std::vector<int> y = {0, 1, 1, 0};
  LogLikBuilder model = [](Graph& g, Var z, const std::vector<int>& yy) {
    Tensor w({2, 2}, {1.0, -1.0, 0.5, 0.8});
    Var logits = g.matmul(z, g.constant(w));
    return g.neg(g.softmax_cross_entropy(logits, yy));
  };

  for (auto kind : {PriorSpec::Kind::kGaussian, PriorSpec::Kind::kSpikeSlab}) {
    PriorSpec prior;
    prior.kind = kind;
    prior.slab_var = 0.9;
    prior.pi_prior = 0.45;

    // Phase 1: record the noise at the base point.
    NoiseDraws frozen;
    {
      Graph g;
      RngStream rng(1234);
      build_elbo_graph(g, x, y, net, false, model, prior, 3, &rng, nullptr,
                       &frozen);
    }

    // Analytic gradients at the base point under the frozen noise.
    Graph g;
    ElboGraph eg = build_elbo_graph(g, x, y, net, true, model, prior, 3,
                                    nullptr, &frozen, nullptr);
    g.backward(eg.elbo);

    InferenceNet probe = net;
    auto eval = [&] {
      Graph h;
      return build_elbo_graph(h, x, y, probe, false, model, prior, 3, nullptr,
                              &frozen, nullptr)
          .elbo.value()
          .item();
    };

    const double eps = 1e-5;
    for (const auto& [name, var] : eg.net.named()) {
      const Tensor& analytic = var.grad();
      Tensor& w = probe.weights().tensor(name);
      double worst = 0.0;
      for (std::size_t i = 0; i < w.numel(); ++i) {
        const double saved = w[i];
        w[i] = saved + eps;
        const double hi = eval();
        w[i] = saved - eps;
        const double lo = eval();
        w[i] = saved;
        const double fd = (hi - lo) / (2.0 * eps);
        worst = std::max(worst,
                         std::fabs(analytic[i] - fd) /
                             std::max(1.0, std::fabs(analytic[i]) + std::fabs(fd)));
      }
      INFO((kind == PriorSpec::Kind::kGaussian ? "gaussian " : "spike-slab ")
           << name);
      CHECK(worst < 1e-4);
    }
  }
}
