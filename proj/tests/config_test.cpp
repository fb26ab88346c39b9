#include <doctest.h>

#include <string>

#include "taskvec/config.hpp"

using namespace taskvec;

namespace {

std::string config_error(const std::string& text) {
  try {
    parse_plan(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

bool mentions(const std::string& text, const std::string& needle) {
  return text.find(needle) != std::string::npos;
}

}  // namespace

TEST_CASE("empty config yields the benchmark defaults") {
  const ExperimentPlan plan = parse_plan("");
  CHECK(plan.suite.n_tasks == 4);
  CHECK(plan.suite.dim == 32);
  CHECK(plan.suite.heterogeneity == 0.8);
  CHECK(plan.finetune_steps == 200);
  CHECK(plan.finetune_lr == 0.01);
  CHECK(plan.regimes.size() == 4);
  CHECK(plan.seeds == std::vector<std::uint64_t>{1, 2, 3});
  CHECK(plan.base.batch == 128);
  CHECK(plan.base.lr == 5e-4);
  CHECK(plan.base.weight_decay == 0.01);
  CHECK(plan.base.epochs == 20);
  CHECK(plan.base.prior.kind == PriorSpec::Kind::kGaussian);
  CHECK_FALSE(plan.base.gating);
}

TEST_CASE("full config round-trips every section") {
  const std::string text = R"(
# experiment sweep
[suite]
seed = 9
n_tasks = 3
dim = 16          # feature dimension
classes = 4
heterogeneity = 0.25
rank = 2
train_per_task = 50
test_per_task = 25
mean_scale = 2.5
noise = 0.4
max_angle = 1.0

[finetune]
steps = 12
lr = 0.02

[train]
regimes = ["task_level_det", "sample_specific_vi"]
seeds = [4, 8]
prior = "spike_slab"
gating = true
batch = 16
lr = 1e-3
weight_decay = 0.05
epochs = 2
lambda_reg = 5e-3
k_train = 2
k_report = 8
slab_var = 2.0
pi_prior = 0.25

[gate]
psi1 = 0.1
psi2 = 1.5
rho = 0.02
eta = 0.75

[reg]
lambda_b = 1e-3
lambda_e = 1e-2
lambda_u = 1e-1
margin = 0.2
eps = 1e-6
)";
  const ExperimentPlan plan = parse_plan(text);
  CHECK(plan.suite.seed == 9);
  CHECK(plan.suite.n_tasks == 3);
  CHECK(plan.suite.dim == 16);
  CHECK(plan.suite.classes == 4);
  CHECK(plan.suite.heterogeneity == 0.25);
  CHECK(plan.suite.rank == 2);
  CHECK(plan.suite.train_per_task == 50);
  CHECK(plan.suite.test_per_task == 25);
  CHECK(plan.suite.mean_scale == 2.5);
  CHECK(plan.suite.noise == 0.4);
  CHECK(plan.suite.max_angle == 1.0);
  CHECK(plan.finetune_steps == 12);
  CHECK(plan.finetune_lr == 0.02);
  REQUIRE(plan.regimes.size() == 2);
  CHECK(plan.regimes[0] == Regime::kTaskLevelDet);
  CHECK(plan.regimes[1] == Regime::kSampleSpecificVi);
  CHECK(plan.seeds == std::vector<std::uint64_t>{4, 8});
  CHECK(plan.base.prior.kind == PriorSpec::Kind::kSpikeSlab);
  CHECK(plan.base.prior.slab_var == 2.0);
  CHECK(plan.base.prior.pi_prior == 0.25);
  CHECK(plan.base.gating);
  CHECK(plan.base.batch == 16);
  CHECK(plan.base.lr == 1e-3);
  CHECK(plan.base.weight_decay == 0.05);
  CHECK(plan.base.epochs == 2);
  CHECK(plan.base.lambda_reg == 5e-3);
  CHECK(plan.base.k_train == 2);
  CHECK(plan.base.k_report == 8);
  CHECK(plan.base.gate.psi1 == 0.1);
  CHECK(plan.base.gate.psi2 == 1.5);
  CHECK(plan.base.gate.rho == 0.02);
  CHECK(plan.base.gate.eta == 0.75);
  // The exploration anchor follows the configured start.
  CHECK(plan.base.gate.psi1_0 == 0.1);
  CHECK(plan.base.gate.psi2_0 == 1.5);
  CHECK(plan.base.reg.lambda_b == 1e-3);
  CHECK(plan.base.reg.lambda_e == 1e-2);
  CHECK(plan.base.reg.lambda_u == 1e-1);
  CHECK(plan.base.reg.margin == 0.2);
  CHECK(plan.base.reg.eps == 1e-6);
}

TEST_CASE("config errors name the offending field") {
  CHECK(mentions(config_error("[suite]\nn_tasks = 1\n"),
                 "n_tasks must be >= 2"));
  CHECK(mentions(config_error("[suite]\nbogus = 1\n"), "suite.bogus"));
  CHECK(mentions(config_error("[nonsense]\nx = 1\n"), "[nonsense]"));
  CHECK(mentions(config_error("[suite]\ndim = 8\ndim = 9\n"),
                 "duplicate key suite.dim"));
  CHECK(mentions(config_error("[suite]\ndim = 2.5\n"),
                 "suite.dim must be an integer"));
  CHECK(mentions(config_error("[suite]\ndim = \"eight\"\n"),
                 "suite.dim must be an integer"));
  CHECK(mentions(config_error("[suite]\nnoise = what\n"),
                 "cannot parse value"));
  CHECK(mentions(config_error("[train]\ngating = 1\n"),
                 "train.gating must be true or false"));
  CHECK(mentions(config_error("[train]\nprior = \"laplace\"\n"),
                 "train.prior"));
  CHECK(mentions(config_error("[train]\nregimes = [\"warp\"]\n"),
                 "unknown regime: warp"));
  CHECK(mentions(config_error("[train]\nregimes = [1, 2]\n"),
                 "train.regimes"));
  CHECK(mentions(config_error("[train]\nseeds = [1, 1]\n"),
                 "train.seeds must not repeat"));
  CHECK(mentions(config_error("[train]\nseeds = [1, 2\n"),
                 "unterminated array"));
  CHECK(mentions(config_error("dim = 8\n"), "outside of any [section]"));
  CHECK(mentions(config_error("[suite]\ndim\n"), "expected 'key = value'"));
  CHECK(mentions(config_error("[suite]\ndim =\n"), "empty value"));
  CHECK(mentions(config_error("[suite\ndim = 8\n"),
                 "malformed section header"));
}

TEST_CASE("comments and quoting interact correctly") {
  const ExperimentPlan plan = parse_plan(
      "[train]\nprior = \"spike_slab\"  # a # inside a comment\n");
  CHECK(plan.base.prior.kind == PriorSpec::Kind::kSpikeSlab);
  // '#' inside a quoted string is content, not a comment.
  CHECK(mentions(config_error("[train]\nprior = \"spike#slab\"\n"),
                 "train.prior must be"));
}
