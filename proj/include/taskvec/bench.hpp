#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "taskvec/gating.hpp"
#include "taskvec/graph.hpp"
#include "taskvec/inference_net.hpp"
#include "taskvec/optim.hpp"
#include "taskvec/suite.hpp"
#include "taskvec/task_vectors.hpp"
#include "taskvec/variational.hpp"

namespace taskvec {

// ---------------------------------------------------------------- base model

// Two-layer MLP dim -> hidden -> classes with tanh hidden units; tensors are
// named fc1.W, fc1.b, fc2.W, fc2.b so the per-tensor partition yields four
// blocks.
ParamSet init_base_model(int dim, int classes, RngStream& rng, int hidden = 32);

// Row-wise logits (B, classes) for a feature batch under explicit parameters.
Tensor mlp_logits(const Tensor& x, const ParamSet& theta);

// Mean softmax cross entropy of mlp_logits(x, theta) against labels.
double mlp_loss(const Tensor& x, const std::vector<int>& y,
                const ParamSet& theta);

// Full-batch gradient descent on the task's train split; steps=0 returns
// theta_0 unchanged. Divergence surfaces as NumericError.
ParamSet finetune_base(const ParamSet& theta_0, const TaskData& task, int steps,
                       double lr);

// Fine-tune one model per task and stack the deltas into a pool.
TaskVectorPool build_pool(
    const ParamSet& theta_0, const TaskSuite& suite, int steps, double lr,
    const PartitionSpec& scheme = PartitionSpec::per_tensor());

// ------------------------------------------------------------ composed model

// Logits of the composed model. Row b of z scales the pool blocks for sample
// b; a single-row z is shared across the whole batch.
Tensor composed_logits(const Tensor& x, const Tensor& z,
                       const ParamSet& theta_0, const TaskVectorPool& pool);

// Graph-side counterpart returning per-sample log-likelihoods
// log p(y_b | x_b, z_b), shape (B,). Differentiable in z only.
Var composed_loglik(Graph& g, Var z, const Tensor& x, const std::vector<int>& y,
                    std::shared_ptr<const ParamSet> theta_0,
                    std::shared_ptr<const TaskVectorPool> pool);

// Posterior heads evaluated for a whole batch, off-graph: (B, N*M) tensors.
struct PosteriorBatch {
  Tensor pi, mu, log_var;
};
PosteriorBatch posterior_batch_values(const InferenceNet& net,
                                      const Tensor& x_batch);

// ------------------------------------------------------------- configuration

enum class Regime {
  kTaskLevelDet,       // one learnable coefficient matrix for all samples
  kSampleSpecificDet,  // inference net, mean head only
  kTaskLevelVi,        // free shared posterior parameters
  kSampleSpecificVi,   // full amortized variational posterior
};

const char* regime_name(Regime regime);
Regime parse_regime(const std::string& name);

struct ExperimentConfig {
  std::uint64_t seed = 1;
  Regime regime = Regime::kSampleSpecificVi;
  PriorSpec prior;
  bool gating = false;
  int batch = 128;
  double lr = 5e-4;
  double weight_decay = 0.01;
  int epochs = 20;
  double lambda_reg = 1e-3;  // weight on the bundled gate regularizers
  int k_train = 1;
  int k_report = 16;
  GateParams gate;
  RegWeights reg;
  void validate() const;
};

struct MetricsRecord {
  std::string regime;
  std::uint64_t seed = 0;
  std::string prior;
  bool gating = false;
  std::vector<double> task_accuracy;
  double avg_accuracy = 0.0;
  double gated_ratio = 1.0;
  std::vector<double> elbo_trace;  // one entry per epoch: the regime's
                                   // maximized objective on the full training
                                   // set (mean log-lik for the deterministic
                                   // regimes; the ELBO, minus the weighted
                                   // gate regularizers when gating is on, for
                                   // the VI regimes), with k_report draws and
                                   // common random numbers across epochs
};

// --------------------------------------------------------------- experiments

struct TrainedState {
  Regime regime;
  ExperimentConfig config;
  InferenceNet net;  // sample-specific regimes; untouched otherwise
  Tensor lam;        // (1, N*M), task_level_det
  Tensor post_pi_logit, post_mu, post_log_var;  // (1, N*M), task_level_vi
  double psi1, psi2;  // gate scale after training (trained when gating is on)
  EmaStats ema;       // coefficient statistics frozen for inference gating

  TrainedState(ExperimentConfig cfg, InferenceNet n)
      : regime(cfg.regime),
        config(std::move(cfg)),
        net(std::move(n)),
        psi1(config.gate.psi1),
        psi2(config.gate.psi2) {}
};

std::pair<TrainedState, MetricsRecord> train_regime(
    const ExperimentConfig& config, const TaskSuite& suite,
    const TaskVectorPool& pool, const ParamSet& theta_0);

// Deterministic posterior-mean evaluation; with hard_gate_eval the Dirac-path
// coefficients pass through the hard gate and the gated ratio is measured,
// otherwise the ratio is reported as 1.
MetricsRecord evaluate(const TrainedState& state, const TaskSuite& suite,
                       const TaskVectorPool& pool, const ParamSet& theta_0,
                       bool hard_gate_eval);

// Trains the deterministic task-level baseline, then re-evaluates it with the
// gate applied as a magnitude filter (U = 0 for shared coefficients, so the
// threshold reduces to psi1).
MetricsRecord gate_filter_baseline(const ExperimentConfig& config,
                                   const TaskSuite& suite,
                                   const TaskVectorPool& pool,
                                   const ParamSet& theta_0);
MetricsRecord gate_filter_apply(const TrainedState& task_level_state,
                                const TaskSuite& suite,
                                const TaskVectorPool& pool,
                                const ParamSet& theta_0);

// Trained state flattened to named tensors for checkpointing.
ParamSet state_to_params(const TrainedState& state);

// ------------------------------------------------------------------- metrics

// Fixed column order: regime,seed,prior,gating,avg_accuracy,gated_ratio,
// acc_task_0..acc_task_{T-1}. Numbers print as %.17g so identical runs give
// byte-identical files.
std::string metrics_csv_header(std::size_t n_tasks);
std::string metrics_csv_row(const MetricsRecord& rec);
std::string metrics_csv(const std::vector<MetricsRecord>& records);
void write_metrics_csv(const std::vector<MetricsRecord>& records,
                       const std::string& path);
std::vector<MetricsRecord> read_metrics_csv(const std::string& path);

}  // namespace taskvec
