"""Sample-specific composition of task vectors with variational coefficients."""

from taskvec._core import (
    ExperimentConfig,
    GateParams,
    MetricsRecord,
    NumericError,
    ParamSet,
    PriorSpec,
    RegWeights,
    SuiteSpec,
    TaskSuite,
    TaskVectorPool,
    TrainedState,
    __version__,
    build_pool,
    compose,
    composed_logits,
    evaluate,
    finetune_base,
    gate_filter_apply,
    gate_filter_baseline,
    generate_task_suite,
    init_base_model,
    load_checkpoint,
    load_suite,
    metrics_csv,
    mlp_logits,
    pool_from_deltas,
    read_metrics_csv,
    save_checkpoint,
    save_suite,
    state_to_params,
    svd_energy,
    task_addition,
    train_regime,
    write_metrics_csv,
)

__all__ = [
    "ExperimentConfig",
    "GateParams",
    "MetricsRecord",
    "NumericError",
    "ParamSet",
    "PriorSpec",
    "RegWeights",
    "SuiteSpec",
    "TaskSuite",
    "TaskVectorPool",
    "TrainedState",
    "__version__",
    "build_pool",
    "compose",
    "composed_logits",
    "evaluate",
    "experiment_config",
    "finetune_base",
    "gate_filter_apply",
    "gate_filter_baseline",
    "generate_task_suite",
    "init_base_model",
    "load_checkpoint",
    "load_suite",
    "metrics_csv",
    "mlp_logits",
    "pool_from_deltas",
    "read_metrics_csv",
    "save_checkpoint",
    "save_suite",
    "state_to_params",
    "suite_spec",
    "svd_energy",
    "task_addition",
    "train_regime",
    "write_metrics_csv",
]


def suite_spec(**kwargs):
    """SuiteSpec built from keyword arguments; unknown names raise TypeError."""
    spec = SuiteSpec()
    for key, value in kwargs.items():
        if not hasattr(spec, key):
            raise TypeError(f"unknown suite field: {key}")
        setattr(spec, key, value)
    return spec


def experiment_config(regime="sample_specific_vi", prior="gaussian", **kwargs):
    """ExperimentConfig with flat keyword access to the nested gate, reg, and
    prior fields."""
    cfg = ExperimentConfig()
    cfg.regime = regime
    cfg.prior.kind = prior
    for key, value in kwargs.items():
        for obj in (cfg, cfg.prior, cfg.gate, cfg.reg):
            if hasattr(obj, key):
                setattr(obj, key, value)
                break
        else:
            raise TypeError(f"unknown config field: {key}")
    return cfg
