from .errors import ConfigError, GuidgError, NumericError, RejectedInputError, ReportWriteError
from .nn_core import (
    GradientSet,
    MlpModel,
    OptimizerState,
    backprop_grads,
    child_seed,
    fit_model,
    grad_check,
    init_optimizer,
    loss_eval,
    mlp_forward,
    optimizer_step,
)
from .datagen import (
    DomainDataset,
    SplitPair,
    few_shot_subsample,
    gen_domain_suite,
    gen_toy_regression,
    split_step_data,
    toy_target,
)
from .miniclip import (
    EncoderPair,
    PromptExpert,
    build_prompt,
    pretrain_mock_encoders,
    text_features,
    zero_shot_predict,
)
from .guidg import (
    BmaState,
    CmattnParams,
    ExpertSet,
    GuidgModel,
    bma_update,
    cmattn_weights,
    ensemble_infer,
    guided_finetune_step,
    regularizer_eval,
    toy_aggregate_train,
    train_domain_expert,
    weight_space_blend,
)
from .bounds import (
    bound_ratio,
    bounds_report,
    c_delta,
    check_remark3,
    corollary_epsilon,
    upp_ensemble,
    toy_bound_configs,
    upp_universal,
    vc_dim_approx,
)
from .harness import (
    emit_report,
    run_ablation,
    run_bounds,
    run_dg_benchmark,
    run_grad_checks,
    run_toy_experiment,
)

__all__ = [
    "ConfigError",
    "GuidgError",
    "NumericError",
    "RejectedInputError",
    "ReportWriteError",
    "GradientSet",
    "MlpModel",
    "OptimizerState",
    "backprop_grads",
    "child_seed",
    "fit_model",
    "grad_check",
    "init_optimizer",
    "loss_eval",
    "mlp_forward",
    "optimizer_step",
    "DomainDataset",
    "SplitPair",
    "few_shot_subsample",
    "gen_domain_suite",
    "gen_toy_regression",
    "split_step_data",
    "toy_target",
    "EncoderPair",
    "PromptExpert",
    "build_prompt",
    "pretrain_mock_encoders",
    "text_features",
    "zero_shot_predict",
    "BmaState",
    "CmattnParams",
    "ExpertSet",
    "GuidgModel",
    "bma_update",
    "cmattn_weights",
    "ensemble_infer",
    "guided_finetune_step",
    "regularizer_eval",
    "toy_aggregate_train",
    "train_domain_expert",
    "weight_space_blend",
    "bound_ratio",
    "bounds_report",
    "c_delta",
    "check_remark3",
    "corollary_epsilon",
    "upp_ensemble",
    "toy_bound_configs",
    "upp_universal",
    "vc_dim_approx",
    "emit_report",
    "run_ablation",
    "run_bounds",
    "run_dg_benchmark",
    "run_grad_checks",
    "run_toy_experiment",
]
