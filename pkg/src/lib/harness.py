"""
Experiment runners and report emission.

Runners take a validated ExperimentConfig and return a result object
holding the table rows, the seed list and anything the manifest should
record. emit_report writes each table (CSV or JSON lines, 6 significant
digits) next to a manifest. Everything but the manifest's wall-clock
fields is a pure function of (config, seed).
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..models import (
    AblationCell,
    Activation,
    DataMode,
    DgRow,
    DgSection,
    ExperimentConfig,
    GradCheckReport,
    LossKind,
    RegularizerConfig,
    RegularizerKind,
    ReportFormat,
    ToyRow,
    ToySection,
    WeightReport,
    WeightingMode,
)
from ..store.formats import (
    ABLATION_COLUMNS,
    ARTIFACT_VERSION,
    BOUNDS_SECTION_COLUMN,
    DG_COLUMNS,
    GRADCHECK_COLUMNS,
    MANIFEST_SUFFIX,
    REPORT_FLOAT_FORMAT,
    TOY_COLUMNS,
    WEIGHT_COLUMNS,
)
from .bounds import bound_ratio, bounds_report, toy_bound_configs
from .datagen import (
    DomainDataset,
    SplitPair,
    few_shot_subsample,
    gen_domain_suite,
    gen_toy_regression,
    partition_by_sign,
    renormalize_pi,
    split_step_data,
    suite_geometry,
)
from .errors import ConfigError, NumericError, ReportWriteError
from .guidg import (
    TOY_SCALE,
    CmattnParams,
    ExpertSet,
    FinetuneSettings,
    GuidedBatch,
    GuidgModel,
    ensemble_logits,
    erm_train,
    guided_objective,
    guidg_train,
    init_toy_aggregator,
    model_accuracy,
    toy_aggregate_predict,
    toy_aggregate_train,
)
from .miniclip import (
    EncoderPair,
    PromptExpert,
    init_encoder_pair,
    pretrain_mock_encoders,
    text_features,
    zero_shot_accuracy,
)
from .nn_core import (
    MlpModel,
    child_seed,
    finite_difference_check,
    fit_model,
    forward_batch,
    grad_check,
    kink_margin,
    loss_eval,
    make_rng,
)

logger = logging.getLogger(__name__)

# Reference toy rows (h1 -> R_B, R_O, E_B, E_O, R, r), printed next to ours.
REFERENCE_TOY_ROWS = {
    60: (0.689, 0.599, 0.246, 0.220, 1.118, 1.120),
    80: (0.670, 0.599, 0.263, 0.220, 1.195, 1.482),
    100: (0.659, 0.599, 0.301, 0.220, 1.368, 1.843),
}

WEIGHT_SANITY_RATE = 0.8
ABLATION_VARIANTS = ("single", "experts_uniform", "experts_learnable")


def _seed_list(cfg: ExperimentConfig) -> List[int]:
    repeats = cfg.repeat_count()
    if repeats < 1:
        raise ConfigError("repeat count must be >= 1")
    return [cfg.seed + k for k in range(repeats)]


# =============================================================================
# Toy regression table
# =============================================================================

@dataclass
class ToyResult:
    config: ExperimentConfig
    seeds: List[int]
    rows: List[ToyRow]
    per_repeat: pd.DataFrame
    bounds: Dict[int, Dict[str, object]] = field(default_factory=dict)
    elapsed_seconds: float = 0.0

    name = "toy"

    def tables(self) -> Dict[str, pd.DataFrame]:
        frame = pd.DataFrame([row.model_dump() for row in self.rows], columns=list(TOY_COLUMNS))
        return {"toy": frame}

    def manifest_extra(self) -> Dict[str, object]:
        return {
            "bayes_risk": self.config.toy.noise_sd ** 2,
            "bounds": {str(h1): report for h1, report in self.bounds.items()},
            "acceptance": toy_acceptance(self.rows),
        }


def _fit_toy_net(
    hidden: int,
    data: DomainDataset,
    section: ToySection,
    seed: int,
) -> MlpModel:
    """1 -> hidden -> hidden -> 1 regressor fit on y / TOY_SCALE, returned predicting raw y."""
    model = MlpModel.init([1, hidden, hidden, 1], section.activation, child_seed(seed, "init"))
    targets = np.asarray(data.labels, dtype=np.float64).reshape(-1, 1) / TOY_SCALE
    trained, history = fit_model(
        model, data.features, targets, LossKind.MSE,
        section.epochs, section.lr, section.batch_size, child_seed(seed, "order"),
    )
    if history:
        logger.debug("toy net h=%d final train loss %.5f", hidden, history[-1])
    return trained.scale_output(TOY_SCALE)


def _toy_risk(predictions: np.ndarray, test: DomainDataset) -> float:
    return loss_eval(LossKind.MSE, predictions, test.labels)


def run_toy_experiment(cfg: ExperimentConfig) -> ToyResult:
    """
    Per repeat: two sign-domain experts on the Step-1 half, the aggregator on
    the Step-2 half, and one universal net per h1 on all training samples.
    R_B / R_O are mean test mse; E = R - noise_sd^2.
    """
    section = cfg.toy
    seeds = _seed_list(cfg)
    started = time.perf_counter()
    n_inputs = 2 + int(section.aggregator_sees_input)

    records = []
    for seed in seeds:
        repeat_seed = child_seed(seed, "toy-repeat")
        train, test = gen_toy_regression(
            section.n_train, section.n_test, section.noise_sd, section.x_range, repeat_seed,
        )
        split = split_step_data([train], section.step2_fraction, repeat_seed)
        domains = partition_by_sign(split.step1[0])
        experts = [
            _fit_toy_net(section.expert_hidden, domain, section, child_seed(repeat_seed, "toy-expert", k))
            for k, domain in enumerate(domains)
        ]
        aggregator = init_toy_aggregator(
            len(experts), section.aggregator_hidden, section.aggregator_sees_input,
            child_seed(repeat_seed, "toy-aggregator"),
        )
        aggregator = toy_aggregate_train(
            experts, aggregator, split.step2[0], section.aggregator_epochs, section.lr,
            child_seed(repeat_seed, "toy-aggregator-order"), section.aggregator_sees_input, section.batch_size,
        )
        risk_o = _toy_risk(
            toy_aggregate_predict(experts, aggregator, test.features, section.aggregator_sees_input), test,
        )
        for h1 in section.h1:
            universal = _fit_toy_net(h1, train, section, child_seed(repeat_seed, "toy-universal", h1))
            out, _ = forward_batch(universal, test.features)
            risk_b = _toy_risk(out[:, 0], test)
            records.append({"h1": h1, "seed": seed, "R_B": risk_b, "R_O": risk_o})
        logger.info("toy repeat seed=%d: R_O %.4f", seed, risk_o)

    per_repeat = pd.DataFrame(records, columns=["h1", "seed", "R_B", "R_O"])
    bayes = section.noise_sd ** 2
    n_step2 = int(round(section.n_train * section.step2_fraction))
    n_step1 = section.n_train - n_step2

    rows, bounds = [], {}
    for h1 in section.h1:
        group = per_repeat[per_repeat["h1"] == h1]
        R_B, R_O = float(group["R_B"].mean()), float(group["R_O"].mean())
        E_B, E_O = R_B - bayes, R_O - bayes
        if E_O <= 0:
            raise NumericError(f"h1={h1}: ensemble excess risk {E_O:.3g} is not positive")
        cfg_universal, cfg_ensemble = toy_bound_configs(
            h1, section.expert_hidden, section.aggregator_hidden, n_inputs,
            n=float(n_step1), m=float(n_step2), delta=section.delta, c_L=section.c_L, C_const=section.C_const,
        )
        r = bound_ratio(cfg_universal, cfg_ensemble)
        bounds[h1] = bounds_report(cfg_ensemble)
        rows.append(ToyRow(h1=h1, R_B=R_B, R_O=R_O, E_B=E_B, E_O=E_O, R=E_B / E_O, r=r))
        logger.info("toy h1=%d: R_B %.4f R_O %.4f R %.4f r %.4f (C=%g, c_L=%g)",
                    h1, R_B, R_O, E_B / E_O, r, section.C_const, section.c_L)

    rows.sort(key=lambda row: row.h1)
    return ToyResult(cfg, seeds, rows, per_repeat, bounds, time.perf_counter() - started)


def toy_acceptance(rows: Sequence[ToyRow]) -> Dict[str, bool]:
    """Trend checks over rows sorted by h1."""
    rows = sorted(rows, key=lambda row: row.h1)
    checks = {
        "R_O_below_R_B": all(row.R_O < row.R_B for row in rows),
        "R_nondecreasing": all(a.R <= b.R for a, b in zip(rows, rows[1:])),
        "r_increasing": all(a.r < b.r for a, b in zip(rows, rows[1:])),
        "R_within_r": all(row.R <= row.r for row in rows),
    }
    if len(rows) >= 2:
        checks["r_grows_faster"] = rows[-1].r / rows[0].r > rows[-1].R / rows[0].R
    return checks


# =============================================================================
# Leave-one-domain-out benchmark
# =============================================================================

@dataclass
class _Evaluation:
    seed: int
    target: int
    expert_domains: List[int]
    mean_weights: np.ndarray
    solo: List[float]
    guidg: float
    erm: float


@dataclass
class DgResult:
    config: ExperimentConfig
    seeds: List[int]
    rows: List[DgRow]
    weights: List[WeightReport]
    elapsed_seconds: float = 0.0

    name = "dg"

    def tables(self) -> Dict[str, pd.DataFrame]:
        rows = pd.DataFrame([row.model_dump() for row in self.rows], columns=list(DG_COLUMNS))
        weight_rows = []
        for report in self.weights:
            for k, domain in enumerate(report.expert_domains):
                weight_rows.append({
                    "target_domain": report.target_domain,
                    "expert_domain": domain,
                    "mean_weight": report.mean_weights[k],
                    "solo_accuracy": report.solo_accuracy[k],
                    "ensemble_accuracy": report.ensemble_accuracy,
                    "best_solo_accuracy": report.best_solo_accuracy,
                    "erm_accuracy": report.erm_accuracy,
                    "worst_expert_min_weight_rate": report.worst_expert_min_weight_rate,
                    "n_evaluations": report.n_evaluations,
                })
        return {"dg": rows, "dg_weights": pd.DataFrame(weight_rows, columns=list(WEIGHT_COLUMNS))}

    def manifest_extra(self) -> Dict[str, object]:
        evaluations = sum(r.n_evaluations for r in self.weights)
        hits = sum(r.worst_expert_min_weight_rate * r.n_evaluations for r in self.weights)
        return {
            "weight_sanity_threshold": WEIGHT_SANITY_RATE,
            "weight_sanity_rate": hits / evaluations if evaluations else None,
            "mean_accuracy": mean_accuracy_by_method(self.rows),
        }


def mean_accuracy_by_method(rows: Sequence[DgRow]) -> Dict[str, float]:
    if not rows:
        return {}
    frame = pd.DataFrame([row.model_dump() for row in rows])
    return {str(k): float(v) for k, v in frame.groupby("method")["accuracy"].mean().sort_index().items()}


def _pretrained_pair(section: DgSection, seed: int) -> EncoderPair:
    """Mock encoders pretrained on a noisy pool drawn from every domain, disjoint from the suite."""
    geometry = suite_geometry(
        section.n_domains, section.n_classes, section.feature_dim, section.domain_shift_strength, seed,
    )
    pool = []
    for i in range(section.n_domains):
        X, y = geometry.sample_domain(
            i, section.pretrain_samples_per_domain, make_rng(child_seed(seed, "pretrain-pool", i)),
            section.pretrain_label_noise,
        )
        pool.append(DomainDataset(i, X, y, 1.0 / section.n_domains))
    return pretrain_mock_encoders(
        pool, section.d_f, section.embed_dim, section.pretrain_epochs, child_seed(seed, "pretrain"),
        section.prompt_len, section.encoder_hidden, section.temperature, section.pretrain_lr,
        section.batch_size, section.n_classes,
    )


def _suite(section: DgSection, seed: int) -> List[DomainDataset]:
    return gen_domain_suite(
        section.n_domains, section.n_classes, section.feature_dim, section.domain_sizes(),
        section.domain_shift_strength, seed,
    )


def _step_data(
    suite: Sequence[DomainDataset],
    target: int,
    section: DgSection,
    seed: int,
    data_mode: DataMode = DataMode.DISJOINT,
) -> SplitPair:
    """k-shot sources without the target; disjoint halves or the same pool twice."""
    sources = renormalize_pi([
        few_shot_subsample(d, section.k_shot, seed) for d in suite if d.domain_id != target
    ])
    if DataMode(data_mode) == DataMode.SHARED:
        return SplitPair(step1=sources, step2=sources)
    return split_step_data(sources, section.step2_fraction, child_seed(seed, "step-split", target))


def _accuracy_with_weights(model: GuidgModel, dataset: DomainDataset, weights: np.ndarray) -> float:
    combined, _, _ = ensemble_logits(
        model.pair, model.experts, model.params, dataset.features, weights=weights,
    )
    return float(np.mean(np.argmax(combined, axis=1) == dataset.labels))


def _evaluate_target(
    pair: EncoderPair,
    suite: Sequence[DomainDataset],
    target: int,
    section: DgSection,
    settings: FinetuneSettings,
    seed: int,
) -> _Evaluation:
    split = _step_data(suite, target, section, seed)
    run_seed = child_seed(seed, "run", target)
    guided = guidg_train(pair, split.step1, split.step2, settings, run_seed)
    erm = erm_train(pair, split.step1, split.step2, settings, run_seed)
    held_out = suite[target]

    _, _, weights = ensemble_logits(
        guided.pair, guided.experts, guided.params, held_out.features, guided.weighting, guided.temperature,
    )
    d = guided.experts.size
    solo = [_accuracy_with_weights(guided, held_out, np.eye(d)[k]) for k in range(d)]
    return _Evaluation(
        seed=seed,
        target=target,
        expert_domains=guided.experts.domain_ids,
        mean_weights=weights.mean(axis=0),
        solo=solo,
        guidg=model_accuracy(guided, held_out),
        erm=model_accuracy(erm, held_out),
    )


def _weight_report(evaluations: Sequence[_Evaluation]) -> WeightReport:
    mean_weights = np.mean([e.mean_weights for e in evaluations], axis=0)
    hits = [int(np.argmin(e.solo)) == int(np.argmin(e.mean_weights)) for e in evaluations]
    return WeightReport(
        target_domain=evaluations[0].target,
        expert_domains=evaluations[0].expert_domains,
        mean_weights=list(mean_weights / mean_weights.sum()),
        solo_accuracy=list(np.mean([e.solo for e in evaluations], axis=0)),
        ensemble_accuracy=float(np.mean([e.guidg for e in evaluations])),
        best_solo_accuracy=float(np.mean([max(e.solo) for e in evaluations])),
        erm_accuracy=float(np.mean([e.erm for e in evaluations])),
        worst_expert_min_weight_rate=float(np.mean(hits)),
        n_evaluations=len(evaluations),
    )


def run_dg_benchmark(cfg: ExperimentConfig) -> DgResult:
    """
    Leave-one-domain-out over every suite domain and seed: GuiDG, the ERM
    universal prompt, zero-shot and every source expert alone.
    """
    section = cfg.dg
    if section.n_domains < 3:
        raise ConfigError("the benchmark needs at least 3 domains")
    seeds = _seed_list(cfg)
    settings = FinetuneSettings.from_section(section)
    started = time.perf_counter()

    rows: List[DgRow] = []
    by_target: Dict[int, List[_Evaluation]] = {t: [] for t in range(section.n_domains)}
    for seed in seeds:
        suite = _suite(section, seed)
        pair = _pretrained_pair(section, seed)
        zero_shot_texts = text_features(pair)
        for target in range(section.n_domains):
            evaluation = _evaluate_target(pair, suite, target, section, settings, seed)
            by_target[target].append(evaluation)
            accuracies = {
                "guidg": evaluation.guidg,
                "erm": evaluation.erm,
                "zero_shot": zero_shot_accuracy(pair, suite[target], zero_shot_texts),
                "best_solo": max(evaluation.solo),
            }
            for domain, acc in zip(evaluation.expert_domains, evaluation.solo):
                accuracies[f"expert_{domain}"] = acc
            rows.extend(DgRow(seed=seed, target_domain=target, method=m, accuracy=a) for m, a in accuracies.items())
            logger.info("dg seed=%d target=%d guidg %.3f erm %.3f best solo %.3f",
                        seed, target, evaluation.guidg, evaluation.erm, max(evaluation.solo))

    rows.sort(key=lambda row: (row.target_domain, row.seed, row.method))
    weights = [_weight_report(by_target[t]) for t in sorted(by_target)]
    return DgResult(cfg, seeds, rows, weights, time.perf_counter() - started)


# =============================================================================
# Ablation
# =============================================================================

@dataclass
class AblationResult:
    config: ExperimentConfig
    seeds: List[int]
    cells: List[AblationCell]
    rows: List[DgRow]
    elapsed_seconds: float = 0.0

    name = "ablation"

    def tables(self) -> Dict[str, pd.DataFrame]:
        cells = pd.DataFrame([c.model_dump(mode="json") for c in self.cells], columns=list(ABLATION_COLUMNS))
        rows = pd.DataFrame([row.model_dump() for row in self.rows], columns=list(DG_COLUMNS))
        return {"ablation": cells, "ablation_rows": rows}

    def manifest_extra(self) -> Dict[str, object]:
        return {"variants": list(ABLATION_VARIANTS), "data_modes": [m.value for m in DataMode]}

    def cell(self, data_mode: DataMode, variant: str) -> AblationCell:
        for c in self.cells:
            if c.data_mode == DataMode(data_mode) and c.variant == variant:
                return c
        raise KeyError((data_mode, variant))


def _train_variant(
    variant: str,
    pair: EncoderPair,
    split: SplitPair,
    settings: FinetuneSettings,
    seed: int,
) -> GuidgModel:
    if variant == "single":
        return erm_train(pair, split.step1, split.step2, settings, seed)
    if variant == "experts_uniform":
        return guidg_train(pair, split.step1, split.step2, settings, seed, WeightingMode.UNIFORM)
    return guidg_train(pair, split.step1, split.step2, settings, seed, WeightingMode.LEARNABLE)


def run_ablation(cfg: ExperimentConfig) -> AblationResult:
    """
    {single prompt, experts + uniform weights, experts + learnable weights}
    x {disjoint, shared} Step-1/Step-2 data, leave-one-domain-out.
    """
    section = cfg.dg
    seeds = _seed_list(cfg)
    settings = FinetuneSettings.from_section(section)
    started = time.perf_counter()

    rows: List[DgRow] = []
    for seed in seeds:
        suite = _suite(section, seed)
        pair = _pretrained_pair(section, seed)
        for target in range(section.n_domains):
            run_seed = child_seed(seed, "run", target)
            for data_mode in DataMode:
                split = _step_data(suite, target, section, seed, data_mode)
                for variant in ABLATION_VARIANTS:
                    model = _train_variant(variant, pair, split, settings, run_seed)
                    acc = model_accuracy(model, suite[target])
                    rows.append(DgRow(seed=seed, target_domain=target, method=f"{data_mode.value}/{variant}", accuracy=acc))
        logger.info("ablation seed=%d done", seed)

    rows.sort(key=lambda row: (row.target_domain, row.seed, row.method))
    frame = pd.DataFrame([row.model_dump() for row in rows])
    cells = []
    for data_mode in DataMode:
        for variant in ABLATION_VARIANTS:
            values = frame[frame["method"] == f"{data_mode.value}/{variant}"]["accuracy"]
            cells.append(AblationCell(
                data_mode=data_mode, variant=variant,
                mean_accuracy=float(values.mean()), n_evaluations=int(values.size),
            ))
    return AblationResult(cfg, seeds, cells, rows, time.perf_counter() - started)


# =============================================================================
# Gradient-check battery
# =============================================================================

@dataclass
class GradCheckResult:
    seed: int
    reports: List[GradCheckReport]
    config: Optional[ExperimentConfig] = None
    elapsed_seconds: float = 0.0

    name = "gradcheck"

    @property
    def passed(self) -> bool:
        return bool(self.reports) and all(r.passed for r in self.reports)

    @property
    def seeds(self) -> List[int]:
        return [self.seed]

    def tables(self) -> Dict[str, pd.DataFrame]:
        frame = pd.DataFrame([r.model_dump() for r in self.reports], columns=list(GRADCHECK_COLUMNS))
        return {"gradcheck": frame}

    def manifest_extra(self) -> Dict[str, object]:
        return {"passed": self.passed, "n_failed": sum(1 for r in self.reports if not r.passed)}


def _joint_objective_checks(seed: int, fd_step: float, tol: float) -> List[GradCheckReport]:
    """Step-2 objective through CMAttn and E_v, once per regularizer."""
    pair = init_encoder_pair(
        feature_dim=5, n_classes=4, d_f=6, embed_dim=4, prompt_len=2, hidden=8,
        temperature=0.1, seed=child_seed(seed, "gradcheck-pair"),
    )
    rng = make_rng(child_seed(seed, "gradcheck-batch"))
    experts = ExpertSet.from_prompts(
        pair, [PromptExpert(i, pair.default_context + 0.5 * rng.normal(size=(2, 4))) for i in range(3)],
    )
    batch = GuidedBatch(
        features=rng.normal(size=(4, 5)),
        labels=rng.integers(0, 4, size=4),
        domain_ids=rng.integers(0, 3, size=4),
    )
    reports = []
    for kind in RegularizerKind:
        work_pair = pair.copy()
        params = CmattnParams.init(pair.d_f, pair.n_classes, child_seed(seed, "gradcheck-cmattn"))
        reg = RegularizerConfig(kind=kind, alpha=0.3, lambda_margin=0.2)
        _, v_grads, c_grads = guided_objective(work_pair, experts, params, batch, reg)
        reports.append(finite_difference_check(
            lambda: guided_objective(work_pair, experts, params, batch, reg)[0].total,
            work_pair.vision_encoder.parameters() + params.as_list(),
            v_grads.as_list() + c_grads,
            fd_step=fd_step,
            tol=tol,
            label=f"joint/{kind.value}",
        ))
    return reports


def run_grad_checks(
    seed: int = 0,
    n_architectures: int = 20,
    fd_step: float = 1e-5,
    tol: float = 1e-4,
    config: Optional[ExperimentConfig] = None,
) -> GradCheckResult:
    """
    n_architectures random nets (1-3 hidden layers, widths <= 64, alternating
    activations and losses) plus the joint objective. relu draws too close
    to a kink are skipped and replaced. Pass config to make the result
    emittable.
    """
    started = time.perf_counter()
    activations = [Activation.TANH, Activation.IDENTITY, Activation.RELU]
    reports: List[GradCheckReport] = []
    trial = 0
    while len(reports) < n_architectures and trial < 5 * n_architectures:
        rng = make_rng(child_seed(seed, "arch", trial))
        depth = int(rng.integers(1, 4))
        widths = [int(rng.integers(1, 65)) for _ in range(depth)]
        d_in, d_out = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        activation = activations[trial % 3]
        model = MlpModel.init([d_in, *widths, d_out], activation, child_seed(seed, "arch-init", trial))
        X = rng.uniform(-1.0, 1.0, size=(4, d_in))
        if activation == Activation.RELU and kink_margin(model, X) < 1e-3:
            trial += 1
            continue
        if trial % 2:
            reports.append(grad_check(model, X, rng.integers(0, d_out, size=4),
                                      LossKind.CROSS_ENTROPY_LOGITS, fd_step, tol))
        else:
            reports.append(grad_check(model, X, rng.normal(size=(4, d_out)), LossKind.MSE, fd_step, tol))
        trial += 1
    reports.extend(_joint_objective_checks(seed, fd_step, tol))
    return GradCheckResult(seed, reports, config, time.perf_counter() - started)


# =============================================================================
# Bounds
# =============================================================================

def bound_reports(cfg: ExperimentConfig) -> List[Tuple[str, Dict[str, object]]]:
    """The configured BoundConfig, or the toy configs for every toy.h1."""
    if cfg.bounds is not None:
        return [("bounds", bounds_report(cfg.bounds))]
    section = cfg.toy
    n_step2 = int(round(section.n_train * section.step2_fraction))
    reports = []
    for h1 in section.h1:
        _, ensemble = toy_bound_configs(
            h1, section.expert_hidden, section.aggregator_hidden, 2 + int(section.aggregator_sees_input),
            n=float(section.n_train - n_step2), m=float(n_step2),
            delta=section.delta, c_L=section.c_L, C_const=section.C_const,
        )
        reports.append((f"toy.h1={h1}", bounds_report(ensemble)))
    return reports


def _flat_value(value):
    if isinstance(value, (list, tuple)):
        return ",".join(REPORT_FLOAT_FORMAT % v for v in value)
    return value


@dataclass
class BoundsResult:
    config: ExperimentConfig
    reports: List[Tuple[str, Dict[str, object]]]
    elapsed_seconds: float = 0.0

    name = "bounds"

    @property
    def seeds(self) -> List[int]:
        return []

    def tables(self) -> Dict[str, pd.DataFrame]:
        rows = [
            {BOUNDS_SECTION_COLUMN: section, **{k: _flat_value(v) for k, v in report.items()}}
            for section, report in self.reports
        ]
        return {"bounds": pd.DataFrame(rows)}

    def manifest_extra(self) -> Dict[str, object]:
        return {"sections": [section for section, _ in self.reports]}


def run_bounds(cfg: ExperimentConfig) -> BoundsResult:
    started = time.perf_counter()
    return BoundsResult(cfg, bound_reports(cfg), time.perf_counter() - started)


# =============================================================================
# Report emission
# =============================================================================

Result = Union[ToyResult, DgResult, AblationResult, GradCheckResult, BoundsResult]


def _rounded(frame: pd.DataFrame) -> pd.DataFrame:
    """Floats at 6 significant digits, so both formats carry the same values."""
    out = frame.copy()
    for column in out.columns:
        if pd.api.types.is_float_dtype(out[column]):
            out[column] = out[column].map(lambda v: float(REPORT_FLOAT_FORMAT % v) if math.isfinite(v) else v)
    return out


def write_table(frame: pd.DataFrame, path: Path, fmt: ReportFormat):
    if ReportFormat(fmt) == ReportFormat.CSV:
        frame.to_csv(path, index=False, float_format=REPORT_FLOAT_FORMAT, lineterminator="\n")
    else:
        with open(path, "w", newline="\n") as f:
            for record in _rounded(frame).to_dict(orient="records"):
                f.write(json.dumps(record, sort_keys=False) + "\n")


def manifest_path(table_path: Path) -> Path:
    return table_path.parent / f"{table_path.stem}{MANIFEST_SUFFIX}"


def emit_report(
    result: Result,
    out_dir: Optional[Union[str, Path]] = None,
    fmt: Optional[Union[ReportFormat, str]] = None,
) -> List[Path]:
    """
    Write every table of a result plus one manifest per table.

    Returns the written paths, tables first. Raises ReportWriteError when
    the directory or a file cannot be written.
    """
    cfg = result.config
    if cfg is None:
        raise ConfigError(f"{result.name} result carries no config to record")
    out_dir = Path(out_dir if out_dir is not None else cfg.out_dir)
    fmt = ReportFormat(fmt if fmt is not None else cfg.format)
    extension = "csv" if fmt == ReportFormat.CSV else "jsonl"

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportWriteError(f"cannot create output directory {out_dir}: {e}") from e

    tables = result.tables()
    written: List[Path] = []
    manifests: List[Path] = []
    try:
        for name, frame in tables.items():
            path = out_dir / f"{name}.{extension}"
            write_table(frame, path, fmt)
            written.append(path)

            manifest = {
                "artifact_version": ARTIFACT_VERSION,
                "experiment": result.name,
                "table": name,
                "format": fmt.value,
                "columns": list(frame.columns),
                "n_rows": int(len(frame)),
                "config": cfg.model_dump(mode="json"),
                "seeds": list(result.seeds),
                "written_at": datetime.now(timezone.utc).isoformat(),
                "elapsed_seconds": result.elapsed_seconds,
                **result.manifest_extra(),
            }
            target = manifest_path(path)
            target.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
            manifests.append(target)
    except OSError as e:
        raise ReportWriteError(f"cannot write report in {out_dir}: {e}") from e

    logger.info("wrote %s", ", ".join(p.name for p in written))
    return written + manifests


def read_table(path: Union[str, Path]) -> pd.DataFrame:
    """Parse an emitted CSV or JSON-lines table."""
    path = Path(path)
    if path.suffix == ".jsonl":
        return pd.read_json(path, orient="records", lines=True)
    return pd.read_csv(path)
