"""
Generalization bound calculator.

Closed-form evaluation of the ensemble and universal bounds, the
equal-size corollary (c(delta), epsilon, capacity condition), the Cauchy
simplification chain and the toy ratio r. Natural log everywhere; every
function is pure in its BoundConfig.

    Upp_ens(delta) = c_pi * sqrt(c_L ln(1/delta) / (2m))
                   + C * sqrt((d~ ln m + ln(1/delta)) / m)
                   + C * sum_i pi'_i sqrt((d_i ln n_i + ln(1/delta)) / n_i)
    Upp_uni(delta) = C * sqrt((d0 ln N + ln(1/delta)) / N)

with c_pi = sum_i pi'_i / sqrt(pi_i), n_i = pi_i n and N = n + m.
"""

import math
from typing import Dict, List, Optional, Sequence, Tuple

from ..models import BoundConfig, Remark3Check
from .errors import RejectedInputError
from .nn_core import MlpModel


def vc_dim_approx(n_params: float) -> float:
    """VC-dimension estimate n ln n for a network with n parameters."""
    if n_params < 1:
        raise RejectedInputError("n_params must be >= 1")
    return float(n_params) * math.log(n_params)


def _delta(cfg: BoundConfig, delta: Optional[float]) -> float:
    if delta is None:
        return cfg.delta
    if not 0.0 < delta <= 1.0:
        raise RejectedInputError("delta override must lie in (0, 1]")
    return float(delta)


def _require_equal_sizes(cfg: BoundConfig):
    if not math.isclose(cfg.m, cfg.n, rel_tol=1e-12):
        raise RejectedInputError(f"requires m = n (got n={cfg.n}, m={cfg.m})")


def _c_pi(cfg: BoundConfig) -> float:
    return math.fsum(pp / math.sqrt(p) for p, pp in zip(cfg.pi, cfg.pi_prime))


# =============================================================================
# Ensemble and universal bounds
# =============================================================================

def upp_ensemble_terms(cfg: BoundConfig, delta: Optional[float] = None) -> Dict[str, float]:
    """The three summands of Upp_ens, itemized."""
    delta = _delta(cfg, delta)
    if cfg.m < 2 or any(n_i < 2 for n_i in cfg.n_source):
        raise RejectedInputError("m and every n_i = pi_i * n must be >= 2")
    log_inv = math.log(1.0 / delta)
    mixture = _c_pi(cfg) * math.sqrt(cfg.c_L * log_inv / (2.0 * cfg.m))
    aggregator = cfg.C_const * math.sqrt((cfg.d_tilde * math.log(cfg.m) + log_inv) / cfg.m)
    experts = cfg.C_const * math.fsum(
        pp * math.sqrt((d_i * math.log(n_i) + log_inv) / n_i)
        for pp, d_i, n_i in zip(cfg.pi_prime, cfg.d_i, cfg.n_source)
    )
    return {"mixture": mixture, "aggregator": aggregator, "experts": experts}


def upp_ensemble(cfg: BoundConfig, delta: Optional[float] = None) -> float:
    terms = upp_ensemble_terms(cfg, delta)
    return terms["mixture"] + terms["aggregator"] + terms["experts"]


def upp_universal_terms(cfg: BoundConfig, delta: Optional[float] = None) -> Dict[str, float]:
    delta = _delta(cfg, delta)
    N = cfg.N
    if N < 2:
        raise RejectedInputError("N = n + m must be >= 2")
    return {"universal": cfg.C_const * math.sqrt((cfg.d0 * math.log(N) + math.log(1.0 / delta)) / N)}


def upp_universal(cfg: BoundConfig, delta: Optional[float] = None) -> float:
    return upp_universal_terms(cfg, delta)["universal"]


# =============================================================================
# Equal-size corollary
# =============================================================================

def c_delta_terms(cfg: BoundConfig) -> List[float]:
    """Per-domain sqrt((ln 2n + ln(1/delta)/d0) / (ln n_i + ln(3/delta)/d_i))."""
    _require_equal_sizes(cfg)
    if any(n_i < 2 for n_i in cfg.n_source):
        raise RejectedInputError("every n_i = pi_i * n must be >= 2")
    numerator = math.log(2.0 * cfg.n) + math.log(1.0 / cfg.delta) / cfg.d0
    return [
        math.sqrt(numerator / (math.log(n_i) + math.log(3.0 / cfg.delta) / d_i))
        for n_i, d_i in zip(cfg.n_source, cfg.d_i)
    ]


def c_delta(cfg: BoundConfig) -> float:
    return min(c_delta_terms(cfg))


def corollary_epsilon(cfg: BoundConfig) -> float:
    """eps = c_pi sqrt(c_L ln(3/delta) / N) + C sqrt((2 d~ ln(N/2) + 2 ln(3/delta)) / N)."""
    _require_equal_sizes(cfg)
    N = cfg.N
    log3 = math.log(3.0 / cfg.delta)
    return (
        _c_pi(cfg) * math.sqrt(cfg.c_L * log3 / N)
        + cfg.C_const * math.sqrt((2.0 * cfg.d_tilde * math.log(N / 2.0) + 2.0 * log3) / N)
    )


def check_remark3(cfg: BoundConfig, c_delta_override: Optional[float] = None) -> Remark3Check:
    """
    sum_i pi'_i sqrt(2 d_i) / sqrt(pi_i) <= c(delta) sqrt(d0), plus the
    equal-mixture shortcut 2 sum_i d_i <= d0.
    """
    c = c_delta(cfg) if c_delta_override is None else float(c_delta_override)
    lhs = math.fsum(pp * math.sqrt(2.0 * d_i) / math.sqrt(p) for p, pp, d_i in zip(cfg.pi, cfg.pi_prime, cfg.d_i))
    rhs = c * math.sqrt(cfg.d0)
    simplified_lhs = 2.0 * math.fsum(cfg.d_i)
    return Remark3Check(
        holds=lhs <= rhs,
        lhs=lhs,
        rhs=rhs,
        c_delta=c,
        simplified_holds=simplified_lhs <= cfg.d0,
        simplified_lhs=simplified_lhs,
    )


def cauchy_chain(cfg: BoundConfig) -> Tuple[float, float, float]:
    """
    (sum pi'_i sqrt(2 d_i / pi_i),
     sqrt(sum pi'_i^2 / pi_i) sqrt(sum 2 d_i),
     sqrt(sum 1 / pi_i) sqrt(sum 2 d_i)); nondecreasing left to right.
    """
    two_d = math.sqrt(2.0 * math.fsum(cfg.d_i))
    first = math.fsum(pp * math.sqrt(2.0 * d_i / p) for p, pp, d_i in zip(cfg.pi, cfg.pi_prime, cfg.d_i))
    second = math.sqrt(math.fsum(pp * pp / p for p, pp in zip(cfg.pi, cfg.pi_prime))) * two_d
    third = math.sqrt(math.fsum(1.0 / p for p in cfg.pi)) * two_d
    return first, second, third


def param_count_chain(expert_params: Sequence[float], universal_params: float) -> Tuple[float, float, bool]:
    """(2 sum n_i ln n_i, n ln n, holds) for expert and universal parameter counts."""
    lhs = 2.0 * math.fsum(vc_dim_approx(p) for p in expert_params)
    rhs = vc_dim_approx(universal_params)
    return lhs, rhs, lhs <= rhs


# =============================================================================
# Toy ratio
# =============================================================================

def bound_ratio(cfg_universal: BoundConfig, cfg_ensemble: BoundConfig) -> float:
    """r = Upp_uni(delta) / Upp_ens(delta / 3)."""
    if not math.isclose(cfg_universal.N, cfg_ensemble.N, rel_tol=1e-12):
        raise RejectedInputError("universal and ensemble configs must share N")
    if not math.isclose(cfg_universal.delta, cfg_ensemble.delta, rel_tol=1e-12):
        raise RejectedInputError("universal and ensemble configs must share delta")
    return upp_universal(cfg_universal) / upp_ensemble(cfg_ensemble, cfg_ensemble.delta / 3.0)


def toy_param_counts(h1: int, expert_hidden: int = 40, aggregator_hidden: int = 3, aggregator_inputs: int = 2):
    """Exact (universal, expert, aggregator) parameter counts of the toy networks."""
    universal = MlpModel.zeros([1, h1, h1, 1]).param_count()
    expert = MlpModel.zeros([1, expert_hidden, expert_hidden, 1]).param_count()
    aggregator = MlpModel.zeros([aggregator_inputs, aggregator_hidden, 1]).param_count()
    return universal, expert, aggregator


def toy_bound_configs(
    h1: int,
    expert_hidden: int = 40,
    aggregator_hidden: int = 3,
    aggregator_inputs: int = 2,
    n: float = 100.0,
    m: float = 100.0,
    delta: float = 0.05,
    c_L: float = 1.0,
    C_const: float = 1.0,
) -> Tuple[BoundConfig, BoundConfig]:
    """
    (universal, ensemble) configs for the toy: two equal-weight experts
    against one 1-h1-h1-1 network, dims from exact parameter counts. Both
    sides share N and delta, so one config carries every symbol.
    """
    universal, expert, aggregator = toy_param_counts(h1, expert_hidden, aggregator_hidden, aggregator_inputs)
    cfg = BoundConfig(
        d=2,
        n=n,
        m=m,
        pi=[0.5, 0.5],
        pi_prime=[0.5, 0.5],
        d0=vc_dim_approx(universal),
        d_tilde=vc_dim_approx(aggregator),
        d_i=[vc_dim_approx(expert)] * 2,
        delta=delta,
        c_L=c_L,
        C_const=C_const,
    )
    return cfg, cfg


def bounds_report(cfg: BoundConfig) -> Dict[str, object]:
    """Every input and every term, flat, for the key=value audit output."""
    report: Dict[str, object] = {
        "d": cfg.d,
        "n": cfg.n,
        "m": cfg.m,
        "N": cfg.N,
        "pi": list(cfg.pi),
        "pi_prime": list(cfg.pi_prime),
        "d0": cfg.d0,
        "d_tilde": cfg.d_tilde,
        "d_i": list(cfg.d_i),
        "delta": cfg.delta,
        "c_L": cfg.c_L,
        "C_const": cfg.C_const,
    }
    for key, value in upp_ensemble_terms(cfg).items():
        report[f"upp_ensemble.{key}"] = value
    report["upp_ensemble"] = upp_ensemble(cfg)
    for key, value in upp_ensemble_terms(cfg, cfg.delta / 3.0).items():
        report[f"upp_ensemble_delta3.{key}"] = value
    report["upp_ensemble_delta3"] = upp_ensemble(cfg, cfg.delta / 3.0)
    report["upp_universal"] = upp_universal(cfg)
    report["ratio"] = bound_ratio(cfg, cfg)
    first, second, third = cauchy_chain(cfg)
    report["cauchy.lhs"], report["cauchy.mid"], report["cauchy.rhs"] = first, second, third
    if math.isclose(cfg.m, cfg.n, rel_tol=1e-12):
        report["c_delta.terms"] = c_delta_terms(cfg)
        report["c_delta"] = c_delta(cfg)
        report["epsilon"] = corollary_epsilon(cfg)
        check = check_remark3(cfg)
        report["remark3.holds"] = check.holds
        report["remark3.lhs"] = check.lhs
        report["remark3.rhs"] = check.rhs
        report["remark3.simplified_holds"] = check.simplified_holds
        report["remark3.simplified_lhs"] = check.simplified_lhs
    return report
