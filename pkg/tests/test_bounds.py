#!/usr/bin/env python3
"""
Bound Calculator Tests

Validates:
1. Direct-substitution values for every closed form
2. Monotonicity in sample sizes and capacities (randomized sweeps)
3. c(delta) against a brute-force minimum
4. Capacity condition => Upp_ens(delta/3) <= Upp_uni(delta) + eps
5. The Cauchy and parameter-count chains
6. The toy ratio r

Usage:
    pytest tests/test_bounds.py -v
    pytest tests/test_bounds.py -v -m slow   # 1000-config consistency sweep
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.lib.bounds import (
    bound_ratio,
    bounds_report,
    c_delta,
    c_delta_terms,
    cauchy_chain,
    check_remark3,
    corollary_epsilon,
    param_count_chain,
    toy_bound_configs,
    toy_param_counts,
    upp_ensemble,
    upp_ensemble_terms,
    upp_universal,
    vc_dim_approx,
)
from src.lib.errors import RejectedInputError
from src.models import BoundConfig


def _single(n=100.0, m=100.0, d0=50.0, d_tilde=10.0, d1=20.0, delta=0.05) -> BoundConfig:
    return BoundConfig(d=1, n=n, m=m, pi=[1.0], pi_prime=[1.0], d0=d0, d_tilde=d_tilde,
                       d_i=[d1], delta=delta)


def _random_cfg(rng: np.random.Generator, equal_sizes: bool = True) -> BoundConfig:
    """Mixtures floored so every n_i >= 3."""
    d = int(rng.integers(1, 5))
    floor = 0.1
    pi = (floor + rng.dirichlet(np.ones(d))) / (d * floor + 1.0)
    pi_prime = rng.dirichlet(np.ones(d))
    n = float(rng.integers(50, 5000))
    m = n if equal_sizes else float(rng.integers(50, 5000))
    return BoundConfig(
        d=d,
        n=n,
        m=m,
        pi=list(pi / pi.sum()),
        pi_prime=list(pi_prime / pi_prime.sum()),
        d0=float(np.exp(rng.uniform(np.log(10.0), np.log(2e4)))),
        d_tilde=float(rng.uniform(1.0, 100.0)),
        d_i=list(rng.uniform(1.0, 50.0, size=d)),
        delta=float(rng.uniform(0.001, 0.2)),
    )


def _scaled(cfg: BoundConfig, **updates) -> BoundConfig:
    return cfg.model_copy(update=updates)


# =============================================================================
# vc_dim_approx
# =============================================================================

class TestVcDim:

    def test_one_is_zero(self):
        assert vc_dim_approx(1) == 0.0

    def test_e(self):
        assert vc_dim_approx(math.e) == pytest.approx(math.e, rel=1e-15)

    def test_toy_universal_h60(self):
        assert vc_dim_approx(3841) == pytest.approx(31701.6475, rel=1e-8)

    def test_rejects_below_one(self):
        with pytest.raises(RejectedInputError):
            vc_dim_approx(0.5)

    def test_toy_param_counts(self):
        assert toy_param_counts(60) == (3841, 1761, 13)
        assert toy_param_counts(100)[0] == 100 ** 2 + 4 * 100 + 1


# =============================================================================
# BoundConfig validation
# =============================================================================

class TestBoundConfig:

    def test_mixture_must_sum_to_one(self):
        with pytest.raises(ValidationError):
            BoundConfig(d=2, n=100, m=100, pi=[0.5, 0.6], pi_prime=[0.5, 0.5],
                        d0=10, d_tilde=1, d_i=[1, 1])

    def test_zero_pi_rejected(self):
        with pytest.raises(ValidationError):
            BoundConfig(d=2, n=100, m=100, pi=[1.0, 0.0], pi_prime=[0.5, 0.5],
                        d0=10, d_tilde=1, d_i=[1, 1])

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            BoundConfig(d=2, n=100, m=100, pi=[1.0], pi_prime=[1.0], d0=10, d_tilde=1, d_i=[1])

    def test_delta_three_rejected(self):
        with pytest.raises(ValidationError):
            _single(delta=3.0)

    def test_n_source_counts(self):
        cfg = BoundConfig(d=2, n=100, m=60, pi=[0.25, 0.75], pi_prime=[0.5, 0.5],
                          d0=10, d_tilde=1, d_i=[1, 1])
        assert cfg.n_source == [25.0, 75.0]
        assert cfg.n_step2 == [15.0, 45.0]
        assert cfg.N == 160.0


# =============================================================================
# Ensemble and universal bounds
# =============================================================================

class TestUppEnsemble:

    def test_delta_one_vanishing_terms(self):
        cfg = _single(n=100, m=100, d_tilde=7.0, d1=11.0)
        expected = math.sqrt(7.0 * math.log(100) / 100) + math.sqrt(11.0 * math.log(100) / 100)
        assert upp_ensemble(cfg, delta=1.0) == pytest.approx(expected, rel=1e-14)

    def test_terms_sum(self):
        cfg = _random_cfg(np.random.default_rng(3), equal_sizes=False)
        terms = upp_ensemble_terms(cfg)
        assert upp_ensemble(cfg) == pytest.approx(sum(terms.values()), rel=1e-15)

    def test_toy_config_substitution(self):
        cfg, _ = toy_bound_configs(60)
        log_inv = math.log(1.0 / 0.05)
        expected = (
            2 * 0.5 / math.sqrt(0.5) * math.sqrt(log_inv / 200)
            + math.sqrt((13 * math.log(13) * math.log(100) + log_inv) / 100)
            + math.sqrt((1761 * math.log(1761) * math.log(50) + log_inv) / 50)
        )
        assert upp_ensemble(cfg) == pytest.approx(expected, rel=1e-12)

    def test_doubling_sizes_decreases(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            cfg = _random_cfg(rng, equal_sizes=False)
            doubled = _scaled(cfg, n=2 * cfg.n, m=2 * cfg.m)
            assert upp_ensemble(doubled) < upp_ensemble(cfg)

    def test_nondecreasing_in_dims(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            cfg = _random_cfg(rng, equal_sizes=False)
            base = upp_ensemble(cfg)
            assert upp_ensemble(_scaled(cfg, d_tilde=cfg.d_tilde * 1.5)) >= base
            assert upp_ensemble(_scaled(cfg, d_i=[v * 1.5 for v in cfg.d_i])) >= base

    def test_small_counts_rejected(self):
        cfg = BoundConfig(d=2, n=3, m=100, pi=[0.5, 0.5], pi_prime=[0.5, 0.5],
                          d0=10, d_tilde=1, d_i=[1, 1])
        with pytest.raises(RejectedInputError):
            upp_ensemble(cfg)

    def test_bad_delta_override(self):
        with pytest.raises(RejectedInputError):
            upp_ensemble(_single(), delta=0.0)


class TestUppUniversal:

    def test_units_case(self):
        cfg = _single(n=math.e / 2, m=math.e / 2, d0=1.0)
        assert upp_universal(cfg, delta=1.0) == pytest.approx(math.sqrt(1.0 / math.e), rel=1e-14)
        assert upp_universal(cfg, delta=1.0) == pytest.approx(0.60653, abs=1e-5)

    def test_increasing_in_d0(self):
        rng = np.random.default_rng(13)
        for _ in range(200):
            cfg = _random_cfg(rng)
            assert upp_universal(_scaled(cfg, d0=cfg.d0 * 1.01)) > upp_universal(cfg)

    def test_doubling_sizes_decreases(self):
        rng = np.random.default_rng(14)
        for _ in range(200):
            cfg = _random_cfg(rng, equal_sizes=False)
            assert upp_universal(_scaled(cfg, n=2 * cfg.n, m=2 * cfg.m)) < upp_universal(cfg)

    def test_toy_h100_vs_h60(self):
        small, _ = toy_bound_configs(60)
        large, _ = toy_bound_configs(100)
        log_inv = math.log(20.0)
        expected = math.sqrt(
            (vc_dim_approx(10401) * math.log(200) + log_inv) / (vc_dim_approx(3841) * math.log(200) + log_inv)
        )
        assert upp_universal(large) / upp_universal(small) == pytest.approx(expected, rel=1e-12)

    def test_small_n_rejected(self):
        with pytest.raises(RejectedInputError):
            upp_universal(_single(n=0.5, m=0.5))


# =============================================================================
# Equal-size corollary
# =============================================================================

class TestCDelta:

    def test_single_domain_substitution(self):
        cfg = _single(n=100, m=100, d0=50.0, d1=20.0, delta=0.05)
        expected = math.sqrt(
            (math.log(200) + math.log(20) / 50.0) / (math.log(100) + math.log(60) / 20.0)
        )
        assert c_delta(cfg) == pytest.approx(expected, rel=1e-14)

    def test_large_dims_limit(self):
        cfg = _single(n=100, m=100, d0=1e12, d1=1e12, delta=0.05)
        assert c_delta(cfg) == pytest.approx(1.0726, abs=1e-4)
        assert c_delta(cfg) == pytest.approx(math.sqrt(math.log(200) / math.log(100)), rel=1e-9)

    def test_brute_force_minimum(self):
        rng = np.random.default_rng(21)
        for _ in range(200):
            cfg = _random_cfg(rng)
            brute = min(
                math.sqrt(
                    (math.log(2 * cfg.n) + math.log(1 / cfg.delta) / cfg.d0)
                    / (math.log(p * cfg.n) + math.log(3 / cfg.delta) / d_i)
                )
                for p, d_i in zip(cfg.pi, cfg.d_i)
            )
            assert abs(c_delta(cfg) - brute) <= 1e-12
            assert all(c_delta(cfg) <= t for t in c_delta_terms(cfg))

    def test_requires_equal_sizes(self):
        with pytest.raises(RejectedInputError):
            c_delta(_single(n=100, m=80))


class TestCorollaryEpsilon:

    def test_singleton_mixture(self):
        cfg = _single(n=100, m=100, d_tilde=5.0)
        log3 = math.log(3 / 0.05)
        expected = math.sqrt(log3 / 200) + math.sqrt((10.0 * math.log(100) + 2 * log3) / 200)
        assert corollary_epsilon(cfg) == pytest.approx(expected, rel=1e-14)

    def test_toy_config(self):
        cfg, _ = toy_bound_configs(60)
        log3 = math.log(60.0)
        d_tilde = 13 * math.log(13)
        assert d_tilde == pytest.approx(33.3, abs=0.05)
        expected = math.sqrt(2) * math.sqrt(log3 / 200) + math.sqrt((2 * d_tilde * math.log(100) + 2 * log3) / 200)
        assert corollary_epsilon(cfg) == pytest.approx(expected, rel=1e-12)

    def test_requires_equal_sizes(self):
        with pytest.raises(RejectedInputError):
            corollary_epsilon(_single(n=100, m=50))


class TestRemark3:

    def test_equality_case_with_forced_c(self):
        a = vc_dim_approx(1761)
        cfg = BoundConfig(d=2, n=100, m=100, pi=[0.5, 0.5], pi_prime=[0.5, 0.5],
                          d0=4.0 * a, d_tilde=1.0, d_i=[a, a])
        check = check_remark3(cfg, c_delta_override=1.0)
        assert check.simplified_holds
        assert check.simplified_lhs == cfg.d0
        assert check.lhs == pytest.approx(check.rhs, rel=1e-12)
        assert check.c_delta == 1.0

    def test_single_expert_does_not_reduce(self):
        cfg = _single(n=100, m=100, d0=100.0, d1=100.0)
        check = check_remark3(cfg)
        assert check.c_delta < math.sqrt(2)
        assert check.lhs == pytest.approx(math.sqrt(200.0), rel=1e-14)
        assert not check.holds

    def test_toy_config_reports_margins(self):
        cfg, _ = toy_bound_configs(60)
        check = check_remark3(cfg)
        assert check.lhs == pytest.approx(2 * math.sqrt(vc_dim_approx(1761)), rel=1e-12)
        assert check.rhs == pytest.approx(check.c_delta * math.sqrt(cfg.d0), rel=1e-14)
        assert check.holds == (check.lhs <= check.rhs)

    def test_holds_implies_ensemble_bound(self):
        rng = np.random.default_rng(31)
        n_held = 0
        for _ in range(200):
            cfg = _random_cfg(rng)
            if check_remark3(cfg).holds:
                n_held += 1
                rhs = upp_universal(cfg) + corollary_epsilon(cfg)
                assert upp_ensemble(cfg, cfg.delta / 3.0) <= rhs * (1.0 + 1e-12)
        assert n_held > 0

    @pytest.mark.slow
    def test_holds_implies_ensemble_bound_sweep(self):
        rng = np.random.default_rng(32)
        n_held = 0
        for _ in range(1000):
            cfg = _random_cfg(rng)
            if check_remark3(cfg).holds:
                n_held += 1
                rhs = upp_universal(cfg) + corollary_epsilon(cfg)
                assert upp_ensemble(cfg, cfg.delta / 3.0) <= rhs * (1.0 + 1e-12)
        assert n_held >= 50


# =============================================================================
# Simplification chains
# =============================================================================

class TestChains:

    def test_cauchy_chain_ordered(self):
        rng = np.random.default_rng(41)
        for _ in range(300):
            first, second, third = cauchy_chain(_random_cfg(rng, equal_sizes=False))
            assert first <= second * (1.0 + 1e-12)
            assert second <= third * (1.0 + 1e-12)

    def test_cauchy_first_matches_remark3_lhs(self):
        cfg = _random_cfg(np.random.default_rng(42))
        assert cauchy_chain(cfg)[0] == pytest.approx(check_remark3(cfg).lhs, rel=1e-14)

    def test_param_chain_h100_holds(self):
        lhs, rhs, holds = param_count_chain([1761, 1761], 10401)
        assert lhs == pytest.approx(4 * 1761 * math.log(1761), rel=1e-14)
        assert rhs == pytest.approx(10401 * math.log(10401), rel=1e-14)
        assert holds

    def test_param_chain_h60_fails(self):
        assert not param_count_chain([1761, 1761], 3841)[2]


# =============================================================================
# Toy ratio
# =============================================================================

class TestBoundRatio:

    def test_identical_dims_substitution(self):
        cfg = _single(n=100, m=100, d0=20.0, d_tilde=20.0, d1=20.0)
        uni = math.sqrt((20 * math.log(200) + math.log(20)) / 200)
        log_inv = math.log(60)
        ens = (
            math.sqrt(log_inv / 200)
            + math.sqrt((20 * math.log(100) + log_inv) / 100)
            + math.sqrt((20 * math.log(100) + log_inv) / 100)
        )
        assert bound_ratio(cfg, cfg) == pytest.approx(uni / ens, rel=1e-13)

    def test_increasing_in_universal_d0(self):
        cfg, _ = toy_bound_configs(60)
        values = [bound_ratio(_scaled(cfg, d0=cfg.d0 * k), cfg) for k in (0.5, 1.0, 2.0, 4.0)]
        assert values == sorted(values)
        assert len(set(values)) == 4

    def test_toy_trend(self):
        ratios = [bound_ratio(*toy_bound_configs(h)) for h in (60, 80, 100)]
        assert ratios[0] < ratios[1] < ratios[2]
        assert ratios[0] == pytest.approx(0.8638, abs=1e-3)
        assert ratios[2] == pytest.approx(1.5048, abs=1e-3)

    def test_mismatched_n_rejected(self):
        with pytest.raises(RejectedInputError):
            bound_ratio(_single(n=100, m=100), _single(n=100, m=120))

    def test_mismatched_delta_rejected(self):
        with pytest.raises(RejectedInputError):
            bound_ratio(_single(delta=0.05), _single(delta=0.1))


class TestBoundsReport:

    def test_items(self):
        cfg, _ = toy_bound_configs(80)
        report = bounds_report(cfg)
        for key in ("N", "upp_ensemble.mixture", "upp_universal", "ratio", "epsilon",
                    "remark3.holds", "cauchy.rhs", "c_delta.terms"):
            assert key in report
        assert report["ratio"] == pytest.approx(bound_ratio(cfg, cfg), rel=1e-15)

    def test_unequal_sizes_skip_corollary(self):
        report = bounds_report(_single(n=100, m=60))
        assert "epsilon" not in report
        assert "upp_ensemble" in report


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
