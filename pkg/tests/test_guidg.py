#!/usr/bin/env python3
"""
Expert-Guided Training Tests

Validates:
1. CMAttn weights: simplex, singleton, equal keys, direct evaluation
2. Step 1: freeze contract, monotone loss, data dependence
3. Step 2: uniform-weight reduction, freeze contract, finite differences
4. Ensemble inference reductions against brute force
5. Regularizers, weight-space blending and BMA closed forms
6. Toy aggregator path

Usage:
    pytest tests/test_guidg.py -v
    pytest tests/test_guidg.py -v -m slow
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.lib.datagen import DomainDataset, gen_domain_suite, gen_toy_regression, split_step_data
from src.lib.errors import RejectedInputError
from src.lib.guidg import (
    BmaState,
    CmattnParams,
    ExpertSet,
    FinetuneSettings,
    GuidedBatch,
    RegularizerInputs,
    bma_coefficient,
    bma_update,
    cmattn_weights,
    ensemble_infer,
    ensemble_logits,
    guided_finetune_step,
    guided_objective,
    init_finetune_state,
    init_toy_aggregator,
    mms_terms,
    prompt_loss,
    regularizer_eval,
    run_guided_finetune,
    toy_aggregate_predict,
    toy_aggregate_train,
    toy_aggregator_inputs,
    toy_expert_outputs,
    toy_gate_loss,
    train_domain_expert,
    weight_space_blend,
)
from src.lib.miniclip import PromptExpert, image_features, init_encoder_pair, zero_shot_predict
from src.lib.nn_core import (
    MlpModel,
    finite_difference_check,
    fit_model,
    forward_batch,
    loss_eval,
    make_rng,
    mlp_forward,
)
from src.models import Activation, LossKind, RegularizerConfig, RegularizerKind, WeightingMode


N_CLASSES = 4
D_F = 6


@pytest.fixture(scope="module")
def pair():
    return init_encoder_pair(feature_dim=5, n_classes=N_CLASSES, d_f=D_F, embed_dim=4,
                             prompt_len=2, hidden=8, temperature=0.1, seed=3)


@pytest.fixture(scope="module")
def experts(pair):
    rng = make_rng(7)
    prompts = [PromptExpert(i, pair.default_context + 0.5 * rng.normal(size=(2, 4))) for i in range(3)]
    return ExpertSet.from_prompts(pair, prompts)


@pytest.fixture(scope="module")
def params():
    return CmattnParams.init(D_F, N_CLASSES, seed=1)


@pytest.fixture(scope="module")
def batch():
    rng = make_rng(11)
    return GuidedBatch(
        features=rng.normal(size=(4, 5)),
        labels=np.array([0, 3, 1, 2]),
        domain_ids=np.array([0, 1, 2, 1]),
    )


def _softmax_direct(values):
    e = [math.exp(v - max(values)) for v in values]
    return [x / sum(e) for x in e]


# =============================================================================
# CMAttn
# =============================================================================

class TestCmattnWeights:

    def test_singleton(self, pair, experts, params):
        w = cmattn_weights(params, pair, np.ones(5), experts.text_feats[:1])
        assert w.tolist() == [1.0]

    def test_equal_keys_uniform(self, pair, experts, params):
        same = [experts.text_feats[0]] * 3
        w = cmattn_weights(params, pair, np.array([0.3, -0.1, 0.2, 0.9, -1.0]), same)
        np.testing.assert_allclose(w, 1.0 / 3.0, atol=1e-9)

    def test_direct_evaluation(self, pair, experts, params):
        x = np.array([0.4, -0.2, 1.1, 0.0, 0.5])
        z = mlp_forward(pair.vision_encoder, x)
        q = params.W_q @ z + params.b_q
        cosines = []
        for T in experts.text_feats:
            k = sum(params.w_k[c] * T[c] for c in range(N_CLASSES)) + params.b_k[0]
            cosines.append(float(q @ k / (np.linalg.norm(q) * np.linalg.norm(k))))
        expected = _softmax_direct(cosines)
        np.testing.assert_allclose(cmattn_weights(params, pair, x, experts.text_feats), expected, atol=1e-12)

    def test_softmax_of_three_cosines(self):
        expected = _softmax_direct([0.9, 0.1, -0.5])
        assert expected == pytest.approx([0.5897, 0.2650, 0.1454], abs=1e-4)
        assert sum(expected) == pytest.approx(1.0, abs=1e-15)

    def test_simplex_many_inputs(self, pair, experts, params):
        X = make_rng(0).normal(size=(1000, 5))
        W = cmattn_weights(params, pair, X, experts.text_feats)
        assert np.all(W >= 0)
        assert np.max(np.abs(W.sum(axis=1) - 1.0)) < 1e-9

    def test_zero_query_rejected(self, pair, experts):
        dead = CmattnParams(np.zeros((D_F, D_F)), np.zeros(D_F), np.ones(N_CLASSES), np.zeros(1))
        with pytest.raises(RejectedInputError):
            cmattn_weights(dead, pair, np.ones(5), experts.text_feats)

    def test_bad_text_shape_rejected(self, pair, params):
        with pytest.raises(RejectedInputError):
            cmattn_weights(params, pair, np.ones(5), [np.ones((N_CLASSES + 1, D_F))])


# =============================================================================
# Step 1
# =============================================================================

class TestTrainDomainExpert:

    @pytest.fixture(scope="class")
    def suite(self):
        return gen_domain_suite(2, N_CLASSES, 5, [60], domain_shift_strength=1.0, seed=2)

    def test_encoders_frozen(self, pair, suite):
        before = pair.copy()
        train_domain_expert(pair, suite[0], pair.context_expert(0), epochs=3, lr=1e-2, seed=0)
        for a, b in zip(before.vision_encoder.parameters() + before.text_encoder.parameters(),
                        pair.vision_encoder.parameters() + pair.text_encoder.parameters()):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(before.class_embeddings, pair.class_embeddings)

    def test_loss_does_not_increase(self, pair, suite):
        for seed in range(3):
            start = pair.context_expert(0)
            trained = train_domain_expert(pair, suite[0], start, epochs=10, lr=1e-2, seed=seed)
            assert prompt_loss(pair, suite[0], trained) <= prompt_loss(pair, suite[0], start)

    def test_domains_give_different_experts(self, pair, suite):
        a = train_domain_expert(pair, suite[0], pair.context_expert(0), epochs=5, lr=1e-2, seed=0)
        b = train_domain_expert(pair, suite[1], pair.context_expert(1), epochs=5, lr=1e-2, seed=0)
        assert np.linalg.norm(a.embeddings - b.embeddings) > 0

    def test_deterministic(self, pair, suite):
        a = train_domain_expert(pair, suite[0], pair.context_expert(0), epochs=4, lr=1e-2, seed=5)
        b = train_domain_expert(pair, suite[0], pair.context_expert(0), epochs=4, lr=1e-2, seed=5)
        np.testing.assert_array_equal(a.embeddings, b.embeddings)


# =============================================================================
# Step 2
# =============================================================================

class TestGuidedObjective:

    def test_uniform_weight_reduction(self, pair, experts, batch):
        equal_keys = CmattnParams.init(D_F, N_CLASSES, seed=2)
        equal_keys = CmattnParams(equal_keys.W_q, equal_keys.b_q, np.zeros(N_CLASSES), np.ones(1))
        reg = RegularizerConfig(kind=RegularizerKind.NONE, alpha=0.0)
        loss, _, _ = guided_objective(pair, experts, equal_keys, batch, reg, reduction="sum")

        Z = image_features(pair, batch.features)
        own = experts.positions(batch.domain_ids)
        per_sample = []
        for j in range(batch.size):
            T = experts.text_feats[own[j]]
            cos = T @ Z[j] / (np.linalg.norm(T, axis=1) * np.linalg.norm(Z[j]))
            per_sample.append(loss_eval(LossKind.CROSS_ENTROPY_LOGITS, cos / pair.temperature, batch.labels[j]))
        assert loss.total == pytest.approx(sum(per_sample) / experts.size, rel=1e-12)

    def test_uniform_mode_matches_equal_keys(self, pair, experts, batch):
        equal_keys = CmattnParams(np.eye(D_F), np.zeros(D_F), np.zeros(N_CLASSES), np.ones(1))
        reg = RegularizerConfig(kind=RegularizerKind.NONE, alpha=0.0)
        learnable, _, _ = guided_objective(pair, experts, equal_keys, batch, reg, WeightingMode.LEARNABLE)
        uniform, _, _ = guided_objective(pair, experts, equal_keys, batch, reg, WeightingMode.UNIFORM)
        assert learnable.total == pytest.approx(uniform.total, rel=1e-12)

    @pytest.mark.parametrize("kind", [RegularizerKind.NONE, RegularizerKind.ENTROPY_UEO, RegularizerKind.MMS])
    def test_finite_differences(self, pair, experts, params, batch, kind):
        work_pair = pair.copy()
        work_params = params.copy()
        reg = RegularizerConfig(kind=kind, alpha=0.3, lambda_margin=0.2)
        _, v_grads, c_grads = guided_objective(work_pair, experts, work_params, batch, reg)
        report = finite_difference_check(
            lambda: guided_objective(work_pair, experts, work_params, batch, reg)[0].total,
            work_pair.vision_encoder.parameters() + work_params.as_list(),
            v_grads.as_list() + c_grads,
            fd_step=1e-5,
            tol=1e-4,
        )
        assert report.passed, report

    def test_unknown_domain_rejected(self, pair, experts, params, batch):
        stray = GuidedBatch(batch.features, batch.labels, np.array([0, 1, 9, 1]))
        with pytest.raises(RejectedInputError):
            guided_objective(pair, experts, params, stray, RegularizerConfig())


class TestGuidedFinetuneStep:

    def test_freeze_contract(self, pair, experts, params, batch):
        prompts_before = [p.embeddings.copy() for p in experts.prompts]
        feats_before = [t.copy() for t in experts.text_feats]
        state = init_finetune_state(pair, params, 1e-2, 1e-2)
        new_pair, new_params, _, loss = guided_finetune_step(
            pair, experts, params, batch, RegularizerConfig(), state,
        )
        for a, p in zip(prompts_before, experts.prompts):
            np.testing.assert_array_equal(a, p.embeddings)
        for a, t in zip(feats_before, experts.text_feats):
            np.testing.assert_array_equal(a, t)
        for a, b in zip(pair.text_encoder.parameters(), new_pair.text_encoder.parameters()):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(pair.class_embeddings, new_pair.class_embeddings)
        assert not np.array_equal(pair.vision_encoder.weights[0], new_pair.vision_encoder.weights[0])
        assert not np.array_equal(params.W_q, new_params.W_q)
        assert np.isfinite(loss.total)

    def test_uniform_mode_leaves_cmattn(self, pair, experts, params, batch):
        state = init_finetune_state(pair, params, 1e-2, 1e-2)
        _, new_params, _, _ = guided_finetune_step(
            pair, experts, params, batch, RegularizerConfig(), state, WeightingMode.UNIFORM,
        )
        for a, b in zip(params.as_list(), new_params.as_list()):
            np.testing.assert_array_equal(a, b)

    def test_sum_reduction_is_batch_size_times_mean(self, pair, experts, params, batch):
        state = init_finetune_state(pair, params, 1e-2, 1e-2)
        _, _, _, mean_loss = guided_finetune_step(pair, experts, params, batch, RegularizerConfig(), state)
        _, _, _, sum_loss = guided_finetune_step(
            pair, experts, params, batch, RegularizerConfig(), state, reduction="sum",
        )
        assert sum_loss.fit == pytest.approx(batch.size * mean_loss.fit, rel=1e-12)

        _, v_mean, c_mean = guided_objective(pair, experts, params, batch, RegularizerConfig())
        _, v_sum, c_sum = guided_objective(pair, experts, params, batch, RegularizerConfig(), reduction="sum")
        for a, b in zip(v_mean.as_list() + list(c_mean), v_sum.as_list() + list(c_sum)):
            np.testing.assert_allclose(batch.size * a, b, rtol=1e-10, atol=1e-12)

    def test_unknown_reduction_rejected(self, pair, experts, params, batch):
        state = init_finetune_state(pair, params, 1e-2, 1e-2)
        with pytest.raises(RejectedInputError):
            guided_finetune_step(pair, experts, params, batch, RegularizerConfig(), state, reduction="max")

    def test_sum_reduction_run(self, pair, experts, params):
        data = [DomainDataset(i, make_rng(i).normal(size=(8, 5)), np.arange(8) % N_CLASSES, 1 / 3) for i in range(3)]
        settings = FinetuneSettings(epochs=2, batch_size=8, reduction="sum")
        model = run_guided_finetune(pair, experts, params, data, settings, seed=0)
        assert len(model.history) == 2
        assert all(np.isfinite(h.total) for h in model.history)

    def test_wise_zero_restores_pretrained_vision(self, pair, experts, params):
        data = [DomainDataset(i, make_rng(i).normal(size=(8, 5)), np.arange(8) % N_CLASSES, 1 / 3) for i in range(3)]
        settings = FinetuneSettings(epochs=2, batch_size=4, use_wise=True,
                                    reg=RegularizerConfig(wise_alpha=0.0))
        model = run_guided_finetune(pair, experts, params, data, settings, seed=0)
        for a, b in zip(pair.vision_encoder.parameters(), model.pair.vision_encoder.parameters()):
            np.testing.assert_array_equal(a, b)
        assert len(model.history) == 2

    def test_bma_run_is_finite(self, pair, experts, params):
        data = [DomainDataset(i, make_rng(i).normal(size=(8, 5)), np.arange(8) % N_CLASSES, 1 / 3) for i in range(3)]
        settings = FinetuneSettings(epochs=2, batch_size=8, use_bma=True)
        model = run_guided_finetune(pair, experts, params, data, settings, seed=0)
        assert all(np.all(np.isfinite(p)) for p in model.params.as_list())


# =============================================================================
# Inference
# =============================================================================

class TestEnsembleInfer:

    def test_single_expert_is_zero_shot(self, pair, experts, params):
        single = ExpertSet.from_prompts(pair, experts.prompts[:1])
        rng = make_rng(3)
        for _ in range(20):
            x = rng.normal(size=5)
            pred = ensemble_infer(pair, single, params, x)
            assert pred.label == int(np.argmax(zero_shot_predict(pair, x, single.text_feats[0])))
            assert pred.weights.tolist() == [1.0]

    def test_identical_experts(self, pair, experts, params):
        clones = ExpertSet.from_prompts(pair, [experts.prompts[0]] * 3)
        single = ExpertSet.from_prompts(pair, experts.prompts[:1])
        x = np.array([0.2, 0.1, -0.4, 0.8, 0.0])
        assert ensemble_infer(pair, clones, params, x).label == ensemble_infer(pair, single, params, x).label

    def test_brute_force(self, pair, experts, params):
        rng = make_rng(4)
        for _ in range(25):
            x = rng.normal(size=5)
            pred = ensemble_infer(pair, experts, params, x)
            best, best_score = None, -np.inf
            for c in range(N_CLASSES):
                score = sum(pred.weights[i] * pred.expert_logits[i, c] for i in range(experts.size))
                if score > best_score:
                    best, best_score = c, score
            assert pred.label == best

    def test_one_hot_weights(self, pair, experts, params):
        rng = make_rng(5)
        for trial in range(100):
            x = rng.normal(size=5)
            i = trial % experts.size
            pred = ensemble_infer(pair, experts, params, x, weights=np.eye(experts.size)[i])
            assert pred.label == int(np.argmax(zero_shot_predict(pair, x, experts.text_feats[i])))

    def test_uniform_mode_weights(self, pair, experts, params):
        _, _, W = ensemble_logits(pair, experts, params, np.ones((2, 5)), WeightingMode.UNIFORM)
        np.testing.assert_allclose(W, 1.0 / 3.0)


# =============================================================================
# Regularizers and weight averaging
# =============================================================================

class TestRegularizers:

    def test_ueo_uniform_batch(self):
        P = np.full((6, 5), 0.2)
        value = regularizer_eval(RegularizerKind.ENTROPY_UEO, RegularizerInputs(probabilities=P), RegularizerConfig())
        assert value == pytest.approx(0.0, abs=1e-12)

    def test_ueo_identical_one_hot(self):
        P = np.tile(np.eye(4)[2], (5, 1))
        value = regularizer_eval(RegularizerKind.ENTROPY_UEO, RegularizerInputs(probabilities=P), RegularizerConfig())
        assert value == 0.0

    def test_ueo_rejects_non_simplex(self):
        with pytest.raises(RejectedInputError):
            regularizer_eval(RegularizerKind.ENTROPY_UEO,
                             RegularizerInputs(probabilities=np.array([[0.7, 0.7]])), RegularizerConfig())

    def test_mms_zero_margin_is_cross_entropy(self, experts):
        rng = make_rng(1)
        S = rng.uniform(-1, 1, size=(6, N_CLASSES))
        y = np.array([0, 1, 2, 3, 0, 1])
        terms = mms_terms(S, y, experts.text_feats[0], lambda_margin=0.0, temperature=0.01)
        for j in range(6):
            direct = loss_eval(LossKind.CROSS_ENTROPY_LOGITS, S[j] / 0.01, y[j])
            assert abs(terms[j] - direct) <= 1e-12 * max(1.0, direct)
        inputs = RegularizerInputs(similarities=S, labels=y, texts=experts.text_feats[0], temperature=0.01)
        mean = regularizer_eval(RegularizerKind.MMS, inputs, RegularizerConfig(lambda_margin=0.0))
        assert mean == pytest.approx(float(np.mean(terms)), rel=1e-12)

    def test_mms_margin_raises_loss(self, experts):
        S = make_rng(2).uniform(-1, 1, size=(4, N_CLASSES))
        y = np.array([0, 1, 2, 3])
        plain = mms_terms(S, y, experts.text_feats[0], 0.0, 0.1)
        margin = mms_terms(S, y, experts.text_feats[0], 0.5, 0.1)
        assert np.all(margin >= plain)

    def test_none_is_zero(self):
        assert regularizer_eval(RegularizerKind.NONE, RegularizerInputs(), RegularizerConfig()) == 0.0


class TestWeightAveraging:

    def test_wise_endpoints(self):
        p0 = [np.array([0.1, 0.7]), np.array([[1.0 / 3.0]])]
        p1 = [np.array([0.9, -0.2]), np.array([[2.0 / 7.0]])]
        for a, b in zip(weight_space_blend(p0, p1, 0.0), p0):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(weight_space_blend(p0, p1, 1.0), p1):
            np.testing.assert_array_equal(a, b)

    def test_wise_midpoint(self):
        assert weight_space_blend([np.array(2.0)], [np.array(4.0)], 0.5)[0] == 3.0

    def test_wise_rejects(self):
        with pytest.raises(RejectedInputError):
            weight_space_blend([np.zeros(2)], [np.zeros(3)], 0.5)
        with pytest.raises(RejectedInputError):
            weight_space_blend([np.zeros(2)], [np.zeros(2)], 1.5)

    def test_beta_density_closed_form(self):
        assert bma_coefficient(0, 0, 0.5) == pytest.approx(2.0 / math.pi, abs=1e-12)

    def test_bma_first_step_is_current(self):
        theta = [np.array([1.5, -2.0])]
        state = bma_update(None, theta, 0, 10, 0.5)
        np.testing.assert_array_equal(state.params[0], theta[0])

    def test_bma_constant_sequence(self):
        state = None
        for t in range(6):
            state = bma_update(state, [np.array([0.3, 7.0])], t, 5, 0.5)
        np.testing.assert_array_equal(state.params[0], [0.3, 7.0])

    def test_bma_convex_hull(self):
        rng = make_rng(8)
        seq = rng.normal(size=(11, 4))
        state = None
        for t in range(11):
            state = bma_update(state, [seq[t]], t, 10, 0.5)
            lo = seq[: t + 1].min(axis=0) - 1e-12
            hi = seq[: t + 1].max(axis=0) + 1e-12
            assert np.all(state.params[0] >= lo) and np.all(state.params[0] <= hi)

    def test_bma_rejects_past_horizon(self):
        state = BmaState([np.zeros(1)], 1.0, 3)
        with pytest.raises(RejectedInputError):
            bma_update(state, [np.zeros(1)], 4, 3, 0.5)


# =============================================================================
# Toy aggregator
# =============================================================================

class TestToyAggregator:

    @pytest.fixture(scope="class")
    def toy_experts(self):
        return [MlpModel.init([1, 40, 40, 1], Activation.TANH, seed=s) for s in (1, 2)]

    def test_param_count(self):
        assert init_toy_aggregator(2, 3).param_count() == 13

    def test_zero_aggregator_outputs_bias(self):
        agg = MlpModel.zeros([2, 3, 1])
        agg.biases[1][0] = 0.25
        for x in ([0.0, 0.0], [3.0, -9.0]):
            assert mlp_forward(agg, x)[0] == 0.25

    def test_experts_frozen(self, toy_experts):
        before = [[p.copy() for p in m.parameters()] for m in toy_experts]
        train, _ = gen_toy_regression(40, 1, 0.5, seed=0)
        toy_aggregate_train(toy_experts, init_toy_aggregator(), train, epochs=20, lr=1e-2, seed=0)
        for saved, model in zip(before, toy_experts):
            for a, b in zip(saved, model.parameters()):
                np.testing.assert_array_equal(a, b)

    def test_dimension_mismatch(self, toy_experts):
        train, _ = gen_toy_regression(10, 1, 0.5, seed=0)
        with pytest.raises(RejectedInputError):
            toy_aggregate_train(toy_experts, init_toy_aggregator(3, 3), train, 1, 1e-2, 0)

    @staticmethod
    def _constant_expert(value: float) -> MlpModel:
        model = MlpModel.zeros([1, 2, 2, 1])
        model.biases[2][0] = value
        return model

    @staticmethod
    def _step_data(n: int = 100) -> DomainDataset:
        x = np.concatenate([np.linspace(-4.0, -0.04, n // 2), np.linspace(0.04, 4.0, n // 2)])
        return DomainDataset(0, x[:, None], 6.0 * np.sign(x))

    def test_inputs_scaled_once(self):
        experts = [self._constant_expert(6.0), self._constant_expert(-6.0)]
        X = np.array([[-2.0], [3.0]])
        np.testing.assert_allclose(toy_aggregator_inputs(experts, X), [[0.6, -0.6], [0.6, -0.6]])
        np.testing.assert_allclose(toy_aggregator_inputs(experts, X, include_input=True),
                                   [[0.6, -0.6, -2.0], [0.6, -0.6, 3.0]])
        np.testing.assert_allclose(toy_expert_outputs(experts, X), [[6.0, -6.0], [6.0, -6.0]])

    def test_prediction_mixes_expert_outputs(self):
        experts = [self._constant_expert(6.0), self._constant_expert(-6.0)]
        agg = MlpModel.zeros([2, 3, 1])
        # zero gate logit: equal weights
        np.testing.assert_allclose(toy_aggregate_predict(experts, agg, [[1.0], [-1.0]]), [0.0, 0.0], atol=1e-12)
        agg.biases[1][0] = math.log(3.0)
        np.testing.assert_allclose(toy_aggregate_predict(experts, agg, [[1.0]]), [0.75 * 6.0 - 0.25 * 6.0])

    def test_gate_gradient(self):
        data = self._step_data(20)
        experts = [MlpModel.init([1, 4, 4, 1], Activation.TANH, seed=s) for s in (5, 6)]
        agg = init_toy_aggregator(2, 3, include_input=True, seed=1)
        inputs = toy_aggregator_inputs(experts, data.features, include_input=True)
        outputs = toy_expert_outputs(experts, data.features)
        _, grads = toy_gate_loss(agg, inputs, outputs, data.labels)
        report = finite_difference_check(
            lambda: toy_gate_loss(agg, inputs, outputs, data.labels)[0],
            agg.parameters(),
            grads.as_list(),
            fd_step=1e-5,
            tol=1e-4,
        )
        assert report.passed, report

    def test_routes_constant_experts_by_input(self):
        experts = [self._constant_expert(6.0), self._constant_expert(-6.0)]
        data = self._step_data()
        agg = toy_aggregate_train(experts, init_toy_aggregator(2, 3, include_input=True, seed=0), data,
                                  epochs=500, lr=5e-2, seed=0, include_input=True)
        routed = float(np.mean((toy_aggregate_predict(experts, agg, data.features, True) - data.labels) ** 2))
        assert routed < 3.0

        blind = toy_aggregate_train(experts, init_toy_aggregator(2, 3, seed=0), data, epochs=500, lr=5e-2, seed=0)
        unrouted = float(np.mean((toy_aggregate_predict(experts, blind, data.features) - data.labels) ** 2))
        assert unrouted > 30.0

    def test_single_expert_rejected(self):
        with pytest.raises(RejectedInputError):
            init_toy_aggregator(1, 3)

    def test_raw_input_option(self, toy_experts):
        train, _ = gen_toy_regression(20, 1, 0.5, seed=0)
        agg = toy_aggregate_train(toy_experts, init_toy_aggregator(2, 3, include_input=True),
                                  train, 5, 1e-2, 0, include_input=True)
        assert agg.input_dim == 3
        assert toy_aggregate_predict(toy_experts, agg, train.features, include_input=True).shape == (20,)

    @pytest.mark.slow
    def test_duplicate_experts_near_identity(self):
        for seed in range(10):
            train, test = gen_toy_regression(200, 2000, 0.5, seed=seed)
            halves = split_step_data([train], 0.5, seed=seed)
            expert, _ = fit_model(MlpModel.init([1, 40, 40, 1], Activation.TANH, seed=seed),
                                  halves.step1[0].features, halves.step1[0].labels.reshape(-1, 1),
                                  LossKind.MSE, epochs=1500, lr=1e-2)
            pair_of_experts = [expert, expert]
            agg = toy_aggregate_train(pair_of_experts, init_toy_aggregator(seed=seed), halves.step2[0],
                                      epochs=1500, lr=1e-2, seed=seed)
            expert_pred = forward_batch(expert, test.features)[0][:, 0]
            expert_mse = float(np.mean((expert_pred - test.labels) ** 2))
            agg_mse = float(np.mean((toy_aggregate_predict(pair_of_experts, agg, test.features) - test.labels) ** 2))
            assert agg_mse <= expert_mse + 0.05


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
