"""
Expert-guided domain generalization.

Two-step training over a frozen dual encoder:

Step 1  one prompt expert per source domain, trained with cross-entropy on
        that domain only (encoders frozen).
Step 2  experts frozen; the vision encoder and a cross-modal attention
        module (CMAttn) are trained jointly on held-out source data. Each
        sample's cross-entropy under its own domain's expert is weighted by
        w(x) = softmax(cos<q(x), k_i>), where q(x) = W_q E_v(x) + b_q and
        k_i = sum_c w_k[c] T_i[c] + b_k.

Inference averages expert logits with the same weights. The module also
holds the fine-tuning add-ons (UEO entropy, MMS margin loss, beta moving
average, weight-space blending) and the regression toy path, where two
plain MLP experts are combined by a small aggregator network.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from ..models import (
    Activation,
    DgSection,
    ExpertMode,
    OptimizerKind,
    RegularizerConfig,
    RegularizerKind,
    WeightingMode,
    SIMPLEX_TOL,
)
from .datagen import DomainDataset, concat_domains
from .errors import RejectedInputError
from .miniclip import (
    EncoderPair,
    PromptExpert,
    image_features,
    text_features,
    text_features_backward,
    text_features_with_cache,
)
from .nn_core import (
    GradientSet,
    MlpModel,
    OptimizerState,
    backward_batch,
    child_seed,
    cosine_matrix,
    cosine_matrix_backward,
    forward_batch,
    init_optimizer,
    log_softmax,
    make_rng,
    optimizer_step,
    softmax,
    softmax_backward,
    step_parameters,
)


logger = logging.getLogger(__name__)

# Toy nets predict raw y; training and the aggregator gate work on y / TOY_SCALE.
TOY_SCALE = 10.0

# Batch reductions accepted by guided_objective.
REDUCTIONS = ("mean", "sum")

# Floor for the batch-mean probability inside log(p_bar).
_PROB_FLOOR = 1e-300


# =============================================================================
# Containers
# =============================================================================

@dataclass
class CmattnParams:
    """Query map (d_f x d_f, bias d_f) and key map (C weights, scalar bias)."""
    W_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray

    def __post_init__(self):
        self.W_q = np.array(self.W_q, dtype=np.float64)
        self.b_q = np.array(self.b_q, dtype=np.float64).reshape(-1)
        self.w_k = np.array(self.w_k, dtype=np.float64).reshape(-1)
        self.b_k = np.array(self.b_k, dtype=np.float64).reshape(1)
        d_f = self.W_q.shape[0]
        if self.W_q.shape != (d_f, d_f) or self.b_q.shape != (d_f,):
            raise RejectedInputError("W_q must be (d_f, d_f) with a length-d_f bias")
        if not all(np.all(np.isfinite(p)) for p in self.as_list()):
            raise RejectedInputError("CMAttn parameters must be finite")

    @classmethod
    def init(cls, d_f: int, n_classes: int, seed: int = 0) -> "CmattnParams":
        """Near-identity query and class-mean key, plus small seeded noise."""
        rng = make_rng(seed)
        return cls(
            W_q=np.eye(d_f) + 0.01 * rng.normal(size=(d_f, d_f)),
            b_q=np.zeros(d_f),
            w_k=np.full(n_classes, 1.0 / n_classes) + 0.01 * rng.normal(size=n_classes),
            b_k=np.zeros(1),
        )

    @property
    def d_f(self) -> int:
        return self.W_q.shape[0]

    @property
    def n_classes(self) -> int:
        return self.w_k.shape[0]

    def as_list(self) -> List[np.ndarray]:
        return [self.W_q, self.b_q, self.w_k, self.b_k]

    @classmethod
    def from_list(cls, params: Sequence[np.ndarray]) -> "CmattnParams":
        return cls(*[np.array(p, dtype=np.float64) for p in params])

    def copy(self) -> "CmattnParams":
        return CmattnParams.from_list(self.as_list())


@dataclass
class ExpertSet:
    """
    The d source-domain experts, in source order.

    Prompt mode caches every expert's C x d_f text features; the experts and
    the text encoder are frozen once the set is built.
    """
    mode: ExpertMode
    prompts: List[PromptExpert] = field(default_factory=list)
    models: List[MlpModel] = field(default_factory=list)
    text_feats: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.mode = ExpertMode(self.mode)
        members = self.prompts if self.mode == ExpertMode.PROMPT else self.models
        if not members:
            raise RejectedInputError("an expert set needs at least one expert")
        if self.mode == ExpertMode.PROMPT and len(self.text_feats) != len(self.prompts):
            raise RejectedInputError("one text-feature matrix per prompt expert")

    @classmethod
    def from_prompts(cls, pair: EncoderPair, prompts: Sequence[PromptExpert]) -> "ExpertSet":
        prompts = [p.copy() for p in prompts]
        return cls(ExpertMode.PROMPT, prompts=prompts, text_feats=[text_features(pair, p) for p in prompts])

    @classmethod
    def from_models(cls, models: Sequence[MlpModel]) -> "ExpertSet":
        return cls(ExpertMode.MLP, models=[m.copy() for m in models])

    @property
    def size(self) -> int:
        return len(self.prompts) if self.mode == ExpertMode.PROMPT else len(self.models)

    @property
    def domain_ids(self) -> List[int]:
        if self.mode == ExpertMode.PROMPT:
            return [p.domain_id for p in self.prompts]
        return list(range(len(self.models)))

    def positions(self, domain_ids) -> np.ndarray:
        """Map per-sample domain ids to expert positions."""
        lookup: Dict[int, int] = {d: k for k, d in enumerate(self.domain_ids)}
        ids = np.asarray(domain_ids, dtype=np.int64).reshape(-1)
        missing = sorted({int(d) for d in ids} - set(lookup))
        if missing:
            raise RejectedInputError(f"no expert for domain id(s) {missing}")
        return np.array([lookup[int(d)] for d in ids], dtype=np.int64)

    def require_prompts(self):
        if self.mode != ExpertMode.PROMPT:
            raise RejectedInputError("operation needs prompt experts")


@dataclass(frozen=True)
class GuidedBatch:
    features: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray

    @classmethod
    def from_datasets(cls, datasets: Sequence[DomainDataset]) -> "GuidedBatch":
        return cls(
            features=np.vstack([d.features for d in datasets]),
            labels=np.concatenate([d.labels for d in datasets]).astype(np.int64),
            domain_ids=np.concatenate([np.full(d.n_samples, d.domain_id) for d in datasets]),
        )

    @property
    def size(self) -> int:
        return self.features.shape[0]

    def take(self, rows: np.ndarray) -> "GuidedBatch":
        return GuidedBatch(self.features[rows], self.labels[rows], self.domain_ids[rows])


@dataclass(frozen=True)
class GuidedLoss:
    total: float
    fit: float
    reg: float


@dataclass
class FinetuneState:
    vision: OptimizerState
    cmattn: OptimizerState


@dataclass
class FinetuneSettings:
    """Step-1 and Step-2 knobs; built from the dg config section."""
    expert_epochs: int = 40
    expert_lr: float = 2e-3
    epochs: int = 20
    lr: float = 1e-3
    cmattn_lr: float = 1e-2
    temperature: float = 1.0
    batch_size: int = 32
    reg: RegularizerConfig = field(default_factory=RegularizerConfig)
    use_bma: bool = False
    use_wise: bool = False
    reduction: str = "mean"

    @classmethod
    def from_section(cls, section: DgSection) -> "FinetuneSettings":
        return cls(
            expert_epochs=section.expert_epochs,
            expert_lr=section.expert_lr,
            epochs=section.finetune_epochs,
            lr=section.finetune_lr,
            cmattn_lr=section.cmattn_lr,
            temperature=section.cmattn_temperature,
            batch_size=section.batch_size,
            reg=section.reg,
            use_bma=section.use_bma,
            use_wise=section.use_wise,
        )


# =============================================================================
# Step 1: domain experts
# =============================================================================

def _prompt_loss_and_grad(pair: EncoderPair, Z: np.ndarray, y: np.ndarray, context: np.ndarray):
    """Mean cross-entropy of cos<Z, T(context)>/tau and its gradient w.r.t. context."""
    T, t_cache = text_features_with_cache(pair, context)
    S, c_cache = cosine_matrix(Z, T)
    lsm = log_softmax(S / pair.temperature)
    n = Z.shape[0]
    rows = np.arange(n)
    loss = float(-np.mean(lsm[rows, y]))
    d_logits = np.exp(lsm)
    d_logits[rows, y] -= 1.0
    _, dT = cosine_matrix_backward(c_cache, d_logits / (n * pair.temperature))
    d_context, _ = text_features_backward(pair, t_cache, dT)
    return loss, d_context


def prompt_loss(pair: EncoderPair, domain: DomainDataset, expert: PromptExpert) -> float:
    """Mean Step-1 cross-entropy of an expert over a whole domain."""
    Z = image_features(pair, domain.features)
    loss, _ = _prompt_loss_and_grad(pair, Z, domain.labels, expert.embeddings)
    return loss


def train_domain_expert(
    pair: EncoderPair,
    domain: DomainDataset,
    expert: PromptExpert,
    epochs: int = 40,
    lr: float = 2e-3,
    seed: int = 0,
    batch_size: int = 32,
) -> PromptExpert:
    """
    Fit one prompt block on one domain; encoders are read, never written.

    Minibatch Adam on the embeddings. The embeddings with the lowest
    full-domain loss seen (initial ones included) are returned.
    """
    if domain.n_samples == 0:
        raise RejectedInputError("cannot train an expert on an empty domain")
    if expert.embeddings.shape != pair.default_context.shape:
        raise RejectedInputError("expert shape does not match the encoder prompt length")
    Z = image_features(pair, domain.features)
    y = domain.labels
    n = domain.n_samples
    size = min(batch_size, n)
    rng = make_rng(seed)

    embeddings = expert.embeddings.copy()
    best_loss, _ = _prompt_loss_and_grad(pair, Z, y, embeddings)
    best = embeddings.copy()
    state = init_optimizer([embeddings], OptimizerKind.ADAMW, lr)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, size):
            idx = order[start:start + size]
            _, grad = _prompt_loss_and_grad(pair, Z[idx], y[idx], embeddings)
            (embeddings,), state = step_parameters(state, [embeddings], [grad])
        loss, _ = _prompt_loss_and_grad(pair, Z, y, embeddings)
        if loss < best_loss:
            best_loss, best = loss, embeddings.copy()
    logger.debug("expert for domain %d: loss %.4f", expert.domain_id, best_loss)
    return PromptExpert(expert.domain_id, best)


def train_experts(
    pair: EncoderPair,
    sources: Sequence[DomainDataset],
    settings: FinetuneSettings,
    seed: int,
) -> ExpertSet:
    """Step 1 over every source; expert k is seeded by (seed, k)."""
    prompts = [
        train_domain_expert(
            pair, domain, pair.context_expert(domain.domain_id),
            settings.expert_epochs, settings.expert_lr,
            child_seed(seed, "expert", k), settings.batch_size,
        )
        for k, domain in enumerate(sources)
    ]
    return ExpertSet.from_prompts(pair, prompts)


# =============================================================================
# CMAttn
# =============================================================================

@dataclass
class _AttentionCache:
    Z: np.ndarray
    T: np.ndarray
    cos: object
    weights: np.ndarray


def cmattn_keys(params: CmattnParams, text_feats: Sequence[np.ndarray]) -> np.ndarray:
    """k_i = sum_c w_k[c] T_i[c] + b_k, one row per expert (d x d_f)."""
    T = np.stack([np.asarray(t, dtype=np.float64) for t in text_feats])
    if T.ndim != 3 or T.shape[1] != params.n_classes or T.shape[2] != params.d_f:
        raise RejectedInputError(f"text features must be ({params.n_classes}, {params.d_f}) matrices")
    return np.einsum("c,icf->if", params.w_k, T) + params.b_k[0]


def _attention_forward(params: CmattnParams, Z: np.ndarray, text_feats, temperature: float):
    if not len(text_feats):
        raise RejectedInputError("CMAttn needs at least one expert")
    T = np.stack(text_feats)
    K = cmattn_keys(params, text_feats)
    Q = Z @ params.W_q.T + params.b_q
    A, cos_cache = cosine_matrix(Q, K)
    weights = softmax(A / temperature)
    return weights, _AttentionCache(Z, T, cos_cache, weights)


def _attention_backward(params: CmattnParams, cache: _AttentionCache, d_weights: np.ndarray, temperature: float):
    dA = softmax_backward(cache.weights, d_weights) / temperature
    dQ, dK = cosine_matrix_backward(cache.cos, dA)
    grads = [
        dQ.T @ cache.Z,
        dQ.sum(axis=0),
        np.einsum("if,icf->c", dK, cache.T),
        np.array([dK.sum()]),
    ]
    return dQ @ params.W_q, grads


def cmattn_weights(
    params: CmattnParams,
    pair: EncoderPair,
    x,
    expert_text_feats: Sequence[np.ndarray],
    temperature: float = 1.0,
) -> np.ndarray:
    """w(x) over the d experts; a point on the simplex."""
    x = np.asarray(x, dtype=np.float64)
    Z = image_features(pair, x[None, :] if x.ndim == 1 else x)
    weights, _ = _attention_forward(params, Z, list(expert_text_feats), temperature)
    return weights[0] if x.ndim == 1 else weights


# =============================================================================
# Regularizers
# =============================================================================

@dataclass
class RegularizerInputs:
    """
    What a regularizer reads.

    entropy_ueo uses probabilities (B x C). mms uses similarities (B x C,
    cosines before the temperature), labels, the text features that produced
    the similarities, and the temperature.
    """
    probabilities: Optional[np.ndarray] = None
    similarities: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    texts: Optional[np.ndarray] = None
    temperature: float = 0.01


def _entropy(p: np.ndarray, log_p: np.ndarray) -> np.ndarray:
    return -np.sum(np.where(p > 0, p * log_p, 0.0), axis=-1)


def ueo_loss(probabilities: np.ndarray) -> float:
    """(1/B) sum_x H(p(x)) - H(p_bar), natural log."""
    P = np.atleast_2d(np.asarray(probabilities, dtype=np.float64))
    if P.shape[0] == 0:
        raise RejectedInputError("empty batch")
    if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise RejectedInputError("rows must be probability vectors")
    log_P = np.log(np.where(P > 0, P, 1.0))
    p_bar = P.mean(axis=0)
    log_bar = np.log(np.where(p_bar > 0, p_bar, 1.0))
    return float(np.mean(_entropy(P, log_P)) - _entropy(p_bar, log_bar))


def _ueo_from_logits(M: np.ndarray) -> Tuple[float, np.ndarray]:
    """UEO on softmax(M) and its gradient w.r.t. M."""
    B = M.shape[0]
    log_P = log_softmax(M)
    P = np.exp(log_P)
    p_bar = P.mean(axis=0)
    log_bar = np.log(np.maximum(p_bar, _PROB_FLOOR))
    value = float(np.mean(_entropy(P, log_P)) - _entropy(p_bar, log_bar))
    dP = (log_bar[None, :] - log_P) / B
    return value, softmax_backward(P, dP)


def mms_margins(texts: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """D(T_y, T_c) = 1 - cos<T_y, T_c> for each sample's label y (B x C)."""
    S_tt, _ = cosine_matrix(texts, texts)
    D = 1.0 - S_tt[np.asarray(labels, dtype=np.int64)]
    D[np.arange(D.shape[0]), labels] = 0.0
    return D


def mms_terms(similarities, labels, texts, lambda_margin: float, temperature: float) -> np.ndarray:
    """Per-sample MMS cross-entropy over (S + lambda D) / tau."""
    S = np.atleast_2d(np.asarray(similarities, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if S.shape[0] == 0 or y.shape[0] != S.shape[0]:
        raise RejectedInputError("one label per similarity row required")
    logits = (S + lambda_margin * mms_margins(texts, y)) / temperature
    return -log_softmax(logits)[np.arange(S.shape[0]), y]


def regularizer_eval(kind: RegularizerKind, inputs: RegularizerInputs, reg: RegularizerConfig) -> float:
    """The scalar L_r added to the Step-2 objective with weight alpha."""
    kind = RegularizerKind(kind)
    if kind == RegularizerKind.NONE:
        return 0.0
    if kind == RegularizerKind.ENTROPY_UEO:
        if inputs.probabilities is None:
            raise RejectedInputError("entropy_ueo needs probabilities")
        return ueo_loss(inputs.probabilities)
    if inputs.similarities is None or inputs.labels is None or inputs.texts is None:
        raise RejectedInputError("mms needs similarities, labels and texts")
    terms = mms_terms(inputs.similarities, inputs.labels, inputs.texts, reg.lambda_margin, inputs.temperature)
    return float(np.mean(terms))


# =============================================================================
# Step 2: guided fine-tuning
# =============================================================================

def guided_objective(
    pair: EncoderPair,
    experts: ExpertSet,
    params: CmattnParams,
    batch: GuidedBatch,
    reg: RegularizerConfig,
    weighting: WeightingMode = WeightingMode.LEARNABLE,
    temperature: float = 1.0,
    reduction: str = "mean",
) -> Tuple[GuidedLoss, GradientSet, List[np.ndarray]]:
    """
    L_f + alpha * L_r and its gradients w.r.t. the vision encoder and CMAttn.

    L_f = sum_j w_{i_j}(x_j) CE_j, with CE_j computed from the logits of the
    expert of sample j's own domain i_j. reduction "sum" keeps that sum over the
    samples of every source domain as is; "mean" (the training default) divides it
    by the batch size, which only rescales the step size. L_r is a batch mean
    under either reduction.
    The weights stay inside the loss, so gradients reach CMAttn through the
    softmax and E_v through both the weights and the logits.
    """
    experts.require_prompts()
    if reduction not in REDUCTIONS:
        raise RejectedInputError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    if batch.size == 0:
        raise RejectedInputError("empty batch")
    own = experts.positions(batch.domain_ids)
    y = batch.labels
    n, d = batch.size, experts.size
    scale = 1.0 / n if reduction == "mean" else 1.0
    tau = pair.temperature
    rows = np.arange(n)

    Z, v_cache = forward_batch(pair.vision_encoder, batch.features)
    learnable = WeightingMode(weighting) == WeightingMode.LEARNABLE
    if learnable:
        Wt, a_cache = _attention_forward(params, Z, experts.text_feats, temperature)
    else:
        Wt = np.full((n, d), 1.0 / d)

    sims, cos_caches = [], []
    for T in experts.text_feats:
        S, cache = cosine_matrix(Z, T)
        sims.append(S)
        cos_caches.append(cache)
    logits = np.stack(sims) / tau  # d x n x C

    own_lsm = log_softmax(logits[own, rows])
    ce = -own_lsm[rows, y]
    w_own = Wt[rows, own]
    fit = float(scale * np.sum(w_own * ce))

    d_logits = np.zeros_like(logits)
    d_weights = np.zeros_like(Wt)
    d_weights[rows, own] += scale * ce
    g = np.exp(own_lsm)
    g[rows, y] -= 1.0
    d_logits[own, rows] += (scale * w_own)[:, None] * g

    reg_value = 0.0
    kind = RegularizerKind(reg.kind)
    if kind == RegularizerKind.ENTROPY_UEO:
        combined = np.einsum("ni,inc->nc", Wt, logits)
        reg_value, d_combined = _ueo_from_logits(combined)
        d_logits += reg.alpha * np.einsum("ni,nc->inc", Wt, d_combined)
        d_weights += reg.alpha * np.einsum("nc,inc->ni", d_combined, logits)
    elif kind == RegularizerKind.MMS:
        # margins come from frozen text features: constant w.r.t. trainables
        margin_logits = logits[own, rows].copy()
        for i in range(d):
            mask = own == i
            if np.any(mask):
                margin_logits[mask] += reg.lambda_margin * mms_margins(experts.text_feats[i], y[mask]) / tau
        mms_lsm = log_softmax(margin_logits)
        reg_value = float(-np.mean(mms_lsm[rows, y]))
        g_mms = np.exp(mms_lsm)
        g_mms[rows, y] -= 1.0
        d_logits[own, rows] += (reg.alpha / n) * g_mms

    dZ = np.zeros_like(Z)
    for i, cache in enumerate(cos_caches):
        dZ_i, _ = cosine_matrix_backward(cache, d_logits[i] / tau)
        dZ += dZ_i
    if learnable:
        dZ_att, cm_grads = _attention_backward(params, a_cache, d_weights, temperature)
        dZ += dZ_att
    else:
        cm_grads = [np.zeros_like(p) for p in params.as_list()]
    v_grads, _ = backward_batch(pair.vision_encoder, v_cache, dZ)

    total = fit + reg.alpha * reg_value
    return GuidedLoss(total=total, fit=fit, reg=reg_value), v_grads, cm_grads


def init_finetune_state(pair: EncoderPair, params: CmattnParams, lr: float, cmattn_lr: float) -> FinetuneState:
    return FinetuneState(
        vision=init_optimizer(pair.vision_encoder.parameters(), OptimizerKind.ADAMW, lr),
        cmattn=init_optimizer(params.as_list(), OptimizerKind.ADAMW, cmattn_lr),
    )


def guided_finetune_step(
    pair: EncoderPair,
    experts: ExpertSet,
    params: CmattnParams,
    batch: GuidedBatch,
    reg: RegularizerConfig,
    state: FinetuneState,
    weighting: WeightingMode = WeightingMode.LEARNABLE,
    temperature: float = 1.0,
    reduction: str = "mean",
) -> Tuple[EncoderPair, CmattnParams, FinetuneState, GuidedLoss]:
    """One joint update of E_v and CMAttn; experts and the text side are untouched."""
    loss, v_grads, cm_grads = guided_objective(
        pair, experts, params, batch, reg, weighting, temperature, reduction,
    )
    v_params, v_state = step_parameters(state.vision, pair.vision_encoder.parameters(), v_grads.as_list())
    if WeightingMode(weighting) == WeightingMode.LEARNABLE:
        c_params, c_state = step_parameters(state.cmattn, params.as_list(), cm_grads)
        new_params = CmattnParams.from_list(c_params)
    else:
        c_state, new_params = state.cmattn, params.copy()
    new_pair = pair.with_vision(pair.vision_encoder.with_parameters(v_params))
    return new_pair, new_params, FinetuneState(v_state, c_state), loss


# =============================================================================
# Weight averaging
# =============================================================================

def weight_space_blend(
    pretrained: Sequence[np.ndarray],
    finetuned: Sequence[np.ndarray],
    wise_alpha: float,
) -> List[np.ndarray]:
    """(1 - alpha) * pretrained + alpha * finetuned, elementwise; endpoints exact."""
    if not 0.0 <= wise_alpha <= 1.0:
        raise RejectedInputError("wise_alpha must lie in [0, 1]")
    if len(pretrained) != len(finetuned):
        raise RejectedInputError("parameter sets differ in length")
    blended = []
    for p0, p1 in zip(pretrained, finetuned):
        p0 = np.asarray(p0, dtype=np.float64)
        p1 = np.asarray(p1, dtype=np.float64)
        if p0.shape != p1.shape:
            raise RejectedInputError(f"shape mismatch {p0.shape} vs {p1.shape}")
        if wise_alpha == 0.0:
            blended.append(p0.copy())
        elif wise_alpha == 1.0:
            blended.append(p1.copy())
        else:
            blended.append((1.0 - wise_alpha) * p0 + wise_alpha * p1)
    return blended


def bma_coefficient(t: int, horizon: int, beta: float) -> float:
    """alpha_t = Beta(beta, beta) density at (t + 0.5) / (T + 1)."""
    return float(stats.beta.pdf((t + 0.5) / (horizon + 1), beta, beta))


@dataclass
class BmaState:
    params: List[np.ndarray]
    alpha_sum: float
    steps: int


def bma_update(
    state: Optional[BmaState],
    current: Sequence[np.ndarray],
    t: int,
    horizon: int,
    beta: float = 0.5,
) -> BmaState:
    """
    theta_BMA <- (S_{t-1}/S_t) theta_BMA + (alpha_t/S_t) theta_t,
    S_t = sum_{k<=t} alpha_k. Updates must arrive in order t = 0, 1, ...
    """
    if beta <= 0:
        raise RejectedInputError("bma_beta must be > 0")
    if t < 0 or t > horizon:
        raise RejectedInputError(f"step {t} outside [0, {horizon}]")
    current = [np.array(p, dtype=np.float64) for p in current]
    alpha_t = bma_coefficient(t, horizon, beta)
    if t == 0 or state is None:
        if t != 0:
            raise RejectedInputError("BMA must start at t = 0")
        return BmaState(params=current, alpha_sum=alpha_t, steps=1)
    if t != state.steps:
        raise RejectedInputError(f"expected BMA step {state.steps}, got {t}")
    alpha_sum = state.alpha_sum + alpha_t
    w = alpha_t / alpha_sum
    params = [avg + w * (p - avg) for avg, p in zip(state.params, current)]
    return BmaState(params=params, alpha_sum=alpha_sum, steps=state.steps + 1)


# =============================================================================
# Step-2 loop and full pipelines
# =============================================================================

@dataclass
class GuidgModel:
    """A trained ensemble: encoders, frozen experts, CMAttn and its weighting mode."""
    pair: EncoderPair
    experts: ExpertSet
    params: CmattnParams
    weighting: WeightingMode = WeightingMode.LEARNABLE
    temperature: float = 1.0
    history: List[GuidedLoss] = field(default_factory=list)


def run_guided_finetune(
    pair: EncoderPair,
    experts: ExpertSet,
    params: CmattnParams,
    datasets: Sequence[DomainDataset],
    settings: FinetuneSettings,
    weighting: WeightingMode = WeightingMode.LEARNABLE,
    seed: int = 0,
) -> GuidgModel:
    """
    Step 2 over the held-out source data.

    Optional beta moving average over (E_v, CMAttn) parameters, then optional
    weight-space blending of E_v against the pretrained encoder.
    """
    batch = GuidedBatch.from_datasets(datasets)
    experts.positions(batch.domain_ids)
    n = batch.size
    size = min(settings.batch_size, n)
    n_batches = -(-n // size)
    horizon = max(settings.epochs * n_batches - 1, 0)
    rng = make_rng(child_seed(seed, "finetune-order"))

    pretrained_vision = pair.vision_encoder
    state = init_finetune_state(pair, params, settings.lr, settings.cmattn_lr)
    bma: Optional[BmaState] = None
    history: List[GuidedLoss] = []
    t = 0
    for epoch in range(settings.epochs):
        order = rng.permutation(n)
        totals = np.zeros(3)
        for start in range(0, n, size):
            part = batch.take(order[start:start + size])
            pair, params, state, loss = guided_finetune_step(
                pair, experts, params, part, settings.reg, state, weighting, settings.temperature,
                settings.reduction,
            )
            per_sample = part.size if settings.reduction == "mean" else 1
            totals += per_sample * np.array([loss.total, loss.fit, loss.reg])
            if settings.use_bma:
                trainable = pair.vision_encoder.parameters() + params.as_list()
                bma = bma_update(bma, trainable, t, horizon, settings.reg.bma_beta)
            t += 1
        history.append(GuidedLoss(*(totals / n)))
        logger.debug("finetune epoch %d total %.4f fit %.4f reg %.4f", epoch, *(totals / n))

    if bma is not None:
        n_vision = len(pair.vision_encoder.parameters())
        pair = pair.with_vision(pair.vision_encoder.with_parameters(bma.params[:n_vision]))
        params = CmattnParams.from_list(bma.params[n_vision:])
    if settings.use_wise:
        blended = weight_space_blend(
            pretrained_vision.parameters(), pair.vision_encoder.parameters(), settings.reg.wise_alpha,
        )
        pair = pair.with_vision(pair.vision_encoder.with_parameters(blended))

    return GuidgModel(pair, experts, params, weighting, settings.temperature, history)


def guidg_train(
    pair: EncoderPair,
    step1: Sequence[DomainDataset],
    step2: Sequence[DomainDataset],
    settings: FinetuneSettings,
    seed: int,
    weighting: WeightingMode = WeightingMode.LEARNABLE,
) -> GuidgModel:
    """Step 1 on step1 halves, then Step 2 on step2 halves."""
    experts = train_experts(pair, step1, settings, seed)
    params = CmattnParams.init(pair.d_f, pair.n_classes, child_seed(seed, "cmattn"))
    return run_guided_finetune(pair, experts, params, step2, settings, weighting, seed)


def erm_train(
    pair: EncoderPair,
    step1: Sequence[DomainDataset],
    step2: Sequence[DomainDataset],
    settings: FinetuneSettings,
    seed: int,
) -> GuidgModel:
    """
    The universal baseline: one prompt on the pooled sources, then the same
    Step-2 budget with a single expert and no CMAttn.
    """
    pooled1 = concat_domains(step1, domain_id=-1)
    pooled2 = concat_domains(step2, domain_id=-1)
    return guidg_train(pair, [pooled1], [pooled2], settings, seed, WeightingMode.UNIFORM)


# =============================================================================
# Inference
# =============================================================================

@dataclass(frozen=True)
class EnsemblePrediction:
    label: int
    expert_logits: np.ndarray
    weights: np.ndarray


def ensemble_logits(
    pair: EncoderPair,
    experts: ExpertSet,
    params: CmattnParams,
    X,
    weighting: WeightingMode = WeightingMode.LEARNABLE,
    temperature: float = 1.0,
    weights: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(combined n x C, per-expert d x n x C, weights n x d)."""
    experts.require_prompts()
    Z = image_features(pair, X)
    per_expert = np.stack([cosine_matrix(Z, T)[0] for T in experts.text_feats]) / pair.temperature
    n = Z.shape[0]
    if weights is not None:
        Wt = np.broadcast_to(np.asarray(weights, dtype=np.float64), (n, experts.size))
    elif WeightingMode(weighting) == WeightingMode.LEARNABLE:
        Wt, _ = _attention_forward(params, Z, experts.text_feats, temperature)
    else:
        Wt = np.full((n, experts.size), 1.0 / experts.size)
    combined = np.einsum("ni,inc->nc", Wt, per_expert)
    return combined, per_expert, np.array(Wt)


def ensemble_infer(
    pair: EncoderPair,
    experts: ExpertSet,
    params: CmattnParams,
    x,
    weighting: WeightingMode = WeightingMode.LEARNABLE,
    temperature: float = 1.0,
    weights: Optional[np.ndarray] = None,
) -> EnsemblePrediction:
    """argmax_c sum_i w_i(x) cos<E_v(x), T^i_c> / tau, with diagnostics."""
    x = np.asarray(x, dtype=np.float64)
    combined, per_expert, Wt = ensemble_logits(pair, experts, params, x[None, :], weighting, temperature, weights)
    return EnsemblePrediction(int(np.argmax(combined[0])), per_expert[:, 0, :], Wt[0])


def model_accuracy(model: GuidgModel, dataset: DomainDataset) -> float:
    combined, _, _ = ensemble_logits(
        model.pair, model.experts, model.params, dataset.features, model.weighting, model.temperature,
    )
    return float(np.mean(np.argmax(combined, axis=1) == dataset.labels))


# =============================================================================
# Toy path: MLP experts plus gating aggregator
# =============================================================================

def toy_expert_outputs(experts: Sequence[MlpModel], X) -> np.ndarray:
    """(n, k) raw-scale predictions of k toy experts."""
    X = np.asarray(X, dtype=np.float64).reshape(-1, 1)
    cols = []
    for model in experts:
        if model.input_dim != 1 or model.output_dim != 1:
            raise RejectedInputError("toy experts must map 1 -> 1")
        out, _ = forward_batch(model, X)
        cols.append(out[:, 0])
    return np.column_stack(cols)


def toy_aggregator_inputs(experts: Sequence[MlpModel], X, include_input: bool = False) -> np.ndarray:
    """Expert outputs / TOY_SCALE, then the raw x column when include_input."""
    features = toy_expert_outputs(experts, X) / TOY_SCALE
    if include_input:
        x = np.asarray(X, dtype=np.float64).reshape(-1, 1)
        features = np.column_stack([features, x[:, 0]])
    return features


def init_toy_aggregator(n_experts: int = 2, hidden: int = 3, include_input: bool = False, seed: int = 0) -> MlpModel:
    """(n_experts [+1]) -> hidden -> (n_experts - 1) tanh gate; 2 -> 3 -> 1 has 13 parameters."""
    if n_experts < 2:
        raise RejectedInputError("the toy aggregator needs >= 2 experts")
    return MlpModel.init([n_experts + int(include_input), hidden, n_experts - 1], Activation.TANH, seed)


def _check_toy_aggregator(experts: Sequence[MlpModel], aggregator: MlpModel, include_input: bool):
    expected = len(experts) + int(include_input)
    if len(experts) < 2 or aggregator.input_dim != expected or aggregator.output_dim != len(experts) - 1:
        raise RejectedInputError(f"aggregator must map {expected} -> {max(len(experts) - 1, 1)}")


def toy_gate_weights(gate_logits: np.ndarray) -> np.ndarray:
    """Softmax over the aggregator outputs plus a fixed zero logit for the last expert."""
    gate_logits = np.asarray(gate_logits, dtype=np.float64)
    logits = np.column_stack([gate_logits, np.zeros(gate_logits.shape[0])])
    return softmax(logits, axis=1)


def toy_gate_loss(
    aggregator: MlpModel,
    inputs: np.ndarray,
    expert_outputs: np.ndarray,
    targets: np.ndarray,
) -> Tuple[float, GradientSet]:
    """
    Mean squared error of sum_i w_i(x) f_i(x) / TOY_SCALE against y / TOY_SCALE,
    and its gradient for the aggregator parameters.
    """
    out, cache = forward_batch(aggregator, inputs)
    scaled = np.asarray(expert_outputs, dtype=np.float64) / TOY_SCALE
    weights = toy_gate_weights(out)
    residual = np.sum(weights * scaled, axis=1) - np.asarray(targets, dtype=np.float64) / TOY_SCALE
    n = residual.shape[0]
    d_weights = (2.0 * residual / n)[:, None] * scaled
    d_logits = softmax_backward(weights, d_weights)
    grads, _ = backward_batch(aggregator, cache, d_logits[:, :-1])
    return float(np.mean(residual ** 2)), grads


def toy_aggregate_train(
    experts: Sequence[MlpModel],
    aggregator: MlpModel,
    step2: DomainDataset,
    epochs: int,
    lr: float,
    seed: int,
    include_input: bool = False,
    batch_size: int = 0,
) -> MlpModel:
    """
    Fit the gate by mse on Step-2 data with AdamW; experts are only evaluated.
    The prediction is the gate-weighted mix of expert outputs.
    """
    _check_toy_aggregator(experts, aggregator, include_input)
    inputs = toy_aggregator_inputs(experts, step2.features, include_input)
    outputs = toy_expert_outputs(experts, step2.features)
    targets = np.asarray(step2.labels, dtype=np.float64)
    n = targets.shape[0]
    if n == 0:
        raise RejectedInputError("cannot fit the aggregator on an empty dataset")
    size = n if batch_size <= 0 else min(batch_size, n)
    rng = make_rng(seed)
    state = init_optimizer(aggregator.parameters(), OptimizerKind.ADAMW, lr)
    current = aggregator.copy()

    for epoch in range(epochs):
        order = rng.permutation(n) if size < n else np.arange(n)
        total = 0.0
        for start in range(0, n, size):
            idx = order[start:start + size]
            loss, grads = toy_gate_loss(current, inputs[idx], outputs[idx], targets[idx])
            current, state = optimizer_step(state, current, grads)
            total += loss * idx.shape[0]
        if epoch % 250 == 0:
            logger.debug("toy aggregator epoch %d loss %.6f", epoch, total / n)
    return current


def toy_aggregate_predict(
    experts: Sequence[MlpModel], aggregator: MlpModel, X, include_input: bool = False
) -> np.ndarray:
    _check_toy_aggregator(experts, aggregator, include_input)
    out, _ = forward_batch(aggregator, toy_aggregator_inputs(experts, X, include_input))
    return np.sum(toy_gate_weights(out) * toy_expert_outputs(experts, X), axis=1)
