"""
Miniature frozen dual encoder.

A vision MLP maps features to d_f; a text-analog MLP maps
(flattened prompt block ++ class embedding) to d_f. Classification is the
zero-shot rule: softmax over cos<E_v(x), T_c> / tau.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..models import Activation, OptimizerKind
from .datagen import DomainDataset, concat_domains
from .errors import RejectedInputError
from .nn_core import (
    ForwardCache,
    MlpModel,
    backward_batch,
    child_seed,
    cosine_matrix,
    cosine_matrix_backward,
    forward_batch,
    init_optimizer,
    log_softmax,
    make_rng,
    softmax,
    step_parameters,
)


logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.01


# =============================================================================
# Containers
# =============================================================================

@dataclass
class PromptExpert:
    """A learnable prompt block (prompt_len x embed_dim) owned by one domain."""
    domain_id: int
    embeddings: np.ndarray

    def __post_init__(self):
        self.embeddings = np.array(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise RejectedInputError("prompt embeddings must be a (prompt_len, embed_dim) matrix")
        if not np.all(np.isfinite(self.embeddings)):
            raise RejectedInputError("prompt embeddings must be finite")

    @property
    def prompt_len(self) -> int:
        return self.embeddings.shape[0]

    def copy(self) -> "PromptExpert":
        return PromptExpert(self.domain_id, self.embeddings.copy())


@dataclass
class EncoderPair:
    vision_encoder: MlpModel
    text_encoder: MlpModel
    class_embeddings: np.ndarray
    default_context: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if self.temperature <= 0:
            raise RejectedInputError("temperature must be > 0")
        if self.vision_encoder.output_dim != self.text_encoder.output_dim:
            raise RejectedInputError("vision and text encoders must share d_f")
        expected_in = (self.default_context.shape[0] + 1) * self.class_embeddings.shape[1]
        if self.text_encoder.input_dim != expected_in:
            raise RejectedInputError("text encoder input must be (prompt_len + 1) * embed_dim")
        self.class_embeddings = np.array(self.class_embeddings, dtype=np.float64)
        norms = np.linalg.norm(self.class_embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            self.class_embeddings = _unit_rows(self.class_embeddings)

    @property
    def n_classes(self) -> int:
        return self.class_embeddings.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.class_embeddings.shape[1]

    @property
    def prompt_len(self) -> int:
        return self.default_context.shape[0]

    @property
    def d_f(self) -> int:
        return self.vision_encoder.output_dim

    @property
    def feature_dim(self) -> int:
        return self.vision_encoder.input_dim

    def context_expert(self, domain_id: int = -1) -> PromptExpert:
        """A prompt expert initialized at the default context."""
        return PromptExpert(domain_id, self.default_context.copy())

    def with_vision(self, vision_encoder: MlpModel) -> "EncoderPair":
        return EncoderPair(
            vision_encoder, self.text_encoder, self.class_embeddings,
            self.default_context, self.temperature,
        )

    def copy(self) -> "EncoderPair":
        return EncoderPair(
            self.vision_encoder.copy(), self.text_encoder.copy(),
            self.class_embeddings.copy(), self.default_context.copy(), self.temperature,
        )


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    matrix = np.array(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise RejectedInputError("class embeddings must be nonzero")
    return matrix / norms


def init_encoder_pair(
    feature_dim: int,
    n_classes: int,
    d_f: int = 32,
    embed_dim: int = 16,
    prompt_len: int = 16,
    hidden: int = 64,
    temperature: float = DEFAULT_TEMPERATURE,
    seed: int = 0,
) -> EncoderPair:
    """Seeded initialization; the text encoder keeps this map forever."""
    if d_f < 2 or embed_dim < 2:
        raise RejectedInputError("d_f and embed_dim must be >= 2")
    if prompt_len < 1:
        raise RejectedInputError("prompt_len must be >= 1")
    vision = MlpModel.init([feature_dim, hidden, d_f], Activation.TANH, child_seed(seed, "vision"))
    text = MlpModel.init([(prompt_len + 1) * embed_dim, hidden, d_f], Activation.TANH, child_seed(seed, "text"))
    rng = make_rng(child_seed(seed, "embeddings"))
    class_embeddings = rng.normal(size=(n_classes, embed_dim))
    # total context norm ~1, comparable with one unit class embedding
    context = rng.normal(size=(prompt_len, embed_dim)) / np.sqrt(prompt_len * embed_dim)
    return EncoderPair(vision, text, class_embeddings, context, temperature)


# =============================================================================
# Text side
# =============================================================================

def _prompt_inputs(context: np.ndarray, class_embeddings: np.ndarray) -> np.ndarray:
    C = class_embeddings.shape[0]
    return np.hstack([np.tile(context.reshape(1, -1), (C, 1)), class_embeddings])


def _check_expert(pair: EncoderPair, expert: PromptExpert):
    if expert.embeddings.shape != pair.default_context.shape:
        raise RejectedInputError(
            f"expert shape {expert.embeddings.shape} != {pair.default_context.shape}"
        )


def text_features_with_cache(
    pair: EncoderPair,
    context: np.ndarray,
    class_embeddings: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, ForwardCache]:
    class_embeddings = pair.class_embeddings if class_embeddings is None else class_embeddings
    return forward_batch(pair.text_encoder, _prompt_inputs(context, class_embeddings))


def text_features_backward(
    pair: EncoderPair, cache: ForwardCache, d_text: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """(d_context, d_class_embeddings) for dL/dT; the text encoder itself stays frozen."""
    _, d_input = backward_batch(pair.text_encoder, cache, d_text)
    split = pair.prompt_len * pair.embed_dim
    d_context = d_input[:, :split].sum(axis=0).reshape(pair.prompt_len, pair.embed_dim)
    return d_context, d_input[:, split:]


def text_features(pair: EncoderPair, expert: Optional[PromptExpert] = None) -> np.ndarray:
    """T_c for every class under one prompt block (C x d_f)."""
    context = pair.default_context if expert is None else expert.embeddings
    if expert is not None:
        _check_expert(pair, expert)
    feats, _ = text_features_with_cache(pair, context)
    return feats


def build_prompt(expert: PromptExpert, class_id: int, pair: EncoderPair) -> np.ndarray:
    """T^i_c = E_t([p_i ++ e_c])."""
    if not 0 <= class_id < pair.n_classes:
        raise RejectedInputError(f"class {class_id} out of range for {pair.n_classes} classes")
    _check_expert(pair, expert)
    x = np.concatenate([expert.embeddings.reshape(-1), pair.class_embeddings[class_id]])
    out, _ = forward_batch(pair.text_encoder, x[None, :])
    return out[0]


# =============================================================================
# Zero-shot rule
# =============================================================================

def image_features(pair: EncoderPair, X) -> np.ndarray:
    feats, _ = forward_batch(pair.vision_encoder, X)
    return feats


def similarity_logits(pair: EncoderPair, X, texts: np.ndarray) -> np.ndarray:
    """cos<E_v(x), T_c> / tau for every row of X (n x C)."""
    texts = np.asarray(texts, dtype=np.float64)
    if texts.ndim != 2 or texts.shape[0] == 0:
        raise RejectedInputError("texts must be a nonempty (C, d_f) matrix")
    sims, _ = cosine_matrix(image_features(pair, X), texts)
    return sims / pair.temperature


def zero_shot_predict(pair: EncoderPair, x, texts: Sequence[np.ndarray]) -> np.ndarray:
    """P(y = c | x) = softmax_c(cos<E_v(x), T_c> / tau)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise RejectedInputError("zero_shot_predict takes a single feature vector")
    texts = np.asarray(texts, dtype=np.float64)
    return softmax(similarity_logits(pair, x[None, :], texts))[0]


def zero_shot_accuracy(pair: EncoderPair, dataset: DomainDataset, texts: np.ndarray) -> float:
    logits = similarity_logits(pair, dataset.features, texts)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


# =============================================================================
# Pretraining
# =============================================================================

def _contrastive_grads(pair: EncoderPair, vision: MlpModel, class_embeddings: np.ndarray, X, y):
    """Mean Eq.-1 cross-entropy and grads for (vision params, class embeddings)."""
    Z, v_cache = forward_batch(vision, X)
    T, t_cache = text_features_with_cache(pair, pair.default_context, class_embeddings)
    S, c_cache = cosine_matrix(Z, T)
    logits = S / pair.temperature
    lsm = log_softmax(logits)
    n = X.shape[0]
    rows = np.arange(n)
    loss = -np.mean(lsm[rows, y])
    d_logits = np.exp(lsm)
    d_logits[rows, y] -= 1.0
    d_logits /= n
    dZ, dT = cosine_matrix_backward(c_cache, d_logits / pair.temperature)
    v_grads, _ = backward_batch(vision, v_cache, dZ)
    _, d_class = text_features_backward(pair, t_cache, dT)
    return float(loss), v_grads.as_list() + [d_class]


def pretrain_mock_encoders(
    suite: Sequence[DomainDataset],
    d_f: int = 32,
    embed_dim: int = 16,
    epochs: int = 30,
    seed: int = 0,
    prompt_len: int = 16,
    hidden: int = 64,
    temperature: float = DEFAULT_TEMPERATURE,
    lr: float = 5e-3,
    batch_size: int = 32,
    n_classes: Optional[int] = None,
) -> EncoderPair:
    """
    Train E_v and the class embeddings through the frozen text map.

    The text side always reads the default context, so zero-shot with the
    default prompt is the pretrained classifier. Class embeddings are
    re-normalized after every step. epochs = 0 returns the seeded init.
    """
    if not suite:
        raise RejectedInputError("pretraining pool is empty")
    pool = concat_domains(list(suite))
    if n_classes is None:
        n_classes = int(pool.labels.max()) + 1
    pair = init_encoder_pair(
        pool.feature_dim, n_classes, d_f, embed_dim, prompt_len, hidden, temperature, seed,
    )
    if epochs == 0:
        return pair

    vision = pair.vision_encoder
    class_embeddings = pair.class_embeddings
    params = vision.parameters() + [class_embeddings]
    state = init_optimizer(params, OptimizerKind.ADAMW, lr)
    rng = make_rng(child_seed(seed, "pretrain-order"))
    n = pool.n_samples
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = _contrastive_grads(pair, vision, class_embeddings, pool.features[idx], pool.labels[idx])
            params, state = step_parameters(state, params, grads)
            vision = vision.with_parameters(params[:-1])
            class_embeddings = _unit_rows(params[-1])
            params = vision.parameters() + [class_embeddings]
            total += loss * idx.shape[0]
        logger.debug("pretrain epoch %d loss %.4f", epoch, total / n)

    return EncoderPair(vision, pair.text_encoder, class_embeddings, pair.default_context, temperature)
