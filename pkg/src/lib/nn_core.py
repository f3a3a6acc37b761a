"""
Fully-connected network engine.

Forward evaluation, exact reverse-mode gradients, losses, SGD/AdamW and a
central-difference gradient checker. Everything is float64 numpy; models are
plain values, so two training runs never share mutable state.

Layout conventions:
- layer l maps width layer_sizes[l] -> layer_sizes[l+1]
- W[l] has shape (layer_sizes[l+1], layer_sizes[l]), b[l] has length layer_sizes[l+1]
- the flat parameter order is W0, b0, W1, b1, ... (row-major inside each W)
"""

import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..models import Activation, GradCheckReport, LossKind, OptimizerKind
from .errors import NumericError, RejectedInputError


logger = logging.getLogger(__name__)

# Denominator floor for relative gradient errors; below it the check is absolute.
REL_ERROR_FLOOR = 1e-4


# =============================================================================
# Seeding
# =============================================================================

def child_seed(base: int, *keys: Union[int, str]) -> int:
    """
    Derive an independent seed from a base seed and a path of keys.

    Rule: SeedSequence([base, k1, k2, ...]).generate_state(1)[0], where string
    keys are first mapped through crc32. Repeat k of any experiment therefore
    depends only on (base, ..., k), never on how many repeats ran before it.
    """
    entropy = [int(base) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf-8")))
        else:
            entropy.append(int(key) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


# =============================================================================
# Model and gradient containers
# =============================================================================

@dataclass
class MlpModel:
    """A dense network: affine layers, shared hidden activation, identity output."""
    layer_sizes: List[int]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activation: Activation = Activation.TANH

    def __post_init__(self):
        if len(self.layer_sizes) < 2 or any(int(s) < 1 for s in self.layer_sizes):
            raise RejectedInputError("layer_sizes needs >= 2 positive widths")
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        self.activation = Activation(self.activation)
        n_layers = len(self.layer_sizes) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise RejectedInputError("one weight matrix and bias per layer required")
        for layer in range(n_layers):
            fan_in, fan_out = self.layer_sizes[layer], self.layer_sizes[layer + 1]
            if self.weights[layer].shape != (fan_out, fan_in):
                raise RejectedInputError(
                    f"layer {layer}: weight shape {self.weights[layer].shape} != {(fan_out, fan_in)}"
                )
            if self.biases[layer].shape != (fan_out,):
                raise RejectedInputError(
                    f"layer {layer}: bias shape {self.biases[layer].shape} != {(fan_out,)}"
                )

    @classmethod
    def init(
        cls,
        layer_sizes: Sequence[int],
        activation: Activation = Activation.TANH,
        seed: int = 0,
    ) -> "MlpModel":
        """Glorot-normal weights (He for relu), zero biases."""
        rng = make_rng(seed)
        activation = Activation(activation)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            if activation == Activation.RELU:
                scale = np.sqrt(2.0 / fan_in)
            else:
                scale = np.sqrt(2.0 / (fan_in + fan_out))
            weights.append(rng.normal(0.0, scale, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(list(layer_sizes), weights, biases, activation)

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int], activation: Activation = Activation.TANH) -> "MlpModel":
        weights = [np.zeros((o, i)) for i, o in zip(layer_sizes[:-1], layer_sizes[1:])]
        biases = [np.zeros(o) for o in layer_sizes[1:]]
        return cls(list(layer_sizes), weights, biases, activation)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def param_count(self) -> int:
        """n(H) = sum over layers of fan_in * fan_out + fan_out."""
        return sum(
            fan_in * fan_out + fan_out
            for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:])
        )

    def parameters(self) -> List[np.ndarray]:
        """The live parameter arrays in flat order (W0, b0, W1, b1, ...)."""
        params = []
        for W, b in zip(self.weights, self.biases):
            params.extend([W, b])
        return params

    def with_parameters(self, params: Sequence[np.ndarray]) -> "MlpModel":
        """A new model with this layout and the given parameter arrays (copied)."""
        if len(params) != 2 * self.n_layers:
            raise RejectedInputError("parameter list does not match model layout")
        weights = [np.array(p, dtype=np.float64) for p in params[0::2]]
        biases = [np.array(p, dtype=np.float64) for p in params[1::2]]
        return MlpModel(list(self.layer_sizes), weights, biases, self.activation)

    def copy(self) -> "MlpModel":
        return self.with_parameters(self.parameters())

    def scale_output(self, factor: float) -> "MlpModel":
        """A copy whose outputs are multiplied by factor (last layer rescaled)."""
        params = self.parameters()
        params[-2] = params[-2] * factor
        params[-1] = params[-1] * factor
        return self.with_parameters(params)


@dataclass
class GradientSet:
    """Per-parameter gradients, same layout as the model they came from."""
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def as_list(self) -> List[np.ndarray]:
        grads = []
        for dW, db in zip(self.weights, self.biases):
            grads.extend([dW, db])
        return grads

    @classmethod
    def from_list(cls, grads: Sequence[np.ndarray]) -> "GradientSet":
        return cls(list(grads[0::2]), list(grads[1::2]))

    def matches(self, model: MlpModel) -> bool:
        return len(self.weights) == model.n_layers and all(
            g.shape == p.shape for g, p in zip(self.as_list(), model.parameters())
        )


@dataclass
class ForwardCache:
    """Layer inputs and pre-activations kept for the backward pass."""
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]


# =============================================================================
# Elementwise and row-wise primitives
# =============================================================================

def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == Activation.TANH:
        return np.tanh(z)
    if activation == Activation.RELU:
        return np.maximum(z, 0.0)
    return z


def _activation_grad(z: np.ndarray, h: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == Activation.TANH:
        return 1.0 - h * h
    if activation == Activation.RELU:
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax; safe for logits of size 1/tau with tau = 0.01."""
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - np.max(z, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given p = softmax(logits) and dL/dp (row-wise)."""
    return p * (dp - np.sum(p * dp, axis=-1, keepdims=True))


@dataclass
class CosineCache:
    a_unit: np.ndarray
    b_unit: np.ndarray
    a_norm: np.ndarray
    b_norm: np.ndarray


def cosine_matrix(A: np.ndarray, B: np.ndarray) -> Tuple[np.ndarray, CosineCache]:
    """
    S[i, j] = cos<A[i], B[j]>.

    Raises RejectedInputError when any row has zero norm (cosine undefined).
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise RejectedInputError(f"cosine dims differ: {A.shape[1]} vs {B.shape[1]}")
    a_norm = np.linalg.norm(A, axis=1)
    b_norm = np.linalg.norm(B, axis=1)
    if np.any(a_norm == 0.0) or np.any(b_norm == 0.0):
        raise RejectedInputError("zero-norm vector in cosine similarity")
    a_unit = A / a_norm[:, None]
    b_unit = B / b_norm[:, None]
    return a_unit @ b_unit.T, CosineCache(a_unit, b_unit, a_norm, b_norm)


def cosine_matrix_backward(cache: CosineCache, dS: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Exact (dA, dB) for S = cosine_matrix(A, B)."""
    d_a_unit = dS @ cache.b_unit
    d_b_unit = dS.T @ cache.a_unit
    dA = (d_a_unit - cache.a_unit * np.sum(cache.a_unit * d_a_unit, axis=1, keepdims=True)) / cache.a_norm[:, None]
    dB = (d_b_unit - cache.b_unit * np.sum(cache.b_unit * d_b_unit, axis=1, keepdims=True)) / cache.b_norm[:, None]
    return dA, dB


# =============================================================================
# Forward / backward
# =============================================================================

def _as_batch(model: MlpModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise RejectedInputError(
            f"input width {X.shape[-1] if X.ndim else 0} != model input {model.input_dim}"
        )
    return X


def forward_batch(model: MlpModel, X) -> Tuple[np.ndarray, ForwardCache]:
    """Evaluate the model on a batch of rows; returns outputs and a backward cache."""
    h = _as_batch(model, X)
    inputs, pre = [], []
    last = model.n_layers - 1
    for layer, (W, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        z = h @ W.T + b
        pre.append(z)
        h = z if layer == last else _activate(z, model.activation)
    return h, ForwardCache(inputs, pre)


def backward_batch(
    model: MlpModel, cache: ForwardCache, d_out: np.ndarray
) -> Tuple[GradientSet, np.ndarray]:
    """Backpropagate dL/d(output) to every parameter and to the input rows."""
    delta = np.asarray(d_out, dtype=np.float64)
    d_weights: List[np.ndarray] = [None] * model.n_layers
    d_biases: List[np.ndarray] = [None] * model.n_layers
    for layer in reversed(range(model.n_layers)):
        d_weights[layer] = delta.T @ cache.inputs[layer]
        d_biases[layer] = delta.sum(axis=0)
        delta = delta @ model.weights[layer]
        if layer > 0:
            z = cache.pre_activations[layer - 1]
            delta = delta * _activation_grad(z, cache.inputs[layer], model.activation)
    return GradientSet(d_weights, d_biases), delta


def mlp_forward(model: MlpModel, x) -> np.ndarray:
    """Evaluate the model on one input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.input_dim:
        raise RejectedInputError(f"expected input of length {model.input_dim}, got shape {x.shape}")
    out, _ = forward_batch(model, x[None, :])
    return out[0]


def kink_margin(model: MlpModel, X) -> float:
    """Smallest |pre-activation| over every hidden unit and input row."""
    _, cache = forward_batch(model, X)
    hidden = cache.pre_activations[:-1]
    if not hidden:
        return float("inf")
    return float(min(np.min(np.abs(z)) for z in hidden))


# =============================================================================
# Losses
# =============================================================================

def loss_eval(kind: LossKind, prediction, target) -> float:
    """Single-sample loss: -log softmax(prediction)[target] or mean squared error."""
    kind = LossKind(kind)
    prediction = np.asarray(prediction, dtype=np.float64).reshape(-1)
    if prediction.size == 0:
        raise RejectedInputError("empty prediction")
    if not np.all(np.isfinite(prediction)):
        raise NumericError("non-finite prediction")

    if kind == LossKind.CROSS_ENTROPY_LOGITS:
        label = int(target)
        if not 0 <= label < prediction.size:
            raise RejectedInputError(f"class index {label} out of range for {prediction.size} logits")
        return float(-log_softmax(prediction)[label])

    target = np.broadcast_to(np.asarray(target, dtype=np.float64), prediction.shape)
    if not np.all(np.isfinite(target)):
        raise NumericError("non-finite target")
    return float(np.mean((prediction - target) ** 2))


def per_sample_losses(kind: LossKind, outputs: np.ndarray, targets) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row losses and dloss/doutputs for a batch of model outputs."""
    kind = LossKind(kind)
    if not np.all(np.isfinite(outputs)):
        raise NumericError("non-finite model output")
    n, width = outputs.shape

    if kind == LossKind.CROSS_ENTROPY_LOGITS:
        labels = np.asarray(targets).astype(np.int64).reshape(-1)
        if labels.shape[0] != n:
            raise RejectedInputError("one label per sample required")
        if np.any(labels < 0) or np.any(labels >= width):
            raise RejectedInputError("class index out of range")
        lsm = log_softmax(outputs)
        rows = np.arange(n)
        losses = -lsm[rows, labels]
        grad = np.exp(lsm)
        grad[rows, labels] -= 1.0
        return losses, grad

    y = np.asarray(targets, dtype=np.float64).reshape(n, -1)
    if y.shape[1] != width:
        raise RejectedInputError("target width differs from output width")
    if not np.all(np.isfinite(y)):
        raise NumericError("non-finite target")
    diff = outputs - y
    return np.mean(diff * diff, axis=1), 2.0 * diff / width


def _sample_weights(per_sample_weights, n: int) -> np.ndarray:
    if per_sample_weights is None:
        return np.ones(n)
    w = np.asarray(per_sample_weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise RejectedInputError(f"{w.shape[0]} sample weights for a batch of {n}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise RejectedInputError("sample weights must be finite and nonnegative")
    return w


def batch_loss(model: MlpModel, inputs, targets, loss_kind: LossKind, per_sample_weights=None) -> float:
    out, _ = forward_batch(model, inputs)
    losses, _ = per_sample_losses(loss_kind, out, targets)
    return float(np.sum(_sample_weights(per_sample_weights, out.shape[0]) * losses))


def backprop_grads(
    model: MlpModel,
    inputs,
    targets,
    loss_kind: LossKind,
    per_sample_weights=None,
) -> Tuple[float, GradientSet]:
    """Weighted-sum loss over the batch and its exact gradient for every parameter."""
    X = _as_batch(model, inputs)
    if X.shape[0] == 0:
        raise RejectedInputError("empty batch")
    out, cache = forward_batch(model, X)
    losses, d_out = per_sample_losses(loss_kind, out, targets)
    w = _sample_weights(per_sample_weights, X.shape[0])
    grads, _ = backward_batch(model, cache, w[:, None] * d_out)
    return float(np.sum(w * losses)), grads


# =============================================================================
# Optimizers
# =============================================================================

@dataclass
class OptimizerState:
    kind: OptimizerKind
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        self.kind = OptimizerKind(self.kind)
        if self.learning_rate <= 0:
            raise RejectedInputError("learning_rate must be > 0")
        if self.step < 0:
            raise RejectedInputError("step counter must be >= 0")


def init_optimizer(
    params: Sequence[np.ndarray],
    kind: OptimizerKind = OptimizerKind.ADAMW,
    learning_rate: float = 1e-2,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> OptimizerState:
    """Fresh optimizer state with zero moments shaped like params."""
    return OptimizerState(
        kind=kind,
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        weight_decay=weight_decay,
        m=[np.zeros_like(p, dtype=np.float64) for p in params],
        v=[np.zeros_like(p, dtype=np.float64) for p in params],
    )


def _frozen(mask_entry, shape) -> np.ndarray:
    if mask_entry is None or mask_entry is False:
        return np.zeros(shape, dtype=bool)
    if mask_entry is True:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask_entry, dtype=bool)
    if mask.shape != shape:
        raise RejectedInputError("freeze mask shape differs from parameter")
    return mask


def step_parameters(
    state: OptimizerState,
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    freeze_mask: Optional[Sequence] = None,
) -> Tuple[List[np.ndarray], OptimizerState]:
    """
    One optimizer update over a list of arrays; returns new arrays and state.

    freeze_mask has one entry per array: True/False or a boolean array with
    True marking frozen entries. Frozen entries and their moments are copied
    through untouched. Weight decay is decoupled, p -= lr * weight_decay * p,
    for SGD and AdamW alike.
    """
    if len(params) != len(grads):
        raise RejectedInputError("gradient list does not match parameters")
    if freeze_mask is not None and len(freeze_mask) != len(params):
        raise RejectedInputError("freeze mask does not match parameters")
    if state.m and len(state.m) != len(params):
        raise RejectedInputError("optimizer state does not match parameters")

    step = state.step + 1
    new_params, new_m, new_v = [], [], []
    for idx, (p, g) in enumerate(zip(params, grads)):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise RejectedInputError(f"gradient {idx} shape {g.shape} != parameter shape {p.shape}")
        frozen = _frozen(None if freeze_mask is None else freeze_mask[idx], p.shape)

        if state.kind == OptimizerKind.SGD:
            updated = p - state.learning_rate * state.weight_decay * p - state.learning_rate * g
            m_i = state.m[idx] if state.m else np.zeros_like(p)
            v_i = state.v[idx] if state.v else np.zeros_like(p)
        else:
            m_prev = state.m[idx] if state.m else np.zeros_like(p)
            v_prev = state.v[idx] if state.v else np.zeros_like(p)
            m_i = state.beta1 * m_prev + (1.0 - state.beta1) * g
            v_i = state.beta2 * v_prev + (1.0 - state.beta2) * g * g
            m_hat = m_i / (1.0 - state.beta1 ** step)
            v_hat = v_i / (1.0 - state.beta2 ** step)
            updated = (
                p
                - state.learning_rate * state.weight_decay * p
                - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
            )
            m_i = np.where(frozen, m_prev, m_i)
            v_i = np.where(frozen, v_prev, v_i)

        new_params.append(np.where(frozen, p, updated))
        new_m.append(m_i)
        new_v.append(v_i)

    new_state = OptimizerState(
        kind=state.kind,
        learning_rate=state.learning_rate,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
        weight_decay=state.weight_decay,
        m=new_m,
        v=new_v,
        step=step,
    )
    return new_params, new_state


def optimizer_step(
    state: OptimizerState,
    model: MlpModel,
    grads: GradientSet,
    freeze_mask: Optional[Sequence] = None,
) -> Tuple[MlpModel, OptimizerState]:
    """Apply one update to a model; the input model is left untouched."""
    if not grads.matches(model):
        raise RejectedInputError("gradients are not shape-congruent with the model")
    params, state = step_parameters(state, model.parameters(), grads.as_list(), freeze_mask)
    return model.with_parameters(params), state


def fit_model(
    model: MlpModel,
    inputs,
    targets,
    loss_kind: LossKind = LossKind.MSE,
    epochs: int = 100,
    lr: float = 1e-2,
    batch_size: int = 0,
    seed: int = 0,
    weight_decay: float = 0.0,
) -> Tuple[MlpModel, List[float]]:
    """
    Minibatch AdamW on the batch-mean loss.

    batch_size <= 0 trains full batch. Returns the trained copy and the
    per-epoch mean training loss.
    """
    X = _as_batch(model, inputs)
    y = np.asarray(targets)
    n = X.shape[0]
    if n == 0:
        raise RejectedInputError("cannot fit on an empty dataset")
    size = n if batch_size <= 0 else min(batch_size, n)
    rng = make_rng(seed)
    state = init_optimizer(model.parameters(), OptimizerKind.ADAMW, lr, weight_decay=weight_decay)
    current = model.copy()
    history: List[float] = []

    for epoch in range(epochs):
        order = rng.permutation(n) if size < n else np.arange(n)
        total = 0.0
        for start in range(0, n, size):
            idx = order[start:start + size]
            weights = np.full(idx.shape[0], 1.0 / idx.shape[0])
            loss, grads = backprop_grads(current, X[idx], y[idx], loss_kind, weights)
            current, state = optimizer_step(state, current, grads)
            total += loss * idx.shape[0]
        history.append(total / n)
        if epoch % 250 == 0:
            logger.debug("fit_model epoch %d loss %.6f", epoch, history[-1])

    return current, history


# =============================================================================
# Gradient checking
# =============================================================================

def finite_difference_check(
    loss_fn: Callable[[], float],
    params: Sequence[np.ndarray],
    analytic_grads: Sequence[np.ndarray],
    fd_step: float = 1e-5,
    tol: float = 1e-4,
    label: str = "",
) -> GradCheckReport:
    """
    Compare analytic gradients with central differences, entry by entry.

    loss_fn must read the arrays in params; each entry is perturbed in place
    and restored before the next. Relative error is
    |a - fd| / max(|a|, |fd|, REL_ERROR_FLOOR).
    """
    if fd_step <= 0:
        raise RejectedInputError("fd_step must be > 0")
    worst = 0.0
    checked = 0
    for p, g in zip(params, analytic_grads):
        if p.shape != np.shape(g):
            raise RejectedInputError("analytic gradient shape differs from parameter")
        flat_g = np.asarray(g).reshape(-1)
        for i in range(p.size):
            original = p.flat[i]
            p.flat[i] = original + fd_step
            plus = loss_fn()
            p.flat[i] = original - fd_step
            minus = loss_fn()
            p.flat[i] = original
            numeric = (plus - minus) / (2.0 * fd_step)
            a = flat_g[i]
            denom = max(abs(a), abs(numeric), REL_ERROR_FLOOR)
            worst = max(worst, abs(a - numeric) / denom)
            checked += 1
    return GradCheckReport(
        label=label,
        max_rel_error=float(worst),
        n_checked=checked,
        fd_step=fd_step,
        tol=tol,
        passed=bool(worst <= tol),
    )


def grad_check(
    model: MlpModel,
    inputs,
    targets,
    loss_kind: LossKind,
    fd_step: float = 1e-5,
    tol: float = 1e-4,
    per_sample_weights=None,
) -> GradCheckReport:
    """backprop_grads vs central differences on a private copy of the model."""
    if fd_step <= 0:
        raise RejectedInputError("fd_step must be > 0")
    if model.activation == Activation.RELU and kink_margin(model, inputs) < 10.0 * fd_step:
        raise RejectedInputError("relu pre-activation within 10*fd_step of a kink")
    work = model.copy()
    _, grads = backprop_grads(work, inputs, targets, loss_kind, per_sample_weights)
    label = "x".join(str(s) for s in model.layer_sizes) + f"/{model.activation.value}"
    return finite_difference_check(
        lambda: batch_loss(work, inputs, targets, loss_kind, per_sample_weights),
        work.parameters(),
        grads.as_list(),
        fd_step=fd_step,
        tol=tol,
        label=label,
    )
