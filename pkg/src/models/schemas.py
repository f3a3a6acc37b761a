"""
Config and report records for guidg-mini.
Every record is a pydantic model; numerical state (weights, datasets)
lives in plain dataclasses next to the code that owns it.
"""

import math
from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


SIMPLEX_TOL = 1e-9
MIXTURE_TOL = 1e-12


class Activation(str, Enum):
    """Hidden-layer nonlinearity. Output layers are always identity."""
    TANH = "tanh"
    RELU = "relu"
    IDENTITY = "identity"


class LossKind(str, Enum):
    CROSS_ENTROPY_LOGITS = "cross_entropy_logits"
    MSE = "mse"


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAMW = "adamw"


class RegularizerKind(str, Enum):
    """Off-the-shelf fine-tuning regularizers added to the Step-2 loss."""
    NONE = "none"
    ENTROPY_UEO = "entropy_ueo"
    MMS = "mms"


class WeightingMode(str, Enum):
    """How expert losses are combined in Step 2."""
    LEARNABLE = "learnable"  # CMAttn weights
    UNIFORM = "uniform"      # fixed 1/d


class ExpertMode(str, Enum):
    PROMPT = "prompt"  # prompt blocks over the dual encoder
    MLP = "mlp"        # plain regression networks (toy path)


class DataMode(str, Enum):
    """Whether Step 1 and Step 2 see disjoint halves or the same pool."""
    DISJOINT = "disjoint"
    SHARED = "shared"


class ExperimentKind(str, Enum):
    TOY = "toy"
    DG = "dg"
    ABLATE = "ablate"
    BOUNDS = "bounds"
    GRADCHECK = "gradcheck"


class ReportFormat(str, Enum):
    CSV = "csv"
    JSONL = "jsonl"


# =============================================================================
# Bounds
# =============================================================================

class BoundConfig(BaseModel):
    """
    Every symbol of the ensemble / universal generalization bounds.

    n and m are the Step-1 / Step-2 sample totals; per-domain counts are
    always pi_i * n and pi_i * m. Reals are accepted for n and m so that
    limiting cases (N = e, etc.) can be evaluated.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    d: int = Field(..., ge=1, description="number of source domains")
    n: float = Field(..., gt=0)
    m: float = Field(..., gt=0)
    pi: List[float]
    pi_prime: List[float]
    d0: float = Field(..., gt=0, description="VC-dim of the universal space")
    d_tilde: float = Field(..., gt=0, description="VC-dim of the aggregator space")
    d_i: List[float]
    delta: float = Field(0.05, gt=0, lt=1)
    c_L: float = Field(1.0, gt=0, description="loss bound")
    C_const: float = Field(1.0, gt=0, description="universal constant C")

    @model_validator(mode="after")
    def _check_mixtures(self) -> "BoundConfig":
        for name in ("pi", "pi_prime", "d_i"):
            if len(getattr(self, name)) != self.d:
                raise ValueError(f"{name} must have length d={self.d}")
        if any(p <= 0 for p in self.pi):
            raise ValueError("all pi must be > 0")
        if any(p < 0 for p in self.pi_prime):
            raise ValueError("all pi_prime must be >= 0")
        if abs(math.fsum(self.pi) - 1.0) > MIXTURE_TOL:
            raise ValueError("pi must sum to 1")
        if abs(math.fsum(self.pi_prime) - 1.0) > MIXTURE_TOL:
            raise ValueError("pi_prime must sum to 1")
        if any(di <= 0 for di in self.d_i):
            raise ValueError("all d_i must be > 0")
        return self

    @property
    def N(self) -> float:
        return self.n + self.m

    @property
    def n_source(self) -> List[float]:
        """Per-domain Step-1 counts n_i = pi_i * n."""
        return [p * self.n for p in self.pi]

    @property
    def n_step2(self) -> List[float]:
        """Per-domain Step-2 counts pi_i * m."""
        return [p * self.m for p in self.pi]


class Remark3Check(BaseModel):
    """Outcome of the ensemble-vs-universal capacity condition."""
    holds: bool
    lhs: float
    rhs: float
    c_delta: float
    simplified_holds: bool
    simplified_lhs: float


# =============================================================================
# Method configuration
# =============================================================================

class RegularizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: RegularizerKind = RegularizerKind.NONE
    alpha: float = Field(0.1, ge=0, description="weight of L_r in the joint objective")
    lambda_margin: float = Field(0.1, description="MMS margin weight")
    wise_alpha: float = Field(0.5, ge=0, le=1, description="WiSE-FT mixing weight")
    bma_beta: float = Field(0.5, gt=0, description="Beta(beta, beta) for BMA")


class ToySection(BaseModel):
    """Regression toy: universal 1-h-h-1 net vs two experts plus aggregator."""
    model_config = ConfigDict(extra="forbid")

    h1: List[int] = Field(default_factory=lambda: [60, 80, 100])
    expert_hidden: int = Field(40, ge=1)
    aggregator_hidden: int = Field(3, ge=1)
    aggregator_sees_input: bool = True
    n_train: int = Field(200, ge=4)
    n_test: int = Field(5000, ge=1)
    noise_sd: float = Field(0.5, ge=0)
    x_range: Tuple[float, float] = (-4.0, 4.0)
    step2_fraction: float = Field(0.5, gt=0, lt=1)
    activation: Activation = Activation.TANH
    epochs: int = Field(1500, ge=0)
    aggregator_epochs: int = Field(1500, ge=0)
    lr: float = Field(1e-2, gt=0)
    batch_size: int = Field(0, ge=0, description="0 means full batch")
    delta: float = Field(0.05, gt=0, lt=1)
    c_L: float = Field(1.0, gt=0)
    C_const: float = Field(1.0, gt=0)

    @field_validator("h1")
    @classmethod
    def _h1_nonempty(cls, v: List[int]) -> List[int]:
        if not v:
            raise ValueError("toy.h1 must list at least one width")
        if any(h < 1 for h in v):
            raise ValueError("toy.h1 widths must be positive")
        return v

    @field_validator("x_range")
    @classmethod
    def _range_ordered(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        if v[0] >= v[1]:
            raise ValueError("toy.x_range must satisfy lo < hi")
        return v


class DgSection(BaseModel):
    """Miniature multi-domain benchmark run leave-one-domain-out."""
    model_config = ConfigDict(extra="forbid")

    n_domains: int = Field(4, ge=2)
    n_classes: int = Field(10, ge=2)
    feature_dim: int = Field(16, ge=2)
    samples_per_domain: List[int] = Field(default_factory=lambda: [400])
    domain_shift_strength: float = Field(1.0, ge=0)
    k_shot: int = Field(16, ge=0, description="0 keeps every sample")
    step2_fraction: float = Field(0.5, gt=0, lt=1)

    d_f: int = Field(32, ge=2)
    embed_dim: int = Field(16, ge=2)
    prompt_len: int = Field(16, ge=1)
    temperature: float = Field(0.01, gt=0)
    encoder_hidden: int = Field(64, ge=1)

    pretrain_samples_per_domain: int = Field(300, ge=1)
    pretrain_label_noise: float = Field(0.3, ge=0, le=1)
    pretrain_epochs: int = Field(30, ge=0)
    pretrain_lr: float = Field(5e-3, gt=0)

    expert_epochs: int = Field(40, ge=0)
    expert_lr: float = Field(2e-3, gt=0)

    finetune_epochs: int = Field(20, ge=0)
    finetune_lr: float = Field(1e-3, gt=0)
    cmattn_lr: float = Field(1e-2, gt=0)
    cmattn_temperature: float = Field(1.0, gt=0)
    batch_size: int = Field(32, ge=1)

    reg: RegularizerConfig = Field(default_factory=RegularizerConfig)
    use_bma: bool = False
    use_wise: bool = False

    @model_validator(mode="after")
    def _check_sizes(self) -> "DgSection":
        sizes = self.domain_sizes()
        if any(s < self.n_classes for s in sizes):
            raise ValueError("every domain needs at least n_classes samples")
        return self

    def domain_sizes(self) -> List[int]:
        """samples_per_domain broadcast to n_domains entries."""
        if len(self.samples_per_domain) == 1:
            return self.samples_per_domain * self.n_domains
        if len(self.samples_per_domain) != self.n_domains:
            raise ValueError("dg.samples_per_domain must have 1 or n_domains entries")
        return list(self.samples_per_domain)


class ExperimentConfig(BaseModel):
    """Everything one CLI run needs; serialized verbatim into the manifest."""
    model_config = ConfigDict(extra="forbid")

    kind: ExperimentKind = ExperimentKind.TOY
    seed: int = 0
    repeats: Optional[int] = Field(None, ge=0)
    out_dir: str = "results"
    format: ReportFormat = ReportFormat.CSV
    toy: ToySection = Field(default_factory=ToySection)
    dg: DgSection = Field(default_factory=DgSection)
    bounds: Optional[BoundConfig] = None

    def repeat_count(self) -> int:
        """Repeats for the configured experiment (toy 40, dg/ablate 20)."""
        if self.repeats is not None:
            return self.repeats
        return 40 if self.kind == ExperimentKind.TOY else 20


# =============================================================================
# Reports
# =============================================================================

class ToyRow(BaseModel):
    """One row of the toy table."""
    h1: int
    R_B: float
    R_O: float
    E_B: float
    E_O: float
    R: float
    r: float

    @model_validator(mode="after")
    def _consistent(self) -> "ToyRow":
        values = (self.R_B, self.R_O, self.E_B, self.E_O, self.R, self.r)
        if not all(math.isfinite(v) for v in values):
            raise ValueError("toy row entries must be finite")
        if abs(self.R - self.E_B / self.E_O) > 1e-9 * max(1.0, abs(self.R)):
            raise ValueError("R must equal E_B / E_O")
        return self


class WeightReport(BaseModel):
    """Per target domain: how the ensemble weighted each source expert."""
    target_domain: int
    expert_domains: List[int]
    mean_weights: List[float]
    solo_accuracy: List[float]
    ensemble_accuracy: float = Field(..., ge=0, le=1)
    best_solo_accuracy: float = Field(..., ge=0, le=1)
    erm_accuracy: float = Field(..., ge=0, le=1)
    worst_expert_min_weight_rate: float = Field(..., ge=0, le=1)
    n_evaluations: int

    @model_validator(mode="after")
    def _on_simplex(self) -> "WeightReport":
        if abs(math.fsum(self.mean_weights) - 1.0) > SIMPLEX_TOL:
            raise ValueError("mean weights must sum to 1")
        if any(w < 0 for w in self.mean_weights):
            raise ValueError("mean weights must be nonnegative")
        if any(not 0.0 <= a <= 1.0 for a in self.solo_accuracy):
            raise ValueError("accuracies must lie in [0, 1]")
        return self


class DgRow(BaseModel):
    """One (seed, held-out domain, method) accuracy measurement."""
    seed: int
    target_domain: int
    method: str
    accuracy: float = Field(..., ge=0, le=1)


class AblationCell(BaseModel):
    data_mode: DataMode
    variant: str
    mean_accuracy: float
    n_evaluations: int


class GradCheckReport(BaseModel):
    """Worst relative error between backprop and central differences."""
    label: str = ""
    max_rel_error: float
    n_checked: int
    fd_step: float
    tol: float
    passed: bool
