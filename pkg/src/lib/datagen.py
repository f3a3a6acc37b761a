"""
Synthetic data generation.

Two generators:
- the 1-D toy regression task y = f(x) + noise used to compare a universal
  network against an aggregated pair of experts
- a multi-domain classification suite with a shared labeling rule: classes are
  Gaussian prototypes in a latent space, and every domain sees that latent
  space through its own rotation and shift

Every generator is a pure function of its arguments and seed.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import expm

from .errors import NumericError, RejectedInputError
from .nn_core import child_seed, make_rng


logger = logging.getLogger(__name__)

DEFAULT_X_RANGE = (-4.0, 4.0)
DEFAULT_NOISE_SD = 0.5
DEFAULT_CLASS_SEPARATION = 1.5
LATENT_SD = 1.0

# Rejection-sampling rounds before giving up on a class.
_MAX_DRAW_ROUNDS = 200


# =============================================================================
# Containers
# =============================================================================

@dataclass(frozen=True)
class DomainDataset:
    """
    One source or target domain.

    labels are int64 class indices for classification and float64 targets for
    regression. indices are the row ids in the parent pool, so splits can be
    checked for disjointness. Arrays are read-only after construction.
    """
    domain_id: int
    features: np.ndarray
    labels: np.ndarray
    pi: float = 1.0
    indices: Optional[np.ndarray] = None

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        if features.ndim == 1:
            features = features[:, None]
        labels = np.array(self.labels)
        if features.ndim != 2 or features.shape[0] < 1:
            raise RejectedInputError(f"domain {self.domain_id}: needs at least one sample")
        if labels.shape[0] != features.shape[0]:
            raise RejectedInputError(f"domain {self.domain_id}: one label per sample required")
        if not np.all(np.isfinite(features)):
            raise NumericError(f"domain {self.domain_id}: non-finite features")
        if not 0.0 <= self.pi <= 1.0:
            raise RejectedInputError(f"domain {self.domain_id}: pi must lie in [0, 1]")
        if np.issubdtype(labels.dtype, np.integer):
            labels = labels.astype(np.int64)
        else:
            labels = labels.astype(np.float64)
        indices = (
            np.arange(features.shape[0], dtype=np.int64)
            if self.indices is None
            else np.array(self.indices, dtype=np.int64)
        )
        if indices.shape[0] != features.shape[0]:
            raise RejectedInputError(f"domain {self.domain_id}: one index per sample required")
        for arr in (features, labels, indices):
            arr.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "indices", indices)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_classification(self) -> bool:
        return np.issubdtype(self.labels.dtype, np.integer)

    def subset(self, rows: np.ndarray, pi: Optional[float] = None) -> "DomainDataset":
        """Rows selected by position; keeps the parent indices."""
        rows = np.asarray(rows, dtype=np.int64)
        return DomainDataset(
            domain_id=self.domain_id,
            features=self.features[rows],
            labels=self.labels[rows],
            pi=self.pi if pi is None else pi,
            indices=self.indices[rows],
        )


@dataclass(frozen=True)
class SplitPair:
    """Step-1 (expert training) and Step-2 (aggregation) halves, one entry per domain."""
    step1: List[DomainDataset] = field(default_factory=list)
    step2: List[DomainDataset] = field(default_factory=list)


# =============================================================================
# Toy regression
# =============================================================================

def toy_target(x) -> np.ndarray:
    """Noiseless f(x) = sgn(x) * (3|cos x| + x^2/2 + 3); f(0) = 0."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * (3.0 * np.abs(np.cos(x)) + 0.5 * x * x + 3.0)


def _toy_draw(n: int, noise_sd: float, x_range: Tuple[float, float], rng: np.random.Generator) -> DomainDataset:
    x = rng.uniform(x_range[0], x_range[1], size=n)
    y = toy_target(x) + rng.normal(0.0, noise_sd, size=n) if noise_sd > 0 else toy_target(x)
    return DomainDataset(domain_id=0, features=x[:, None], labels=y.astype(np.float64), pi=1.0)


def gen_toy_regression(
    n_train: int,
    n_test: int,
    noise_sd: float = DEFAULT_NOISE_SD,
    x_range: Sequence[float] = DEFAULT_X_RANGE,
    seed: int = 0,
) -> Tuple[DomainDataset, DomainDataset]:
    """Train and test sets with x ~ U(x_range) and y = f(x) + N(0, noise_sd^2)."""
    lo, hi = float(x_range[0]), float(x_range[1])
    if not lo < hi:
        raise RejectedInputError(f"degenerate x_range ({lo}, {hi})")
    if n_train < 1 or n_test < 1:
        raise RejectedInputError("n_train and n_test must be >= 1")
    if noise_sd < 0:
        raise RejectedInputError("noise_sd must be >= 0")
    train = _toy_draw(n_train, noise_sd, (lo, hi), make_rng(child_seed(seed, "toy-train")))
    test = _toy_draw(n_test, noise_sd, (lo, hi), make_rng(child_seed(seed, "toy-test")))
    return train, test


def partition_by_sign(dataset: DomainDataset) -> List[DomainDataset]:
    """Split a 1-D dataset into x < 0 (domain 0) and x >= 0 (domain 1)."""
    x = dataset.features[:, 0]
    groups = [np.flatnonzero(x < 0), np.flatnonzero(x >= 0)]
    if any(g.size == 0 for g in groups):
        raise RejectedInputError("both sign groups must be nonempty")
    n = dataset.n_samples
    return [
        DomainDataset(
            domain_id=k,
            features=dataset.features[g],
            labels=dataset.labels[g],
            pi=g.size / n,
            indices=dataset.indices[g],
        )
        for k, g in enumerate(groups)
    ]


# =============================================================================
# Multi-domain classification suite
# =============================================================================

@dataclass(frozen=True)
class SuiteGeometry:
    """
    Latent class prototypes plus one orthogonal map and shift per domain.

    A domain-i sample is features = rotation_i @ z + shift_i with z drawn near
    a prototype. Labels are the nearest prototype of z, so the labeling rule
    is shared by every domain.
    """
    prototypes: np.ndarray
    rotations: Tuple[np.ndarray, ...]
    shifts: Tuple[np.ndarray, ...]

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]

    @property
    def n_domains(self) -> int:
        return len(self.rotations)

    def to_features(self, domain_id: int, latent: np.ndarray) -> np.ndarray:
        return latent @ self.rotations[domain_id].T + self.shifts[domain_id]

    def to_latent(self, domain_id: int, features: np.ndarray) -> np.ndarray:
        """Inverse map; rotations are orthogonal."""
        return (np.asarray(features) - self.shifts[domain_id]) @ self.rotations[domain_id]

    def nearest_prototype(self, latent: np.ndarray) -> np.ndarray:
        d2 = np.sum((latent[:, None, :] - self.prototypes[None, :, :]) ** 2, axis=2)
        return np.argmin(d2, axis=1)

    def class_means(self, domain_id: int) -> np.ndarray:
        """Where each prototype lands in domain-i feature space."""
        return self.to_features(domain_id, self.prototypes)

    def sample_domain(
        self,
        domain_id: int,
        n_samples: int,
        rng: np.random.Generator,
        label_noise: float = 0.0,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Class-balanced draw (counts within 1 of n/C), rows shuffled."""
        C = self.n_classes
        counts = np.full(C, n_samples // C)
        counts[rng.permutation(C)[: n_samples % C]] += 1

        latents, labels = [], []
        for c in range(C):
            kept = np.empty((0, self.feature_dim))
            for _ in range(_MAX_DRAW_ROUNDS):
                if kept.shape[0] >= counts[c]:
                    break
                need = counts[c] - kept.shape[0]
                draw = self.prototypes[c] + LATENT_SD * rng.normal(size=(2 * need + 4, self.feature_dim))
                kept = np.vstack([kept, draw[self.nearest_prototype(draw) == c]])
            else:
                if kept.shape[0] < counts[c]:
                    raise NumericError(f"class {c} rejection sampling did not converge")
            latents.append(kept[: counts[c]])
            labels.append(np.full(counts[c], c, dtype=np.int64))

        latent = np.vstack(latents)
        y = np.concatenate(labels)
        order = rng.permutation(n_samples)
        latent, y = latent[order], y[order]
        if label_noise > 0:
            flip = rng.random(n_samples) < label_noise
            y = np.where(flip, rng.integers(0, C, size=n_samples), y)
        return self.to_features(domain_id, latent), y


def _skew_symmetric(dim: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.normal(size=(dim, dim)) / np.sqrt(dim)
    return (a - a.T) / np.sqrt(2.0)


def suite_geometry(
    n_domains: int,
    n_classes: int,
    feature_dim: int,
    domain_shift_strength: float,
    seed: int,
    class_separation: float = DEFAULT_CLASS_SEPARATION,
) -> SuiteGeometry:
    """Seeded prototypes and per-domain maps expm(s*K_i), shift s*N(0, I)."""
    if n_domains < 1 or n_classes < 2 or feature_dim < 2:
        raise RejectedInputError("need n_domains >= 1, n_classes >= 2, feature_dim >= 2")
    if domain_shift_strength < 0:
        raise RejectedInputError("domain_shift_strength must be >= 0")
    rng = make_rng(child_seed(seed, "suite-geometry"))
    prototypes = class_separation * rng.normal(size=(n_classes, feature_dim))
    rotations, shifts = [], []
    for _ in range(n_domains):
        K = _skew_symmetric(feature_dim, rng)
        shift = rng.normal(size=feature_dim)
        rotations.append(expm(domain_shift_strength * K))
        shifts.append(domain_shift_strength * shift)
    return SuiteGeometry(prototypes, tuple(rotations), tuple(shifts))


def gen_domain_suite(
    n_domains: int,
    n_classes: int,
    feature_dim: int,
    samples_per_domain: Sequence[int],
    domain_shift_strength: float = 1.0,
    seed: int = 0,
    class_separation: float = DEFAULT_CLASS_SEPARATION,
) -> List[DomainDataset]:
    """One DomainDataset per domain, pi proportional to sample counts."""
    if n_domains < 2:
        raise RejectedInputError("a suite needs at least 2 domains")
    sizes = list(samples_per_domain)
    if len(sizes) == 1:
        sizes = sizes * n_domains
    if len(sizes) != n_domains:
        raise RejectedInputError("samples_per_domain must have 1 or n_domains entries")
    if any(s < n_classes for s in sizes):
        raise RejectedInputError("every domain needs at least n_classes samples")

    geometry = suite_geometry(n_domains, n_classes, feature_dim, domain_shift_strength, seed, class_separation)
    total = float(sum(sizes))
    suite = []
    for i, size in enumerate(sizes):
        X, y = geometry.sample_domain(i, size, make_rng(child_seed(seed, "suite-samples", i)))
        suite.append(DomainDataset(domain_id=i, features=X, labels=y, pi=size / total))
    logger.debug("generated suite: %d domains, sizes %s", n_domains, sizes)
    return suite


def concat_domains(datasets: Sequence[DomainDataset], domain_id: int = -1) -> DomainDataset:
    """Pool several domains into one dataset (the ERM view of the sources)."""
    if not datasets:
        raise RejectedInputError("nothing to pool")
    return DomainDataset(
        domain_id=domain_id,
        features=np.vstack([d.features for d in datasets]),
        labels=np.concatenate([d.labels for d in datasets]),
        pi=1.0,
    )


def renormalize_pi(datasets: Sequence[DomainDataset]) -> List[DomainDataset]:
    """Recompute pi from sample counts (e.g. after dropping the held-out domain)."""
    total = float(sum(d.n_samples for d in datasets))
    return [
        DomainDataset(d.domain_id, d.features, d.labels, d.n_samples / total, d.indices)
        for d in datasets
    ]


# =============================================================================
# Splits and subsampling
# =============================================================================

def split_step_data(suite: Sequence[DomainDataset], step2_fraction: float = 0.5, seed: int = 0) -> SplitPair:
    """Per-domain random partition into disjoint Step-1 and Step-2 halves."""
    if not 0.0 < step2_fraction < 1.0:
        raise RejectedInputError("step2_fraction must lie in (0, 1)")
    step1, step2 = [], []
    for dataset in suite:
        n = dataset.n_samples
        n2 = int(round(n * step2_fraction))
        n1 = n - n2
        if n1 < 1 or n2 < 1:
            raise RejectedInputError(
                f"domain {dataset.domain_id} with {n} samples cannot feed both halves"
            )
        perm = make_rng(child_seed(seed, "split", dataset.domain_id)).permutation(n)
        step1.append(dataset.subset(np.sort(perm[:n1])))
        step2.append(dataset.subset(np.sort(perm[n1:])))
    return SplitPair(step1=step1, step2=step2)


def few_shot_subsample(dataset: DomainDataset, k: int, seed: int = 0) -> DomainDataset:
    """Keep at most k random samples of every class; k = 0 keeps everything."""
    if k < 0:
        raise RejectedInputError("k must be >= 0")
    if k == 0:
        return dataset
    if not dataset.is_classification:
        raise RejectedInputError("few-shot subsampling needs class labels")
    rng = make_rng(child_seed(seed, "few-shot", dataset.domain_id))
    keep = []
    for c in np.unique(dataset.labels):
        rows = np.flatnonzero(dataset.labels == c)
        keep.append(rows if rows.size <= k else rng.choice(rows, size=k, replace=False))
    return dataset.subset(np.sort(np.concatenate(keep)))
