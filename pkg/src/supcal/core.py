"""Domain types and the probability / log-odds maps shared by every module.

Distributions are plain float64 numpy arrays of length ``n``; log-odds
vectors are float64 arrays of length ``n - 1`` holding ``log(p_c / p_0)``
for ``c = 1 .. n-1``. Class 0 is always the reference class.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np

EPS_PROB = 1e-12
LOG_EPS_PROB = float(np.log(EPS_PROB))


class DimensionError(ValueError):
    """Raised when a logit vector and a parameter set disagree in size."""


@dataclass(frozen=True)
class LabelSpace:
    """Ordered label set; ``verbalizers[c]`` is the surface string of class ``c``."""

    verbalizers: tuple[str, ...]

    def __post_init__(self):
        verbalizers = tuple(self.verbalizers)
        object.__setattr__(self, "verbalizers", verbalizers)
        if len(verbalizers) < 2:
            raise ValueError("a label space needs at least two classes")
        if any(not v for v in verbalizers):
            raise ValueError("verbalizers must be nonempty")
        if len(set(verbalizers)) != len(verbalizers):
            raise ValueError(f"duplicate verbalizers in {verbalizers}")

    @property
    def n(self) -> int:
        return len(self.verbalizers)

    @property
    def labels(self) -> list[tuple[int, str]]:
        return list(enumerate(self.verbalizers))

    def index(self, verbalizer: str) -> int:
        try:
            return self.verbalizers.index(verbalizer)
        except ValueError:
            raise KeyError(verbalizer) from None

    def __len__(self) -> int:
        return self.n


@dataclass(frozen=True)
class Exemplar:
    id: Hashable
    text: str
    label: int


@dataclass(frozen=True)
class Context:
    """Ordered sequence of distinct exemplars; order matters."""

    exemplars: tuple[Exemplar, ...] = ()

    def __post_init__(self):
        exemplars = tuple(self.exemplars)
        object.__setattr__(self, "exemplars", exemplars)
        ids = [e.id for e in exemplars]
        if len(set(ids)) != len(ids):
            raise ValueError(f"context members must be distinct, got ids {ids}")

    @property
    def size(self) -> int:
        return len(self.exemplars)

    @property
    def ids(self) -> tuple:
        return tuple(e.id for e in self.exemplars)

    def __len__(self) -> int:
        return len(self.exemplars)

    def __iter__(self):
        return iter(self.exemplars)


@dataclass(frozen=True, eq=False)
class CalibrationParams:
    """Per-class affine map ``z_c = scale[c-1] * m_c + bias[c-1]``.

    The flat parameter layout used by the objective and solver is
    ``[b_1, ..., b_{n-1}, w_1, ..., w_{n-1}]``.
    """

    bias: np.ndarray
    scale: np.ndarray
    context_size: int = 1

    def __post_init__(self):
        bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        scale = np.array(self.scale, dtype=np.float64).reshape(-1)
        if bias.shape != scale.shape or bias.size == 0:
            raise DimensionError(
                f"bias and scale must be equal nonempty vectors, got {bias.shape} and {scale.shape}"
            )
        if not (np.all(np.isfinite(bias)) and np.all(np.isfinite(scale))):
            raise ValueError("calibration parameters must be finite")
        if self.context_size < 1:
            raise ValueError("context_size must be >= 1")
        bias.flags.writeable = False
        scale.flags.writeable = False
        object.__setattr__(self, "bias", bias)
        object.__setattr__(self, "scale", scale)

    @classmethod
    def identity(cls, n_classes: int, context_size: int = 1) -> "CalibrationParams":
        return cls(np.zeros(n_classes - 1), np.ones(n_classes - 1), context_size)

    @classmethod
    def from_vector(cls, theta: Sequence[float], context_size: int = 1) -> "CalibrationParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.ndim != 1 or theta.size % 2:
            raise DimensionError(f"flat parameter vector must have even length, got {theta.shape}")
        half = theta.size // 2
        return cls(theta[:half], theta[half:], context_size)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.bias, self.scale])

    @property
    def n_classes(self) -> int:
        return self.bias.size + 1

    def __eq__(self, other):
        if not isinstance(other, CalibrationParams):
            return NotImplemented
        return (
            self.context_size == other.context_size
            and np.array_equal(self.bias, other.bias)
            and np.array_equal(self.scale, other.scale)
        )

    def __hash__(self):
        return hash((self.context_size, self.bias.tobytes(), self.scale.tobytes()))


def as_prob_dist(p: Iterable[float], atol: float = 1e-9) -> np.ndarray:
    """Validate and return ``p`` as a float64 probability vector."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ValueError(f"a distribution needs at least two entries, got shape {p.shape}")
    if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
        raise ValueError(f"probabilities must lie in [0, 1]: {p}")
    if abs(p.sum() - 1.0) > atol:
        raise ValueError(f"probabilities must sum to 1, got {p.sum()!r}")
    return p


def logits_from_probs(p) -> np.ndarray:
    """Log-odds of classes ``1..n-1`` against class 0, with probabilities floored at 1e-12."""
    p = np.maximum(np.asarray(p, dtype=np.float64), EPS_PROB)
    return np.log(p[..., 1:]) - np.log(p[..., :1])


def probs_from_logits(m) -> np.ndarray:
    """Inverse of :func:`logits_from_probs`; works on ``(..., n-1)`` arrays."""
    m = np.asarray(m, dtype=np.float64)
    z = np.concatenate([np.zeros(m.shape[:-1] + (1,)), m], axis=-1)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_probs_from_logits(m) -> np.ndarray:
    """Log of :func:`probs_from_logits`, computed without forming the probabilities."""
    m = np.asarray(m, dtype=np.float64)
    z = np.concatenate([np.zeros(m.shape[:-1] + (1,)), m], axis=-1)
    top = z.max(axis=-1, keepdims=True)
    return z - top - np.log(np.exp(z - top).sum(axis=-1, keepdims=True))


def apply_affine(m, theta: CalibrationParams) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-1] != theta.bias.size:
        raise DimensionError(
            f"logit vector has {m.shape[-1]} entries but parameters cover {theta.bias.size} classes"
        )
    return theta.scale * m + theta.bias


def calibrated_dist(m, theta: CalibrationParams) -> np.ndarray:
    """Softmax of the affinely transformed log-odds (reference logit fixed at 0)."""
    return probs_from_logits(apply_affine(m, theta))


def predict_label(p) -> int | np.ndarray:
    """Argmax over the last axis; ``np.argmax`` already breaks ties toward the smallest index."""
    p = np.asarray(p)
    out = np.argmax(p, axis=-1)
    return int(out) if out.ndim == 0 else out
