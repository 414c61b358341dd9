"""Training objective for one context size.

``value = NLL + lambda_inv * InvPenalty``, with an exact gradient over the
flat parameter vector ``[b_1..b_{n-1}, w_1..w_{n-1}]``. The directional
trust-region value is computed here too, but it is a constraint and is never
added into ``value``.

Logs of probabilities are floored at ``log(1e-12)``; the gradient is that of
the floored function (zero through a floored entry).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Optional

import numpy as np

from .core import LOG_EPS_PROB, EPS_PROB, CalibrationParams, DimensionError
from .surrogate import SurrogateDataset

MAX_CONTEXTS_FOR_ALL_PAIRS = 40
MAX_PAIRS_PER_QUERY = 780


@dataclass(frozen=True)
class ObjectiveConfig:
    """``tau=None`` lets the solver pick the trust threshold from in-sample accuracy."""

    lambda_inv: float = 10.0
    tau: Optional[float] = None
    eps_norm: float = 1e-10
    pair_seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.lambda_inv) or self.lambda_inv < 0:
            raise ValueError("lambda_inv must be finite and >= 0")
        if self.tau is not None and not -1.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [-1, 1]")
        if self.eps_norm <= 0:
            raise ValueError("eps_norm must be positive")


def _flat(theta, n_classes: int, ds: SurrogateDataset | None = None) -> np.ndarray:
    if isinstance(theta, CalibrationParams):
        if ds is not None and theta.context_size != ds.context_size:
            raise ValueError(
                f"parameters are for context size {theta.context_size}, data for {ds.context_size}"
            )
        theta = theta.to_vector()
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (2 * (n_classes - 1),):
        raise DimensionError(f"expected {2 * (n_classes - 1)} parameters, got shape {theta.shape}")
    return theta


def invariance_pairs(ds: SurrogateDataset, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Record-index pairs ``(a, b)`` scoring the same query under two different contexts.

    Queries with more than 40 contexts contribute a uniform sample of 780 pairs.
    """
    by_query: dict[int, list[int]] = {}
    for r, q in enumerate(ds.query_ids.tolist()):
        by_query.setdefault(q, []).append(r)
    rng = np.random.default_rng(seed)
    left, right = [], []
    for q in sorted(by_query):
        rows = by_query[q]
        if len(rows) <= MAX_CONTEXTS_FOR_ALL_PAIRS:
            for a, b in combinations(rows, 2):
                left.append(a)
                right.append(b)
            continue
        ia, ib = np.triu_indices(len(rows), 1)
        pick = np.sort(rng.choice(ia.size, MAX_PAIRS_PER_QUERY, replace=False))
        rows_arr = np.asarray(rows)
        left.extend(rows_arr[ia[pick]].tolist())
        right.extend(rows_arr[ib[pick]].tolist())
    return np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64)


def _log_softmax_ref(z: np.ndarray) -> np.ndarray:
    full = np.concatenate([np.zeros((z.shape[0], 1)), z], axis=1)
    top = full.max(axis=1, keepdims=True)
    return full - top - np.log(np.exp(full - top).sum(axis=1, keepdims=True))


class CalibrationObjective:
    """Precomputed objective over one surrogate dataset.

    Building the invariance pairs is the only expensive setup step, so the
    solver constructs this once and calls :meth:`value_and_grad` repeatedly.
    """

    def __init__(self, ds: SurrogateDataset, cfg: ObjectiveConfig = ObjectiveConfig()):
        if len(ds) == 0:
            raise ValueError("empty surrogate dataset")
        self.ds = ds
        self.cfg = cfg
        self.n = ds.n_classes
        self.M = ds.logits
        self.y = ds.labels
        self.onehot = np.zeros((len(ds), self.n))
        self.onehot[np.arange(len(ds)), self.y] = 1.0
        self.pa, self.pb = invariance_pairs(ds, cfg.pair_seed)

    @property
    def n_params(self) -> int:
        return 2 * (self.n - 1)

    def _forward(self, theta):
        d = self.n - 1
        b, w = theta[:d], theta[d:]
        logp = _log_softmax_ref(self.M * w + b)
        active = logp > LOG_EPS_PROB
        return np.exp(logp), np.where(active, logp, LOG_EPS_PROB), active

    def _chain(self, g_z: np.ndarray) -> np.ndarray:
        # g_z: (N, n) gradient w.r.t. full logits; column 0 is the fixed reference
        g = g_z[:, 1:]
        return np.concatenate([g.sum(axis=0), (g * self.M).sum(axis=0)])

    def _nll(self, P, L, A, grad: bool):
        rows = np.arange(len(self.y))
        value = -L[rows, self.y].sum()
        if not grad:
            return value, None
        g_z = A[rows, self.y][:, None] * (P - self.onehot)
        return value, g_z

    def _inv(self, P, L, A, grad: bool):
        if self.pa.size == 0:
            return 0.0, (np.zeros_like(P) if grad else None)
        Pa, Pb, La, Lb = P[self.pa], P[self.pb], L[self.pa], L[self.pb]
        value = -(Pa * Lb + Pb * La).sum()
        if not grad:
            return value, None
        Aa, Ab = A[self.pa], A[self.pb]

        def side(Px, Lother, Pother, Ax):
            t1 = -Px * (Lother - (Px * Lother).sum(axis=1, keepdims=True))
            u = Pother * Ax
            t2 = -(u - Px * u.sum(axis=1, keepdims=True))
            return t1 + t2

        g_z = np.zeros_like(P)
        np.add.at(g_z, self.pa, side(Pa, Lb, Pb, Aa))
        np.add.at(g_z, self.pb, side(Pb, La, Pa, Ab))
        return value, g_z

    def nll(self, theta) -> float:
        P, L, A = self._forward(_flat(theta, self.n, self.ds))
        return float(self._nll(P, L, A, False)[0])

    def inv_penalty(self, theta) -> float:
        P, L, A = self._forward(_flat(theta, self.n, self.ds))
        return float(self._inv(P, L, A, False)[0])

    def value(self, theta) -> float:
        return self.value_and_grad(theta, grad=False)[0]

    def value_and_grad(self, theta, grad: bool = True):
        theta = _flat(theta, self.n, self.ds)
        P, L, A = self._forward(theta)
        v_nll, g_nll = self._nll(P, L, A, grad)
        lam = self.cfg.lambda_inv
        if lam == 0.0:
            v_inv, g_inv = 0.0, None
        else:
            v_inv, g_inv = self._inv(P, L, A, grad)
        value = float(v_nll + lam * v_inv)
        if not grad:
            return value, None
        g_z = g_nll if g_inv is None else g_nll + lam * g_inv
        return value, self._chain(g_z)


def nll(theta, ds: SurrogateDataset) -> float:
    """Negative log-likelihood of the record labels under the calibrated distribution."""
    return CalibrationObjective(ds, ObjectiveConfig(lambda_inv=0.0)).nll(theta)


def sym_xent(p, q) -> float:
    """``-sum_c (p_c log q_c + q_c log p_c)`` with logs floored at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(-(p * np.log(np.maximum(q, EPS_PROB)) + q * np.log(np.maximum(p, EPS_PROB))).sum())


def inv_penalty(theta, ds: SurrogateDataset, seed: int = 0) -> float:
    """Symmetric cross-entropy summed over every pair of contexts sharing a query."""
    return CalibrationObjective(ds, ObjectiveConfig(pair_seed=seed)).inv_penalty(theta)


def trust_region_value(theta, eps_norm: float = 1e-10) -> float:
    """Mean cosine between each ``(b_c, w_c)`` and the identity direction ``(0, 1)``."""
    return trust_region_value_and_grad(theta, eps_norm)[0]


def trust_region_value_and_grad(theta, eps_norm: float = 1e-10) -> tuple[float, np.ndarray]:
    if isinstance(theta, CalibrationParams):
        theta = theta.to_vector()
    theta = np.asarray(theta, dtype=np.float64)
    d = theta.size // 2
    b, w = theta[:d], theta[d:]
    r = np.hypot(b, w)
    big = r > eps_norm
    denom = np.where(big, r, eps_norm)
    value = float(np.mean(w / denom))
    r3 = np.where(big, r, 1.0) ** 3
    g_b = np.where(big, -w * b / r3, 0.0)
    g_w = np.where(big, b * b / r3, 1.0 / eps_norm)
    return value, np.concatenate([g_b, g_w]) / d


def total_objective(theta, ds: SurrogateDataset, cfg: ObjectiveConfig = ObjectiveConfig()):
    """``(value, gradient)`` of ``nll + lambda_inv * inv_penalty``."""
    return CalibrationObjective(ds, cfg).value_and_grad(theta)
