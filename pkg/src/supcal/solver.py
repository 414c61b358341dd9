"""Constrained fit of the affine calibration map for one context size.

The directional trust-region constraint ``cos >= tau`` is handled with a
quadratic exterior penalty ``mu * max(0, tau - cos)^2``; each inner problem is
solved with L-BFGS-B and ``mu`` grows until the constraint holds. A final
bisection toward the identity (which is always feasible) repairs any residual
violation, and the identity itself is returned whenever no restart beats it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .core import CalibrationParams, predict_label, probs_from_logits
from .objective import CalibrationObjective, ObjectiveConfig, trust_region_value_and_grad
from .surrogate import SurrogateDataset, class_coverage


class CoverageError(ValueError):
    """The surrogate labels do not cover every class."""


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 500
    grad_tol: float = 1e-6
    constraint_tol: float = 1e-6
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    max_outer_rounds: int = 6
    restarts: int = 3
    seed: int = 0
    bias_only: bool = False

    def __post_init__(self):
        for name in ("max_iters", "grad_tol", "constraint_tol", "penalty_init", "max_outer_rounds", "restarts"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.penalty_growth <= 1:
            raise ValueError("penalty_growth must exceed 1")


@dataclass(frozen=True)
class FitResult:
    params: CalibrationParams
    objective_value: float
    constraint_value: float
    feasible: bool
    iterations: int
    in_sample_accuracy: float
    tau: float
    lambda_inv: float = field(default=10.0)

    def save(self, path):
        write_fit_result(self, path)


def tau_from_accuracy(acc: float, n_labels: int) -> float:
    """Trust threshold ``cos(alpha degrees)`` from the base model's in-sample accuracy.

    ``alpha`` is ``20**(1/(K-1))``, ``45**(1/(K-1))`` or ``90**(1/(K-1))`` for
    accuracy in ``[0.9, 1]``, ``[0.7, 0.9)`` and ``[0.5, 0.7)``, and 180 below
    0.5, where ``K`` is the number of labels.
    """
    if n_labels < 2:
        raise ValueError("need at least two labels")
    power = 1.0 / (n_labels - 1)
    if acc >= 0.9:
        alpha = 20.0 ** power
    elif acc >= 0.7:
        alpha = 45.0 ** power
    elif acc >= 0.5:
        alpha = 90.0 ** power
    else:
        alpha = 180.0
    return math.cos(math.radians(alpha))


def in_sample_accuracy(ds: SurrogateDataset) -> float:
    """Accuracy of the uncalibrated model on the surrogate records."""
    if len(ds) == 0:
        raise ValueError("in-sample accuracy of an empty dataset is undefined")
    pred = predict_label(probs_from_logits(ds.logits))
    return float(np.mean(pred == ds.labels))


def _minimize(fun, x0, scfg: SolverConfig):
    res = minimize(
        fun, x0, jac=True, method="L-BFGS-B",
        options={"maxiter": scfg.max_iters, "gtol": scfg.grad_tol, "ftol": 1e-15},
    )
    return np.asarray(res.x, dtype=np.float64), int(res.nit)


def _repair(theta: np.ndarray, identity: np.ndarray, tau: float, eps_norm: float) -> np.ndarray:
    """Move along the segment toward the identity until the constraint holds."""
    def ok(t):
        return trust_region_value_and_grad(theta + t * (identity - theta), eps_norm)[0] >= tau

    if ok(0.0):
        return theta
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return theta + hi * (identity - theta)


def _starting_points(identity: np.ndarray, tau: float, scfg: SolverConfig, eps_norm: float, warm=None):
    rng = np.random.default_rng(scfg.seed)
    d = identity.size // 2
    yield identity.copy()
    extra = scfg.restarts - 1
    if warm is not None and extra > 0:
        yield _repair(warm, identity, tau, eps_norm)
        extra -= 1
    for _ in range(extra):
        x = identity + rng.normal(0.0, 0.1, identity.size)
        for _ in range(60):
            if trust_region_value_and_grad(x, eps_norm)[0] >= tau:
                break
            x[:d] *= 0.5
        else:
            x = identity.copy()
        yield x


def fit(
    ds: SurrogateDataset,
    cfg: ObjectiveConfig = ObjectiveConfig(),
    scfg: SolverConfig = SolverConfig(),
) -> FitResult:
    """Minimise ``nll + lambda_inv * inv_penalty`` subject to the trust-region constraint.

    The returned parameters are feasible and never score worse than the
    identity map. With ``scfg.bias_only`` the scales are pinned at 1, only the
    biases are learned and the constraint is dropped (``tau`` reported as -1).
    """
    if len(ds) == 0:
        raise ValueError("cannot fit on an empty surrogate dataset")
    coverage = class_coverage(ds)
    if not coverage.complete:
        raise CoverageError(f"classes {list(coverage.missing)} never appear in the surrogate labels")

    n = ds.n_classes
    d = n - 1
    acc = in_sample_accuracy(ds)
    tau = cfg.tau if cfg.tau is not None else tau_from_accuracy(acc, n)
    obj = CalibrationObjective(ds, cfg)
    identity = CalibrationParams.identity(n, ds.context_size).to_vector()
    f_identity = obj.value(identity)

    if scfg.bias_only:
        tau = -1.0

        def fun_b(b):
            v, g = obj.value_and_grad(np.concatenate([b, np.ones(d)]))
            return v, g[:d]

        candidates = []
        for start in _starting_points(identity, -1.0, scfg, cfg.eps_norm):
            b, nit = _minimize(fun_b, start[:d], scfg)
            theta = np.concatenate([b, np.ones(d)])
            candidates.append((obj.value(theta), theta, nit))
    else:
        # NLL alone is convex; its minimiser seeds a restart outside the identity's basin
        nll_only = CalibrationObjective(ds, ObjectiveConfig(lambda_inv=0.0, eps_norm=cfg.eps_norm))
        warm, _ = _minimize(nll_only.value_and_grad, identity, scfg)
        candidates = []
        for start in _starting_points(identity, tau, scfg, cfg.eps_norm, warm):
            theta, total_nit = start, 0
            mu = scfg.penalty_init
            for _ in range(scfg.max_outer_rounds):
                def fun(x, mu=mu):
                    v, g = obj.value_and_grad(x)
                    c, gc = trust_region_value_and_grad(x, cfg.eps_norm)
                    gap = tau - c
                    if gap > 0:
                        v += mu * gap * gap
                        g = g - 2.0 * mu * gap * gc
                    return v, g

                theta, nit = _minimize(fun, theta, scfg)
                total_nit += nit
                if trust_region_value_and_grad(theta, cfg.eps_norm)[0] >= tau - scfg.constraint_tol:
                    break
                mu *= scfg.penalty_growth
            theta = _repair(theta, identity, tau, cfg.eps_norm)
            candidates.append((obj.value(theta), theta, total_nit))

    finite = [c for c in candidates if np.isfinite(c[0]) and np.all(np.isfinite(c[1]))]
    if not finite and not np.isfinite(f_identity):
        raise NumericalError("objective is not finite at any starting point")
    iterations = sum(c[2] for c in candidates)
    best_value, best_theta = f_identity, identity
    for value, theta, _ in finite:
        if value < best_value:
            best_value, best_theta = value, theta

    constraint = trust_region_value_and_grad(best_theta, cfg.eps_norm)[0]
    return FitResult(
        params=CalibrationParams.from_vector(best_theta, ds.context_size),
        objective_value=float(best_value),
        constraint_value=float(constraint),
        feasible=bool(constraint >= tau - scfg.constraint_tol),
        iterations=iterations,
        in_sample_accuracy=acc,
        tau=float(tau),
        lambda_inv=float(cfg.lambda_inv),
    )


def write_fit_result(result: FitResult, path):
    """Plain-text parameter file: ``key value`` header lines, then ``c b_c w_c`` rows."""
    p = result.params
    lines = [
        f"context_size {p.context_size}",
        f"tau {result.tau!r}",
        f"lambda_inv {result.lambda_inv!r}",
        f"objective {result.objective_value!r}",
        f"accuracy {result.in_sample_accuracy!r}",
        f"constraint {result.constraint_value!r}",
        f"feasible {int(result.feasible)}",
        f"iterations {result.iterations}",
        "# class bias scale",
    ]
    lines += [f"{c} {b!r} {w!r}" for c, (b, w) in enumerate(zip(p.bias.tolist(), p.scale.tolist()), start=1)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_fit_result(path) -> FitResult:
    header, rows = {}, []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0].isdigit() and len(parts) == 3:
                rows.append((int(parts[0]), float(parts[1]), float(parts[2])))
            elif len(parts) == 2:
                header[parts[0]] = parts[1]
            else:
                raise ValueError(f"{path}:{lineno}: cannot parse {line!r}")
    rows.sort()
    if [c for c, _, _ in rows] != list(range(1, len(rows) + 1)):
        raise ValueError(f"{path}: class rows must be 1..n-1")
    params = CalibrationParams([b for _, b, _ in rows], [w for _, _, w in rows], int(header["context_size"]))
    return FitResult(
        params=params,
        objective_value=float(header["objective"]),
        constraint_value=float(header["constraint"]),
        feasible=bool(int(header["feasible"])),
        iterations=int(header["iterations"]),
        in_sample_accuracy=float(header["accuracy"]),
        tau=float(header["tau"]),
        lambda_inv=float(header["lambda_inv"]),
    )
