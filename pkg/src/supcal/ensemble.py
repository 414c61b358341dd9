"""Per-size calibrators and two-level prediction averaging.

Training fits one calibrator per context size ``i`` in ``[i_min, i_max]``.
Prediction scores the query under ``m_i`` sampled sub-contexts of each size,
averages the calibrated distributions within a size, then averages the
per-size means uniformly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .backend import Backend
from .core import Context, Exemplar, LabelSpace, calibrated_dist, logits_from_probs, predict_label
from .objective import ObjectiveConfig
from .solver import FitResult, SolverConfig, fit, read_fit_result, write_fit_result
from .surrogate import ContextBudget, class_coverage, generate_surrogate, n_ordered_subsets, sample_ordered_subsets

log = logging.getLogger(__name__)

MAX_CONTEXT_SAMPLES = 24


class UnsupportedTaskError(ValueError):
    """No context size had surrogate labels covering every class."""


@dataclass(frozen=True)
class EnsembleConfig:
    i_min: int = 1
    i_max: Optional[int] = None  # None: min(5, k - 1)
    m_i: Optional[int] = None  # None: min(len(T_i) // 2, 24)
    seed: int = 0
    per_query_resample: bool = False
    budget: ContextBudget = field(default_factory=ContextBudget)

    def sizes(self, k: int) -> list[int]:
        i_max = min(5, k - 1) if self.i_max is None else self.i_max
        if not 1 <= self.i_min <= i_max < k:
            raise ValueError(f"need 1 <= i_min <= i_max < k, got {self.i_min}, {i_max}, k={k}")
        return list(range(self.i_min, i_max + 1))

    def samples_for(self, n_records: int) -> int:
        m = min(n_records // 2, MAX_CONTEXT_SAMPLES) if self.m_i is None else self.m_i
        return max(1, m)


@dataclass(frozen=True)
class SizeMember:
    context_size: int
    fit: FitResult
    m_i: int
    context_ids: tuple[tuple[int, ...], ...]

    @property
    def params(self):
        return self.fit.params


@dataclass(frozen=True)
class EnsembleModel:
    exemplars: tuple[Exemplar, ...]
    label_space: LabelSpace
    members: tuple[SizeMember, ...]
    skipped: dict = field(default_factory=dict)
    seed: int = 0
    per_query_resample: bool = False

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one trained size")
        sizes = [m.context_size for m in self.members]
        if len(set(sizes)) != len(sizes):
            raise ValueError(f"duplicate context sizes {sizes}")

    @property
    def k(self) -> int:
        return len(self.exemplars)

    @property
    def sizes(self) -> list[int]:
        return [m.context_size for m in self.members]

    def contexts_for(self, member: SizeMember, query: str) -> list[Context]:
        ids = member.context_ids
        if self.per_query_resample:
            ids = sample_ordered_subsets(self.k, member.context_size, member.m_i,
                                         [self.seed, member.context_size, _text_seed(query)])
        return [Context(tuple(self.exemplars[j] for j in cid)) for cid in ids]

    def save(self, directory):
        save_ensemble(self, directory)

    def with_context_samples(self, m_i: int) -> "EnsembleModel":
        """Same calibrators with ``m_i`` prediction contexts per size.

        Context draws are prefix-stable, so sweeping ``m_i`` never retrains.
        """
        members = []
        for m in self.members:
            ids = prediction_contexts(self.k, m.context_size, m_i, self.seed)
            members.append(replace(m, m_i=len(ids), context_ids=ids))
        return replace(self, members=tuple(members))

    def restricted_to(self, sizes) -> "EnsembleModel":
        keep = tuple(m for m in self.members if m.context_size in set(sizes))
        return replace(self, members=keep)


def _text_seed(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=4).digest(), "big")


def prediction_contexts(k: int, i: int, m_i: int, seed: int) -> tuple[tuple[int, ...], ...]:
    """``m_i`` distinct ordered sub-contexts of size ``i``; a smaller ``m_i`` gives a prefix."""
    m_i = min(m_i, n_ordered_subsets(k, i))
    return tuple(sample_ordered_subsets(k, i, m_i, [seed, i]))


def train_ensemble(
    exemplars: Sequence[Exemplar],
    backend: Backend,
    ensemble_cfg: EnsembleConfig = EnsembleConfig(),
    objective_cfg: ObjectiveConfig = ObjectiveConfig(),
    solver_cfg: SolverConfig = SolverConfig(),
) -> EnsembleModel:
    """Fit one calibrator per context size, skipping sizes with incomplete class coverage."""
    exemplars = tuple(exemplars)
    k = len(exemplars)
    if k < 2:
        raise ValueError("need at least two demonstrations")
    n = backend.label_space.n
    members, skipped = [], {}
    for i in ensemble_cfg.sizes(k):
        ds = generate_surrogate(exemplars, i, backend, ensemble_cfg.budget, seed=[ensemble_cfg.seed, i])
        coverage = class_coverage(ds, n)
        if not coverage.complete:
            skipped[i] = f"classes {list(coverage.missing)} absent from surrogate labels"
            log.info("skipping context size %d: %s", i, skipped[i])
            continue
        result = fit(ds, objective_cfg, replace(solver_cfg, seed=solver_cfg.seed + i))
        ids = prediction_contexts(k, i, ensemble_cfg.samples_for(len(ds)), ensemble_cfg.seed)
        members.append(SizeMember(i, result, len(ids), ids))
    if not members:
        raise UnsupportedTaskError(
            f"every context size was skipped for k={k}, n={n}: {skipped}"
        )
    return EnsembleModel(exemplars, backend.label_space, tuple(members), skipped,
                         ensemble_cfg.seed, ensemble_cfg.per_query_resample)


def predict_by_size(model: EnsembleModel, query: str, backend: Backend) -> list[np.ndarray]:
    """Intra-size means, one per trained size, in size order."""
    out = []
    for member in model.members:
        contexts = model.contexts_for(member, query)
        probs = backend.infer_many([(query, c) for c in contexts])
        dists = calibrated_dist(logits_from_probs(np.array(probs)), member.params)
        out.append(dists.mean(axis=0))
    return out


def predict(model: EnsembleModel, query: str, backend: Backend) -> np.ndarray:
    """Uniform mean over sizes of the intra-size mean calibrated distribution."""
    return np.mean(predict_by_size(model, query, backend), axis=0)


def predict_label_sc(model: EnsembleModel, query: str, backend: Backend) -> int:
    return predict_label(predict(model, query, backend))


def save_ensemble(model: EnsembleModel, directory):
    """Directory with ``manifest.json`` and one ``params_i<size>.txt`` per trained size."""
    os.makedirs(directory, exist_ok=True)
    for m in model.members:
        write_fit_result(m.fit, os.path.join(directory, f"params_i{m.context_size}.txt"))
    manifest = {
        "k": model.k,
        "labels": list(model.label_space.verbalizers),
        "exemplars": [{"id": e.id, "text": e.text, "label": e.label} for e in model.exemplars],
        "sizes": [
            {"i": m.context_size, "m_i": m.m_i, "contexts": [list(c) for c in m.context_ids]}
            for m in model.members
        ],
        "seed": model.seed,
        "per_query_resample": model.per_query_resample,
        "skipped": {str(i): reason for i, reason in model.skipped.items()},
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_ensemble(directory) -> EnsembleModel:
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    exemplars = tuple(Exemplar(e["id"], e["text"], e["label"]) for e in manifest["exemplars"])
    members = []
    for entry in manifest["sizes"]:
        i = entry["i"]
        result = read_fit_result(os.path.join(directory, f"params_i{i}.txt"))
        members.append(SizeMember(i, result, entry["m_i"], tuple(tuple(c) for c in entry["contexts"])))
    return EnsembleModel(
        exemplars, LabelSpace(tuple(manifest["labels"])), tuple(members),
        {int(i): r for i, r in manifest["skipped"].items()},
        manifest["seed"], manifest["per_query_resample"],
    )
