"""Leave-subset-out surrogate training data.

For a demonstration set of ``k`` exemplars and a context size ``i < k``,
every ordered ``i``-subset of the exemplars is used as a prompt context and
each exemplar left out of it is scored as a query. The resulting
``(log-odds, true label)`` pairs form the calibration training set for size
``i``. Contexts and queries are identified by their positions in the
demonstration set.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import permutations
from typing import Iterator, Sequence

import numpy as np

from .backend import Backend, BackendError
from .core import Context, Exemplar, logits_from_probs

# Below this many ordered subsets, sampling draws a permutation of ranks instead of rejecting.
_RANKED_SAMPLING_LIMIT = 200_000


class SurrogateGenerationError(BackendError):
    """A backend failure, tagged with the (context, query) pair being scored."""


@dataclass(frozen=True)
class ContextBudget:
    """Cap on the number of ordered contexts scored per size."""

    max_contexts: int = 360

    def __post_init__(self):
        if self.max_contexts < 1:
            raise ValueError("max_contexts must be >= 1")


def n_ordered_subsets(k: int, i: int) -> int:
    """``k! / (k - i)!``"""
    return math.perm(k, i)


def unrank_ordered_subset(rank: int, k: int, i: int) -> tuple[int, ...]:
    """The ``rank``-th ordered ``i``-subset of ``range(k)`` in lexicographic order."""
    available = list(range(k))
    out = []
    for j in range(i):
        block = math.perm(k - j - 1, i - j - 1)
        pos, rank = divmod(rank, block)
        out.append(available.pop(pos))
    return tuple(out)


def iter_sampled_subsets(k: int, i: int, rng: np.random.Generator) -> Iterator[tuple[int, ...]]:
    """Uniform sampling without replacement of ordered ``i``-subsets of ``range(k)``.

    The sequence for a given generator state does not depend on how many
    items the caller consumes, so any shorter draw is a prefix of a longer one.
    """
    total = n_ordered_subsets(k, i)
    if total <= _RANKED_SAMPLING_LIMIT:
        for rank in rng.permutation(total):
            yield unrank_ordered_subset(int(rank), k, i)
        return
    seen = set()
    while len(seen) < total:
        cand = tuple(int(v) for v in rng.permutation(k)[:i])
        if cand not in seen:
            seen.add(cand)
            yield cand


def sample_ordered_subsets(k: int, i: int, count: int, seed) -> list[tuple[int, ...]]:
    count = min(count, n_ordered_subsets(k, i))
    it = iter_sampled_subsets(k, i, np.random.default_rng(seed))
    return [next(it) for _ in range(count)]


def enumerate_context_ids(k: int, i: int, budget: ContextBudget = ContextBudget(), seed=0) -> list[tuple[int, ...]]:
    """All ordered ``i``-subsets of ``range(k)`` if they fit the budget, else a uniform sample.

    Either way the ids come back in lexicographic order.
    """
    if not 1 <= i < k:
        raise ValueError(f"context size must satisfy 1 <= i < k, got i={i}, k={k}")
    if n_ordered_subsets(k, i) <= budget.max_contexts:
        return list(permutations(range(k), i))
    return sorted(sample_ordered_subsets(k, i, budget.max_contexts, seed))


def enumerate_contexts(
    exemplars: Sequence[Exemplar], i: int, budget: ContextBudget = ContextBudget(), seed=0
) -> list[Context]:
    return [
        Context(tuple(exemplars[j] for j in cid))
        for cid in enumerate_context_ids(len(exemplars), i, budget, seed)
    ]


@dataclass(frozen=True)
class SurrogateRecord:
    query_id: int
    context_id: tuple[int, ...]
    logits: np.ndarray
    label: int


class SurrogateDataset:
    """Surrogate records for one context size, stored column-wise.

    Attributes
    ----------
    context_size : int
    logits : ndarray, shape (N, n - 1)
    labels : ndarray of int, shape (N,)
    query_ids : ndarray of int, shape (N,)
        Position of the query in the demonstration set.
    context_ids : list of tuple
        Positions (in prompt order) of the context members.
    contexts_by_query : dict
        Query position to the context ids it was scored under, in record order.
    """

    def __init__(self, context_size, logits, labels, query_ids, context_ids, n_classes=None):
        self.context_size = int(context_size)
        self.logits = np.asarray(logits, dtype=np.float64)
        if self.logits.ndim != 2:
            raise ValueError("logits must be a 2-D array")
        self.labels = np.asarray(labels, dtype=np.int64)
        self.query_ids = np.asarray(query_ids, dtype=np.int64)
        self.context_ids = [tuple(int(v) for v in c) for c in context_ids]
        self.n_classes = int(n_classes) if n_classes is not None else self.logits.shape[1] + 1
        if self.logits.shape[1] != self.n_classes - 1:
            raise ValueError("logit width does not match the number of classes")
        if not (len(self.labels) == len(self.query_ids) == len(self.context_ids) == len(self.logits)):
            raise ValueError("record columns have different lengths")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("record label out of range")
        for q, cid in zip(self.query_ids, self.context_ids):
            if q in cid:
                raise ValueError(f"query {q} appears inside its own context {cid}")
            if len(cid) != self.context_size:
                raise ValueError(f"context {cid} does not have size {self.context_size}")
        self.contexts_by_query: dict[int, list[tuple[int, ...]]] = {}
        for q, cid in zip(self.query_ids.tolist(), self.context_ids):
            self.contexts_by_query.setdefault(q, []).append(cid)

    def __len__(self):
        return len(self.labels)

    @property
    def records(self) -> list[SurrogateRecord]:
        return [
            SurrogateRecord(int(q), c, m, int(y))
            for q, c, m, y in zip(self.query_ids, self.context_ids, self.logits, self.labels)
        ]

    def subset(self, mask) -> "SurrogateDataset":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return SurrogateDataset(
            self.context_size, self.logits[idx], self.labels[idx], self.query_ids[idx],
            [self.context_ids[j] for j in idx], self.n_classes,
        )

    def save(self, path):
        """One JSON object per line: ``i, context_id, query_id, logits, label``."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"n_classes": self.n_classes, "i": self.context_size}) + "\n")
            for q, c, m, y in zip(self.query_ids, self.context_ids, self.logits, self.labels):
                fh.write(json.dumps({
                    "i": self.context_size, "context_id": list(c), "query_id": int(q),
                    "logits": [float(v) for v in m], "label": int(y),
                }) + "\n")

    @classmethod
    def load(cls, path) -> "SurrogateDataset":
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            rows = [json.loads(line) for line in fh if line.strip()]
        n, i = header["n_classes"], header["i"]
        for lineno, row in enumerate(rows, start=2):
            if row["i"] != i:
                raise ValueError(f"{path}:{lineno}: record has context size {row['i']}, header says {i}")
        return cls(
            i,
            np.array([r["logits"] for r in rows], dtype=np.float64).reshape(len(rows), n - 1),
            [r["label"] for r in rows],
            [r["query_id"] for r in rows],
            [r["context_id"] for r in rows],
            n,
        )


def generate_surrogate(
    exemplars: Sequence[Exemplar],
    i: int,
    backend: Backend,
    budget: ContextBudget = ContextBudget(),
    seed=0,
) -> SurrogateDataset:
    """Score every held-out exemplar under every (budgeted) ordered context of size ``i``."""
    k = len(exemplars)
    jobs = []
    for cid in enumerate_context_ids(k, i, budget, seed):
        context = Context(tuple(exemplars[j] for j in cid))
        members = set(cid)
        for q in range(k):
            if q not in members:
                jobs.append((cid, q, context))
    jobs.sort(key=lambda job: (job[0], job[1]))

    def score(job):
        cid, q, context = job
        try:
            return backend.infer(exemplars[q].text, context)
        except BackendError as exc:
            raise SurrogateGenerationError(
                f"scoring query {q} ({exemplars[q].id!r}) under context {cid} failed: {exc}"
            ) from exc

    if backend.max_concurrency > 1:
        with ThreadPoolExecutor(max_workers=backend.max_concurrency) as pool:
            probs = list(pool.map(score, jobs))
    else:
        probs = [score(job) for job in jobs]

    n = backend.label_space.n
    logits = logits_from_probs(np.array(probs)) if probs else np.empty((0, n - 1))
    return SurrogateDataset(
        i, logits,
        [exemplars[q].label for _, q, _ in jobs],
        [q for _, q, _ in jobs],
        [cid for cid, _, _ in jobs],
        n,
    )


@dataclass(frozen=True)
class CoverageReport:
    present: tuple[int, ...]
    missing: tuple[int, ...]

    @property
    def complete(self) -> bool:
        return not self.missing


def class_coverage(ds: SurrogateDataset, n: int | None = None) -> CoverageReport:
    n = ds.n_classes if n is None else n
    present = set(np.unique(ds.labels).tolist())
    return CoverageReport(
        tuple(sorted(present)), tuple(c for c in range(n) if c not in present)
    )
