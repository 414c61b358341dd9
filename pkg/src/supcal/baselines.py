"""Label-marginal calibration baselines.

Each rule divides the base prediction ``P(y | x, C_k)`` by an estimate of the
context-induced label prior and renormalises:

* ``base`` - no correction.
* ``cc``   - prior from content-free inputs ("N/A", "", "[MASK]").
* ``dc``   - prior from random bag-of-words pseudo-inputs drawn from a corpus.
* ``bc``   - prior from the mean prediction over a batch of test queries.

In log-odds space every one of them adds a query-independent shift, so for
two classes each is a single-threshold rule on the base log-odds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backend import Backend
from .core import EPS_PROB, Context


@dataclass(frozen=True)
class BaselineConfig:
    cc_tokens: tuple[str, ...] = ("N/A", "", "[MASK]")
    dc_repeats: int = 20
    bc_batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cc_tokens", tuple(self.cc_tokens))
        if not self.cc_tokens:
            raise ValueError("cc_tokens must be nonempty")
        if self.dc_repeats < 1:
            raise ValueError("dc_repeats must be >= 1")
        if self.bc_batch_size < 1:
            raise ValueError("bc_batch_size must be >= 1")


def _context(c) -> Context:
    return c if isinstance(c, Context) else Context(tuple(c))


def normalize_by_reference(p, reference) -> np.ndarray:
    """``p / max(reference, 1e-12)`` renormalised over the last axis."""
    scaled = np.asarray(p, dtype=np.float64) / np.maximum(np.asarray(reference, dtype=np.float64), EPS_PROB)
    return scaled / scaled.sum(axis=-1, keepdims=True)


def base_predict(x: str, context, backend: Backend) -> np.ndarray:
    return backend.infer(x, _context(context))


def cc_reference(context, backend: Backend, cfg: BaselineConfig = BaselineConfig()) -> np.ndarray:
    context = _context(context)
    return np.mean(backend.infer_many([(t, context) for t in cfg.cc_tokens]), axis=0)


def dc_pseudo_inputs(corpus: Sequence[str], cfg: BaselineConfig = BaselineConfig()) -> list[str]:
    """Random bag-of-words strings with the corpus's mean token count (half-to-even rounding)."""
    if not corpus:
        raise ValueError("domain-context calibration needs a nonempty corpus")
    tokenized = [text.split() for text in corpus]
    bag = [tok for toks in tokenized for tok in toks]
    if not bag:
        raise ValueError("corpus contains no tokens")
    length = max(1, round(float(np.mean([len(t) for t in tokenized]))))
    rng = np.random.default_rng(cfg.seed)
    return [" ".join(bag[j] for j in rng.integers(0, len(bag), length)) for _ in range(cfg.dc_repeats)]


def dc_reference(context, backend: Backend, corpus: Sequence[str], cfg: BaselineConfig = BaselineConfig()) -> np.ndarray:
    context = _context(context)
    return np.mean(backend.infer_many([(t, context) for t in dc_pseudo_inputs(corpus, cfg)]), axis=0)


def bc_reference(batch: Sequence[str], context, backend: Backend, cfg: BaselineConfig = BaselineConfig()) -> np.ndarray:
    """Mean prediction over the first ``min(bc_batch_size, len(batch))`` queries."""
    if not batch:
        raise ValueError("batch calibration needs a nonempty batch")
    context = _context(context)
    head = list(batch)[: cfg.bc_batch_size]
    return np.mean(backend.infer_many([(t, context) for t in head]), axis=0)


def cc_predict(x: str, context, backend: Backend, cfg: BaselineConfig = BaselineConfig()) -> np.ndarray:
    return normalize_by_reference(base_predict(x, context, backend), cc_reference(context, backend, cfg))


def dc_predict(x: str, context, backend: Backend, cfg: BaselineConfig = BaselineConfig(), corpus: Sequence[str] = ()) -> np.ndarray:
    return normalize_by_reference(base_predict(x, context, backend), dc_reference(context, backend, corpus, cfg))


def bc_predict(batch: Sequence[str], context, backend: Backend, cfg: BaselineConfig = BaselineConfig()) -> list[np.ndarray]:
    reference = bc_reference(batch, context, backend, cfg)
    context = _context(context)
    return [normalize_by_reference(p, reference) for p in backend.infer_many([(x, context) for x in batch])]
