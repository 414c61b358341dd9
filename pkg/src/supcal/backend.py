"""Scoring backends: the ``infer(x, C)`` hook every calibrator is built on.

Two implementations share the :class:`Backend` base:

* :class:`MockBackend` - a synthetic in-context classifier whose log-odds are
  an explicitly biased version of a known ground-truth posterior. It is the
  reference model for tests, demos and the acceptance suite.
* :class:`HTTPBackend` - teacher-forced label scoring against a
  completion-style endpoint that echoes per-token log-probabilities.

Prompt rendering and the template file format also live here.
"""

from __future__ import annotations

import configparser
import hashlib
import logging
import math
import os
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Sequence

import httpx
import numpy as np

from .core import Context, Exemplar, LabelSpace, logits_from_probs, probs_from_logits

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    pass


class BackendTransportError(BackendError):
    """The endpoint could not be reached after all retries."""


class BackendProtocolError(BackendError):
    """The endpoint answered, but a label score could not be extracted."""


# --------------------------------------------------------------------------
# Prompt templates
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    """One ``input_prefix + x + separator + output_prefix [+ " " + y]`` block per exemplar."""

    input_prefix: str
    output_prefix: str
    separator: str
    label_space: LabelSpace
    block_separator: str = "\n\n"

    def render_block(self, text: str, label: int | None = None) -> str:
        block = f"{self.input_prefix}{text}{self.separator}{self.output_prefix}"
        if label is not None:
            block += " " + self.label_space.verbalizers[label]
        return block

    def continuation(self, label: int) -> str:
        """Text scored for ``label`` right after a rendered prompt."""
        return " " + self.label_space.verbalizers[label]

    @classmethod
    def parse(cls, pattern: str, label_space: LabelSpace) -> "PromptTemplate":
        """Build a template from a ``"<prefix><x><middle><y>"`` pattern such as
        ``"sentence: <x>\\nsentiment: <y>"``."""
        pattern = pattern.replace("\\n", "\n")
        if pattern.count("<x>") != 1 or pattern.count("<y>") != 1:
            raise ValueError(f"template must contain exactly one <x> and one <y>: {pattern!r}")
        prefix, rest = pattern.split("<x>")
        middle, tail = rest.split("<y>")
        if tail.strip():
            raise ValueError(f"nothing may follow <y> in a template: {pattern!r}")
        cut = middle.rfind("\n") + 1
        return cls(prefix, middle[cut:].rstrip(), middle[:cut], label_space)


def render_prompt(template: PromptTemplate, context: Context | Sequence[Exemplar], query: str) -> str:
    blocks = [template.render_block(e.text, e.label) for e in context]
    blocks.append(template.render_block(query))
    return template.block_separator.join(blocks)


def load_templates(path=None) -> dict[str, PromptTemplate]:
    """Read a template file.

    The format is INI-style, one section per dataset::

        [sst2]
        template = sentence: <x>\\nsentiment: <y>
        labels = negative, positive

    With no ``path`` the bundled table of benchmark templates is returned.
    """
    parser = configparser.ConfigParser(interpolation=None)
    if path is None:
        parser.read_string(resources.files("supcal").joinpath("templates.ini").read_text())
    else:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    out = {}
    for name in parser.sections():
        section = parser[name]
        unknown = set(section) - {"template", "labels"}
        if unknown:
            raise ValueError(f"unknown keys {sorted(unknown)} in template section [{name}]")
        labels = LabelSpace(tuple(w.strip() for w in section["labels"].split(",")))
        out[name] = PromptTemplate.parse(section["template"], labels)
    return out


# --------------------------------------------------------------------------
# Backend base
# --------------------------------------------------------------------------


def _context_key(context: Context) -> tuple:
    return tuple((e.id, e.text, e.label) for e in context)


class Backend:
    """Shared caching and concurrency for label scorers.

    Subclasses implement :meth:`_score`; callers use :meth:`infer` or
    :meth:`infer_many`. Identical ``(query, context)`` pairs are scored once.
    ``calls`` counts the underlying (uncached) scoring calls.
    """

    def __init__(self, label_space: LabelSpace, max_concurrency: int = 1, cache: bool = True):
        self.label_space = label_space
        self.max_concurrency = max(1, int(max_concurrency))
        self.calls = 0
        self._use_cache = cache
        self._cache: dict = {}
        self._lock = threading.Lock()

    def _score(self, text: str, context: Context) -> np.ndarray:
        raise NotImplementedError

    def infer(self, text: str, context: Context = Context()) -> np.ndarray:
        if not self._use_cache:
            return self._compute(text, context).copy()
        key = (text, _context_key(context))
        with self._lock:
            pending = self._cache.get(key)
            owner = pending is None
            if owner:
                pending = self._cache[key] = Future()
        if owner:
            # concurrent callers with the same key wait on this future
            try:
                pending.set_result(self._compute(text, context))
            except BaseException as exc:
                with self._lock:
                    self._cache.pop(key, None)
                pending.set_exception(exc)
        return pending.result().copy()

    def _compute(self, text: str, context: Context) -> np.ndarray:
        p = np.asarray(self._score(text, context), dtype=np.float64)
        p.flags.writeable = False
        with self._lock:
            self.calls += 1
        return p

    def infer_many(self, requests: Sequence[tuple[str, Context]]) -> list[np.ndarray]:
        """Score many pairs; the result order matches ``requests``."""
        if self.max_concurrency == 1 or len(requests) < 2:
            return [self.infer(t, c) for t, c in requests]
        with ThreadPoolExecutor(max_workers=self.max_concurrency) as pool:
            return list(pool.map(lambda tc: self.infer(*tc), requests))

    def clear_cache(self):
        with self._lock:
            self._cache.clear()


# --------------------------------------------------------------------------
# Synthetic biased model
# --------------------------------------------------------------------------


def default_feature_map(text: str) -> float:
    """Decimal text parses to its value; anything else hashes into [-3, 3]."""
    try:
        value = float(text)
    except ValueError:
        value = math.nan
    if math.isfinite(value):
        return value
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return -3.0 + 6.0 * (int.from_bytes(digest, "big") / 2**64)


def _per_class(value, n_classes: int, name: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (n_classes - 1,)).copy()
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


@dataclass(frozen=True, eq=False)
class MockModelSpec:
    """Ground truth plus the biases the mock model layers on top of it.

    The true log-odds of class ``c`` against class 0 are
    ``slope[c] * s(x) + intercept[c]``. The mock model reports::

        m_c(x; C) = a_c * true_c(x) + d_c
                    + majority_bias * (freq_c(C) - 1/n)
                    + recency_bias * [last label of C == c]
                    + N(0, noise_sd)

    Per-class quantities accept a scalar (broadcast to every non-reference
    class) or a length ``n - 1`` sequence. The noise draw is a deterministic
    function of ``(seed, query text, context ids)``.
    """

    n_classes: int = 2
    slope: float | Sequence[float] = 1.0
    intercept: float | Sequence[float] = 0.0
    conditional_scale: float | Sequence[float] = 1.0
    marginal_shift: float | Sequence[float] = 0.0
    majority_bias: float = 0.0
    recency_bias: float = 0.0
    noise_sd: float = 0.0
    seed: int = 0
    feature_map: Callable[[str], float] = field(default=default_feature_map)

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        for name in ("slope", "intercept", "conditional_scale", "marginal_shift"):
            object.__setattr__(self, name, _per_class(getattr(self, name), self.n_classes, name))

    def true_logits(self, text: str) -> np.ndarray:
        return self.slope * self.feature_map(text) + self.intercept

    def biased_logits(self, text: str, context: Context) -> np.ndarray:
        n = self.n_classes
        m = self.conditional_scale * self.true_logits(text) + self.marginal_shift
        if len(context):
            labels = np.array([e.label for e in context])
            freq = np.bincount(labels, minlength=n)[1:] / len(labels)
            m = m + self.majority_bias * (freq - 1.0 / n)
            recent = np.zeros(n - 1)
            if labels[-1] > 0:
                recent[labels[-1] - 1] = 1.0
            m = m + self.recency_bias * recent
        if self.noise_sd > 0:
            m = m + self.noise_sd * _noise_rng(self.seed, text, context).standard_normal(n - 1)
        return m


def _noise_rng(seed: int, text: str, context: Context) -> np.random.Generator:
    key = repr((int(seed), text, context.ids)).encode("utf-8")
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "big"))


def mock_true_posterior(spec: MockModelSpec, text: str) -> np.ndarray:
    """Noise-free, bias-free posterior of the synthetic task."""
    return probs_from_logits(spec.true_logits(text))


class MockBackend(Backend):
    """Deterministic synthetic in-context classifier driven by a :class:`MockModelSpec`."""

    def __init__(self, spec: MockModelSpec, label_space: LabelSpace | None = None, cache: bool = True):
        if label_space is None:
            label_space = LabelSpace(tuple(f"class{c}" for c in range(spec.n_classes)))
        if label_space.n != spec.n_classes:
            raise ValueError("label space size does not match the mock spec")
        super().__init__(label_space, cache=cache)
        self.spec = spec

    def _score(self, text, context):
        return probs_from_logits(self.spec.biased_logits(text, context))

    def logits(self, text: str, context: Context = Context()) -> np.ndarray:
        return logits_from_probs(self.infer(text, context))

    def true_posterior(self, text: str) -> np.ndarray:
        return mock_true_posterior(self.spec, text)


def sample_mock_items(spec: MockModelSpec, size: int, seed: int, feature_sd: float = 1.0) -> list[Exemplar]:
    """Draw ``size`` labelled exemplars: ``s ~ N(0, feature_sd)``, ``y ~ P*(y | s)``.

    Texts are the features printed to six decimals, so the default feature
    map reads back exactly the value the label was drawn from.
    """
    rng = np.random.default_rng(seed)
    items = []
    for j in range(size):
        text = f"{rng.normal(0.0, feature_sd):.6f}"
        p = mock_true_posterior(spec, text)
        label = int(rng.choice(spec.n_classes, p=p))
        items.append(Exemplar(j, text, label))
    return items


def bayes_accuracy(spec: MockModelSpec, texts: Sequence[str]) -> float:
    """Expected accuracy of the Bayes rule over the given queries."""
    return float(np.mean([mock_true_posterior(spec, t).max() for t in texts]))


# --------------------------------------------------------------------------
# HTTP completion endpoint
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BackendConfig:
    endpoint_url: str
    model_name: str
    timeout: float = 30.0
    max_retries: int = 3
    auth_token_env_var: str = "OPENAI_API_KEY"
    max_concurrency: int = 4
    scoring: str = "sequence"  # or "first_token"

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.scoring not in ("sequence", "first_token"):
            raise ValueError(f"unknown scoring mode {self.scoring!r}")


class HTTPBackend(Backend):
    """Teacher-forced label scoring against an OpenAI-style ``/completions`` endpoint.

    For each label the request carries ``prompt + " " + verbalizer`` with
    ``echo=True, max_tokens=0, logprobs=1``; the label score is the summed
    log-probability of the tokens past the prompt (or only the first such
    token with ``scoring="first_token"``). Scores are softmax-normalised over
    the label set. A label whose tokens are missing from the response raises
    :class:`BackendProtocolError`; nothing is renormalised over a subset.
    """

    RETRY_BASE_DELAY = 0.25

    def __init__(
        self,
        config: BackendConfig,
        template: PromptTemplate,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__(template.label_space, max_concurrency=config.max_concurrency)
        self.config = config
        self.template = template
        self._sleep = sleep
        headers = {}
        token = os.environ.get(config.auth_token_env_var)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = client or httpx.Client(timeout=config.timeout)
        self._headers = headers

    def _post(self, payload: dict) -> dict:
        last_exc: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self._sleep(self.RETRY_BASE_DELAY * 2 ** (attempt - 1))
            try:
                resp = self._client.post(
                    self.config.endpoint_url, json=payload, headers=self._headers,
                    timeout=self.config.timeout,
                )
            except httpx.TransportError as exc:
                last_exc = exc
                log.warning("request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_exc = BackendTransportError(f"HTTP {resp.status_code}")
                log.warning("retryable status %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise BackendProtocolError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise BackendProtocolError("response is not JSON") from exc
        raise BackendTransportError(
            f"giving up after {self.config.max_retries + 1} attempts: {last_exc}"
        ) from last_exc

    def label_logprob(self, prompt: str, label: int) -> float:
        continuation = self.template.continuation(label)
        data = self._post({
            "model": self.config.model_name,
            "prompt": prompt + continuation,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 1,
            "temperature": 0.0,
        })
        try:
            lp = data["choices"][0]["logprobs"]
            tokens, token_logprobs, offsets = lp["tokens"], lp["token_logprobs"], lp["text_offset"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendProtocolError(f"no token log-probabilities for label {label}") from exc
        cut = len(prompt)
        picked = [
            lp_ for tok, lp_, off in zip(tokens, token_logprobs, offsets)
            if off + len(tok) > cut
        ]
        if self.config.scoring == "first_token":
            picked = picked[:1]
        if not picked or any(v is None or not math.isfinite(v) for v in picked):
            raise BackendProtocolError(
                f"label {self.label_space.verbalizers[label]!r} has no usable token scores"
            )
        return float(sum(picked))

    def _score(self, text, context):
        prompt = render_prompt(self.template, context, text)
        scores = np.array([self.label_logprob(prompt, c) for c in range(self.label_space.n)])
        scores -= scores.max()
        p = np.exp(scores)
        return p / p.sum()

    def close(self):
        self._client.close()
