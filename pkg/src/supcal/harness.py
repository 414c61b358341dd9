"""Datasets, seeded experiments, metrics and reports."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import baselines
from .backend import Backend, BackendConfig, MockModelSpec, PromptTemplate
from .baselines import BaselineConfig
from .core import Context, Exemplar, LabelSpace, predict_label
from .ensemble import EnsembleConfig, predict as sc_predict, train_ensemble
from .objective import ObjectiveConfig
from .solver import SolverConfig
from .surrogate import ContextBudget

log = logging.getLogger(__name__)

METHODS = ("base", "cc", "dc", "bc", "sc", "sc_bias_only")
REPORT_COLUMNS = ("method", "seed", "accuracy", "macro_f1", "train_seconds", "infer_seconds_per_256")


class IngestionError(ValueError):
    pass


# --------------------------------------------------------------------------
# Datasets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    name: str
    label_space: LabelSpace
    items: tuple[Exemplar, ...]
    template: Optional[PromptTemplate] = None

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if not self.items:
            raise ValueError("a dataset needs at least one item")
        bad = [e.id for e in self.items if not 0 <= e.label < self.label_space.n]
        if bad:
            raise ValueError(f"items {bad[:5]} have labels outside the label space")

    def __len__(self):
        return len(self.items)


def _map_label(raw, label_space: LabelSpace, where: str) -> int:
    if isinstance(raw, bool):
        raise IngestionError(f"{where}: unknown label {raw!r}")
    if isinstance(raw, int):
        if 0 <= raw < label_space.n:
            return raw
        raise IngestionError(f"{where}: label index {raw} out of range")
    try:
        return label_space.index(str(raw).strip())
    except KeyError:
        raise IngestionError(f"{where}: unknown label {raw!r}") from None


def load_dataset(
    path,
    format: Optional[str] = None,
    label_space: Optional[LabelSpace] = None,
    name: Optional[str] = None,
    template: Optional[PromptTemplate] = None,
) -> Dataset:
    """Read ``{"text", "label"}`` jsonl lines or a ``text,label`` csv with header.

    Labels are verbalizer strings (or integer class indices in jsonl). Item
    ids are 0-based positions in the file.
    """
    if label_space is None:
        if template is None:
            raise ValueError("need a label space or a template")
        label_space = template.label_space
    fmt = (format or os.path.splitext(str(path))[1].lstrip(".")).lower()
    rows: list[tuple[str, object, int]] = []
    with open(path, encoding="utf-8", newline="") as fh:
        if fmt == "jsonl":
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    rows.append((obj["text"], obj["label"], lineno))
                except (ValueError, KeyError, TypeError) as exc:
                    raise IngestionError(f"{path}: line {lineno}: malformed record ({exc})") from None
        elif fmt == "csv":
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"text", "label"} <= set(reader.fieldnames):
                raise IngestionError(f"{path}: csv header must contain text,label")
            for row in reader:
                rows.append((row["text"], row["label"], reader.line_num))
        else:
            raise IngestionError(f"unsupported dataset format {fmt!r}")
    items = tuple(
        Exemplar(j, text, _map_label(raw, label_space, f"{path}: line {lineno}"))
        for j, (text, raw, lineno) in enumerate(rows)
    )
    return Dataset(name or os.path.splitext(os.path.basename(str(path)))[0], label_space, items, template)


def write_dataset(ds: Dataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        for e in ds.items:
            fh.write(json.dumps({"text": e.text, "label": ds.label_space.verbalizers[e.label]}) + "\n")


def sample_shots(ds: Dataset, k: int, seed) -> tuple[tuple[Exemplar, ...], tuple[Exemplar, ...]]:
    """``k`` demonstrations drawn without replacement (draw order kept) and the remaining pool."""
    if len(ds.items) < k + 1:
        raise ValueError(f"need at least k + 1 = {k + 1} items, dataset has {len(ds.items)}")
    order = np.random.default_rng(seed).permutation(len(ds.items))
    return tuple(ds.items[j] for j in order[:k]), tuple(ds.items[j] for j in order[k:])


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def confusion_matrix(y_true, y_pred, n: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def per_class_scores(confusion) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision, recall and F1 per class; any 0/0 is taken as 0."""
    cm = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(cm)
    predicted, actual = cm.sum(axis=0), cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def macro_f1(confusion) -> float:
    return float(per_class_scores(confusion)[2].mean())


def accuracy(confusion) -> float:
    cm = np.asarray(confusion)
    return float(np.trace(cm) / cm.sum())


# --------------------------------------------------------------------------
# Experiments
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    dataset: Dataset
    k: int
    method: str
    backend: Backend
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    test_size: int = 256
    fixed_test_set: bool = False
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.k < 1 or self.test_size < 1:
            raise ValueError("k and test_size must be >= 1")
        if not self.seeds:
            raise ValueError("need at least one seed")


@dataclass(frozen=True)
class SeedResult:
    seed: int
    confusion: np.ndarray
    train_seconds: float
    infer_seconds_per_256: float
    skipped_sizes: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return accuracy(self.confusion)

    @property
    def macro_f1(self) -> float:
        return macro_f1(self.confusion)


@dataclass(frozen=True)
class MetricsReport:
    method: str
    dataset: str
    k: int
    per_seed: tuple[SeedResult, ...]

    @property
    def confusion(self) -> np.ndarray:
        return sum(r.confusion for r in self.per_seed)

    def _stat(self, name):
        values = np.array([getattr(r, name) for r in self.per_seed])
        sd = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        return float(values.mean()), sd

    @property
    def accuracy(self) -> tuple[float, float]:
        """Mean and sample standard deviation over seeds."""
        return self._stat("accuracy")

    @property
    def macro_f1(self) -> tuple[float, float]:
        return self._stat("macro_f1")

    @property
    def per_class(self) -> dict[str, np.ndarray]:
        precision, recall, f1 = per_class_scores(self.confusion)
        return {"precision": precision, "recall": recall, "f1": f1}

    @property
    def skipped_sizes(self) -> dict[int, dict]:
        return {r.seed: r.skipped_sizes for r in self.per_seed if r.skipped_sizes}


def _split(spec: ExperimentSpec, seed: int):
    ds = spec.dataset
    if not spec.fixed_test_set:
        shots, pool = sample_shots(ds, spec.k, seed)
        return shots, pool[: spec.test_size]
    # the test set is drawn once with the first seed; shots come from the rest
    order = np.random.default_rng([spec.seeds[0], 1]).permutation(len(ds.items))
    size = min(spec.test_size, len(ds.items) - spec.k)
    test = tuple(ds.items[j] for j in order[:size])
    rest = Dataset(ds.name, ds.label_space, tuple(ds.items[j] for j in order[size:]), ds.template)
    shots, _ = sample_shots(rest, spec.k, seed) if len(rest) > spec.k else (rest.items[: spec.k], ())
    return shots, test


def run_seed(spec: ExperimentSpec, seed: int) -> SeedResult:
    backend = spec.backend
    shots, test = _split(spec, seed)
    context = Context(shots)
    texts = [e.text for e in test]
    skipped: dict = {}

    t0 = time.perf_counter()
    model = None
    if spec.method in ("sc", "sc_bias_only"):
        solver = replace(spec.solver, seed=seed, bias_only=spec.method == "sc_bias_only")
        model = train_ensemble(shots, backend, replace(spec.ensemble, seed=seed), spec.objective, solver)
        skipped = dict(model.skipped)
    train_seconds = time.perf_counter() - t0

    t0 = time.perf_counter()
    bcfg = replace(spec.baseline, seed=seed)
    if model is not None:
        probs = np.array([sc_predict(model, x, backend) for x in texts])
    else:
        base = np.array(backend.infer_many([(x, context) for x in texts]))
        if spec.method == "base":
            probs = base
        elif spec.method == "cc":
            probs = baselines.normalize_by_reference(base, baselines.cc_reference(context, backend, bcfg))
        elif spec.method == "dc":
            probs = baselines.normalize_by_reference(base, baselines.dc_reference(context, backend, texts, bcfg))
        else:
            probs = baselines.normalize_by_reference(base, baselines.bc_reference(texts, context, backend, bcfg))
    infer_seconds = time.perf_counter() - t0

    cm = confusion_matrix([e.label for e in test], predict_label(probs), spec.dataset.label_space.n)
    return SeedResult(seed, cm, train_seconds, infer_seconds * 256.0 / len(test), skipped)


def run_experiment(spec: ExperimentSpec) -> MetricsReport:
    """Run every seed of ``spec``; all randomness flows from the seeds."""
    results = []
    for seed in spec.seeds:
        spec.backend.clear_cache()
        results.append(run_seed(spec, seed))
        log.info("%s seed %d: acc %.4f macro-F1 %.4f", spec.method, seed,
                 results[-1].accuracy, results[-1].macro_f1)
    return MetricsReport(spec.method, spec.dataset.name, spec.k, tuple(results))


def report_rows(reports: Sequence[MetricsReport], timings: bool = True) -> list[dict]:
    """Per-seed rows plus ``mean`` and ``sd`` rows for every method.

    With ``timings=False`` the wall-clock columns are left empty, which makes
    the rows a pure function of the experiment spec.
    """
    def fmt(v):
        return repr(float(v))

    rows = []
    for rep in reports:
        for r in rep.per_seed:
            rows.append({
                "method": rep.method, "seed": str(r.seed),
                "accuracy": fmt(r.accuracy), "macro_f1": fmt(r.macro_f1),
                "train_seconds": fmt(r.train_seconds) if timings else "",
                "infer_seconds_per_256": fmt(r.infer_seconds_per_256) if timings else "",
            })
        for label, pick in (("mean", 0), ("sd", 1)):
            row = {"method": rep.method, "seed": label,
                   "accuracy": fmt(rep.accuracy[pick]), "macro_f1": fmt(rep.macro_f1[pick])}
            for col in ("train_seconds", "infer_seconds_per_256"):
                row[col] = fmt(rep._stat(col)[pick]) if timings else ""
            rows.append(row)
    return rows


def write_report_csv(reports: Sequence[MetricsReport], path, timings: bool = True):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(report_rows(reports, timings))


def read_report_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _describe(obj, prefix="") -> list[str]:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        lines = []
        for f in dataclasses.fields(obj):
            if f.name in ("backend", "dataset", "feature_map"):
                continue
            lines += _describe(getattr(obj, f.name), f"{prefix}{f.name}.")
        return lines
    return [f"{prefix.rstrip('.')} = {obj!r}"]


def write_manifest(specs: Sequence[ExperimentSpec], path):
    """Plain-text dump of every configuration that produced a report."""
    lines = []
    for spec in specs:
        lines.append(f"[{spec.method}]")
        lines.append(f"dataset = {spec.dataset.name!r} ({len(spec.dataset)} items)")
        lines.append(f"backend = {type(spec.backend).__name__}")
        mock = getattr(spec.backend, "spec", None)
        if mock is not None:
            lines += _describe(mock, "mock.")
        lines += _describe(spec)
        lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))


# --------------------------------------------------------------------------
# Config files
# --------------------------------------------------------------------------

CONFIG_SECTIONS = {
    "objective": ObjectiveConfig,
    "solver": SolverConfig,
    "ensemble": EnsembleConfig,
    "budget": ContextBudget,
    "baseline": BaselineConfig,
    "mock": MockModelSpec,
    "http": BackendConfig,
}
EXPERIMENT_KEYS = {
    "k": int, "method": str, "methods": tuple, "seeds": tuple, "test_size": int,
    "fixed_test_set": bool, "dataset": str, "format": str, "template": str, "template_file": str,
}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_floats(text: str):
    values = [float(p) for p in text.split(",") if p.strip()]
    return values[0] if len(values) == 1 else tuple(values)


def _coerce(raw: str, annotation: str, key: str):
    """Convert ``raw`` according to a dataclass field annotation (a string under PEP 563)."""
    ann = annotation.replace(" ", "")
    optional = ann.startswith("Optional[")
    if optional:
        if raw.strip().lower() == "none":
            return None
        ann = ann[len("Optional["):-1]
    if ann == "bool":
        return _parse_bool(raw)
    if ann == "int":
        return int(raw)
    if ann == "float":
        return float(raw)
    if ann == "str":
        return raw
    if ann.startswith("tuple[str"):
        return tuple(t.strip() for t in raw.split(","))
    if ann.startswith("float|Sequence"):
        return _parse_floats(raw)
    raise ValueError(f"key {key!r} cannot be set from a config file")


def load_config(path) -> dict:
    """Parse an INI-style configuration file.

    Sections: ``[experiment]`` plus one per config type (``objective``,
    ``solver``, ``ensemble``, ``budget``, ``baseline``, ``mock``, ``http``).
    Unknown sections or keys raise ``ValueError``. Returns a dict holding the
    constructed config objects and the ``experiment`` key-value table.
    """
    parser = configparser.ConfigParser(interpolation=None)
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    return parse_config(parser)


def parse_config(parser: configparser.ConfigParser) -> dict:
    out: dict = {"experiment": {}}
    for section in parser.sections():
        items = dict(parser[section])
        if section == "experiment":
            for key, raw in items.items():
                kind = EXPERIMENT_KEYS.get(key)
                if kind is None:
                    raise ValueError(f"unknown key {key!r} in [experiment]")
                if kind is tuple:
                    parts = [p.strip() for p in raw.split(",") if p.strip()]
                    value = tuple(int(p) for p in parts) if key == "seeds" else tuple(parts)
                elif kind is bool:
                    value = _parse_bool(raw)
                else:
                    value = kind(raw)
                out["experiment"][key] = value
            continue
        cls = CONFIG_SECTIONS.get(section)
        if cls is None:
            raise ValueError(f"unknown config section [{section}]")
        annotations = {f.name: f.type for f in dataclasses.fields(cls) if f.name != "feature_map"}
        kwargs = {}
        for key, raw in items.items():
            if key not in annotations:
                raise ValueError(f"unknown key {key!r} in [{section}]")
            kwargs[key] = _coerce(raw, str(annotations[key]), key)
        out[section] = kwargs
    if "budget" in out:
        budget = ContextBudget(**out.pop("budget"))
        out.setdefault("ensemble", {})["budget"] = budget
    for section, cls in CONFIG_SECTIONS.items():
        if section in out and section != "budget":
            out[section] = cls(**out[section])
    return out
