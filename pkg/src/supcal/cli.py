"""Command-line entry point: ``supcal <command> [options]``.

Commands map onto the pipeline stages so each can be cached and rerun:
``simulate``, ``gen-surrogate``, ``fit``, ``predict``, ``evaluate``, ``report``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

import numpy as np

from .backend import HTTPBackend, MockBackend, MockModelSpec, PromptTemplate, load_templates, sample_mock_items
from .core import LabelSpace
from .ensemble import EnsembleConfig, load_ensemble, predict, save_ensemble, train_ensemble
from .harness import (
    METHODS, Dataset, ExperimentSpec, load_config, load_dataset, read_report_csv, run_experiment,
    sample_shots, write_dataset, write_manifest, write_report_csv,
)
from .objective import ObjectiveConfig
from .solver import SolverConfig, fit, write_fit_result
from .surrogate import SurrogateDataset, generate_surrogate


def _template(cfg: dict) -> PromptTemplate | None:
    exp = cfg["experiment"]
    if "template_file" in exp:
        templates = load_templates(exp["template_file"])
        return templates[exp.get("template", next(iter(templates)))]
    if "template" in exp:
        return load_templates()[exp["template"]]
    return None


def _label_space(cfg: dict) -> LabelSpace:
    template = _template(cfg)
    if template is not None:
        return template.label_space
    n = cfg["mock"].n_classes if "mock" in cfg else 2
    return LabelSpace(tuple(f"class{c}" for c in range(n)))


def _backend(args, cfg: dict):
    if args.backend == "http":
        template = _template(cfg)
        if "http" not in cfg or template is None:
            raise SystemExit("the http backend needs an [http] section and an experiment template")
        return HTTPBackend(cfg["http"], template)
    labels = _label_space(cfg)
    spec = cfg.get("mock") or MockModelSpec(n_classes=labels.n)
    return MockBackend(spec, labels)


def _dataset(path, cfg) -> Dataset:
    return load_dataset(path, cfg["experiment"].get("format"), _label_space(cfg), template=_template(cfg))


def _configs(cfg: dict, seed: int):
    ensemble = cfg.get("ensemble", EnsembleConfig())
    return (
        replace(ensemble, seed=seed),
        cfg.get("objective", ObjectiveConfig()),
        replace(cfg.get("solver", SolverConfig()), seed=seed),
    )


def cmd_simulate(args, cfg):
    labels = _label_space(cfg)
    spec = cfg.get("mock") or MockModelSpec(n_classes=labels.n)
    items = sample_mock_items(spec, args.size, args.seed, args.feature_sd)
    write_dataset(Dataset("simulated", labels, items), args.out)
    print(f"wrote {len(items)} items to {args.out}")


def cmd_gen_surrogate(args, cfg):
    ds = _dataset(args.data, cfg)
    shots, _ = sample_shots(ds, args.k, args.seed)
    budget = cfg.get("ensemble", EnsembleConfig()).budget
    sur = generate_surrogate(shots, args.i, _backend(args, cfg), budget, seed=[args.seed, args.i])
    sur.save(args.out)
    print(f"wrote {len(sur)} surrogate records (i={args.i}) to {args.out}")


def cmd_fit(args, cfg):
    ens_cfg, obj_cfg, solver_cfg = _configs(cfg, args.seed)
    if args.surrogate:
        result = fit(SurrogateDataset.load(args.surrogate), obj_cfg, solver_cfg)
        write_fit_result(result, args.out)
        print(f"objective {result.objective_value:.6g}, constraint {result.constraint_value:.6g} "
              f"(tau {result.tau:.6g}), wrote {args.out}")
        return
    if not (args.data and args.k):
        raise SystemExit("fit needs --surrogate, or --data and --k")
    shots, _ = sample_shots(_dataset(args.data, cfg), args.k, args.seed)
    model = train_ensemble(shots, _backend(args, cfg), ens_cfg, obj_cfg, solver_cfg)
    save_ensemble(model, args.out)
    print(f"trained sizes {model.sizes} (skipped {sorted(model.skipped)}), wrote {args.out}")


def cmd_predict(args, cfg):
    model = load_ensemble(args.model)
    backend = _backend(args, cfg)
    with open(args.queries, encoding="utf-8") as fh, open(args.out, "w", encoding="utf-8") as out:
        for line in fh:
            if not line.strip():
                continue
            text = json.loads(line)["text"]
            p = predict(model, text, backend)
            out.write(json.dumps({
                "text": text, "probs": [float(v) for v in p],
                "label": model.label_space.verbalizers[int(np.argmax(p))],
            }) + "\n")
    print(f"wrote predictions to {args.out}")


def cmd_evaluate(args, cfg):
    exp = cfg["experiment"]
    ds = _dataset(args.data or exp["dataset"], cfg)
    methods = args.methods.split(",") if args.methods else list(exp.get("methods", (exp.get("method", "sc"),)))
    k = args.k or exp.get("k", 4)
    backend = _backend(args, cfg)
    specs = [
        ExperimentSpec(
            ds, k, m, backend,
            seeds=exp.get("seeds", (0, 1, 2, 3, 4)),
            test_size=exp.get("test_size", 256),
            fixed_test_set=exp.get("fixed_test_set", False),
            ensemble=cfg.get("ensemble", EnsembleConfig()),
            objective=cfg.get("objective", ObjectiveConfig()),
            solver=cfg.get("solver", SolverConfig()),
            **({"baseline": cfg["baseline"]} if "baseline" in cfg else {}),
        )
        for m in methods
    ]
    reports = [run_experiment(s) for s in specs]
    write_report_csv(reports, args.out, timings=not args.no_timings)
    if args.manifest:
        write_manifest(specs, args.manifest)
    for rep in reports:
        (acc, acc_sd), (f1, f1_sd) = rep.accuracy, rep.macro_f1
        print(f"{rep.method:>13}  acc {acc:.3f}±{acc_sd:.3f}  macro-F1 {f1:.3f}±{f1_sd:.3f}")


def cmd_report(args, cfg):
    for path in args.csv:
        print(path)
        for row in read_report_csv(path):
            if row["seed"] == "mean":
                print(f"  {row['method']:>13}  acc {float(row['accuracy']):.3f}  "
                      f"macro-F1 {float(row['macro_f1']):.3f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="supcal", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="INI configuration file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--backend", choices=("mock", "http"), default="mock")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic task drawn from the mock model")
    p.add_argument("--size", type=int, default=1000)
    p.add_argument("--feature-sd", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gen-surrogate", help="score leave-subset-out surrogate records")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--i", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_surrogate)

    p = sub.add_parser("fit", help="fit one size from a surrogate file, or a full ensemble from data")
    p.add_argument("--surrogate")
    p.add_argument("--data")
    p.add_argument("--k", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="ensemble predictions for a jsonl file of queries")
    p.add_argument("--model", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="run seeded experiments and write a report CSV")
    p.add_argument("--data")
    p.add_argument("--k", type=int)
    p.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.add_argument("--no-timings", action="store_true", help="leave wall-clock columns empty")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="summarise report CSVs")
    p.add_argument("csv", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(args.config) if args.config else {"experiment": {}}
    args.func(args, cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
