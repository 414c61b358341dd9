"""Label-marginal baselines versus the learned calibrator on a shifted model.

This mock model adds a constant 2.0 to the log-odds of "positive", so the raw
model over-predicts that class. All the reference-distribution baselines try
to cancel the shift by dividing out an estimate of it: content-free inputs,
random in-domain words, or the test batch itself. The calibrator instead fits
the bias directly against the demonstrations' labels.

This mock ignores its demonstrations, so every context yields the same
distribution and the invariance term reduces to a multiple of the
prediction entropy. At the default weight it rewards confident predictions
over correct ones. The ``lambda=0`` rows switch that term off.

Run with ``python demos/shift_correction.py``.
"""

from supcal import Dataset, ExperimentSpec, LabelSpace, MockBackend, MockModelSpec, ObjectiveConfig, run_experiment
from supcal.backend import sample_mock_items

LABELS = LabelSpace(("negative", "positive"))


def main():
    for shift in (0.0, 2.0):
        spec = MockModelSpec(slope=1.5, marginal_shift=shift)
        data = Dataset("shifted", LABELS, sample_mock_items(spec, 2000, seed=1))
        backend = MockBackend(spec, LABELS)
        print(f"\nmarginal shift {shift:+.1f}")
        runs = [(m, m, ObjectiveConfig()) for m in ("base", "cc", "dc", "bc", "sc_bias_only", "sc")]
        runs += [(f"{m} lambda=0", m, ObjectiveConfig(lambda_inv=0.0)) for m in ("sc_bias_only", "sc")]
        for name, method, objective in runs:
            spec_ = ExperimentSpec(data, 8, method, backend, seeds=(0, 1, 2), test_size=400, objective=objective)
            report = run_experiment(spec_)
            (acc, _), (f1, _) = report.accuracy, report.macro_f1
            print(f"  {name:<22} accuracy {acc:.3f}  macro-F1 {f1:.3f}")


if __name__ == "__main__":
    main()
