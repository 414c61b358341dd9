"""A model whose log-odds point the wrong way, and how calibration recovers.

The mock model here reports ``-3.5 * s`` where the true log-odds are
``+3.5 * s``, so its raw predictions are worse than a coin flip. Rules that
only shift the decision boundary cannot help, because every threshold on the
model's own score inherits the wrong orientation. The full calibrator learns
a negative scale from the demonstrations alone.

Run with ``python demos/anticorrelated_flip.py``.
"""

from supcal import (
    Dataset, EnsembleConfig, ExperimentSpec, LabelSpace, MockBackend, MockModelSpec, run_experiment, train_ensemble,
)
from supcal.backend import sample_mock_items
from supcal.harness import sample_shots

LABELS = LabelSpace(("negative", "positive"))
SPEC = MockModelSpec(slope=3.5, conditional_scale=-1.0)


def main():
    data = Dataset("anticorrelated", LABELS, sample_mock_items(SPEC, 2000, seed=7))
    backend = MockBackend(SPEC, LABELS)
    common = dict(seeds=(0, 1, 2), test_size=500, ensemble=EnsembleConfig(i_max=3, m_i=6))

    print("method         accuracy  (mean over 3 seeds, k=8 demonstrations)")
    for method in ("base", "cc", "bc", "sc_bias_only", "sc"):
        report = run_experiment(ExperimentSpec(data, 8, method, backend, **common))
        mean, sd = report.accuracy
        print(f"{method:<14} {mean:.3f} +/- {sd:.3f}")

    shots, _ = sample_shots(data, 8, seed=0)
    model = train_ensemble(shots, backend, EnsembleConfig(seed=0, i_max=3, m_i=6))
    print("\nlearned scale per context size (negative means the calibrator flipped the model):")
    for member in model.members:
        print(f"  i={member.context_size}: w={member.fit.params.scale[0]:+.2f}  b={member.fit.params.bias[0]:+.2f}")


if __name__ == "__main__":
    main()
