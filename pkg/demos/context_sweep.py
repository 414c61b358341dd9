"""Averaging over many sub-contexts when the model is sensitive to them.

Here the mock model leans towards whichever label dominates its prompt and
adds per-context noise. A single prompt gives a noisy, biased reading. The
ensemble scores each query under several sampled sub-contexts of each size
and averages the calibrated distributions. Because context draws are
prefix-stable, ``with_context_samples`` sweeps the number of samples without
retraining.

Run with ``python demos/context_sweep.py``.
"""

import numpy as np

from supcal import EnsembleConfig, LabelSpace, MockBackend, MockModelSpec, predict, train_ensemble
from supcal.backend import sample_mock_items
from supcal.harness import Dataset, sample_shots

LABELS = LabelSpace(("negative", "positive"))
SPEC = MockModelSpec(slope=2.0, majority_bias=2.0, noise_sd=0.5)


def main():
    data = Dataset("context-sensitive", LABELS, sample_mock_items(SPEC, 1500, seed=11))
    backend = MockBackend(SPEC, LABELS)
    sweep = (1, 2, 4, 8, 16)
    scores = {m: [] for m in sweep}
    for seed in range(4):
        shots, pool = sample_shots(data, 6, seed)
        test = pool[:300]
        full = train_ensemble(shots, backend, EnsembleConfig(seed=seed, i_max=3, m_i=max(sweep)))
        for m in sweep:
            model = full.with_context_samples(m)
            pred = [int(np.argmax(predict(model, e.text, backend))) for e in test]
            scores[m].append(np.mean([p == e.label for p, e in zip(pred, test)]))

    print("contexts per size   accuracy (mean over 4 seeds)")
    for m in sweep:
        print(f"{m:>17}   {np.mean(scores[m]):.3f}")


if __name__ == "__main__":
    main()
