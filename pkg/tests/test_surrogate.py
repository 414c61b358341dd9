import itertools

import numpy as np
import pytest

from supcal.backend import BackendError, MockBackend, MockModelSpec
from supcal.core import Exemplar
from supcal.surrogate import (
    ContextBudget, SurrogateDataset, SurrogateGenerationError, class_coverage, enumerate_context_ids,
    enumerate_contexts, generate_surrogate, n_ordered_subsets, sample_ordered_subsets,
    unrank_ordered_subset,
)


def shots(k, n=2):
    return [Exemplar(j, f"{0.3 * j - 0.5:.6f}", j % n) for j in range(k)]


@pytest.mark.parametrize("k, i, count", [(4, 2, 12), (4, 3, 24), (2, 1, 2)])
def test_enumeration_counts(k, i, count):
    assert len(enumerate_contexts(shots(k), i, ContextBudget(10**6))) == count


def test_enumeration_is_lexicographic_and_validates():
    assert enumerate_context_ids(3, 2) == [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]
    with pytest.raises(ValueError):
        enumerate_context_ids(3, 3)
    with pytest.raises(ValueError):
        enumerate_context_ids(3, 0)


def test_unrank_matches_permutations():
    for k, i in [(5, 2), (5, 3), (6, 4)]:
        want = list(itertools.permutations(range(k), i))
        assert [unrank_ordered_subset(r, k, i) for r in range(len(want))] == want


def test_budget_sampling_is_distinct_sorted_and_seeded():
    ids = enumerate_context_ids(8, 4, ContextBudget(50), seed=3)
    assert len(ids) == 50 == len(set(ids)) and ids == sorted(ids)
    assert ids == enumerate_context_ids(8, 4, ContextBudget(50), seed=3)
    assert ids != enumerate_context_ids(8, 4, ContextBudget(50), seed=4)
    assert len(enumerate_context_ids(16, 5)) == 360


def test_sampling_is_prefix_stable_for_huge_spaces():
    big = sample_ordered_subsets(30, 8, 20, seed=1)
    assert sample_ordered_subsets(30, 8, 7, seed=1) == big[:7]
    assert len(set(big)) == 20 and n_ordered_subsets(30, 8) > 10**10


def test_generate_surrogate_counts_and_leave_out():
    ds = generate_surrogate(shots(4), 2, MockBackend(MockModelSpec()), ContextBudget(10**6))
    assert len(ds) == 24
    assert all(len(ds.contexts_by_query[q]) == 6 for q in range(4))
    assert all(r.query_id not in r.context_id for r in ds.records)
    keys = list(zip(ds.context_ids, ds.query_ids.tolist()))
    assert keys == sorted(keys)
    assert len(generate_surrogate(shots(4), 3, MockBackend(MockModelSpec()))) == 24


def test_unbiased_mock_records_equal_truth():
    ex = shots(4)
    ds = generate_surrogate(ex, 2, MockBackend(MockModelSpec(slope=1.5)))
    for r in ds.records:
        np.testing.assert_allclose(r.logits, [1.5 * float(ex[r.query_id].text)], atol=1e-12)


def test_generation_is_deterministic_with_concurrency():
    spec = MockModelSpec(majority_bias=1.0, noise_sd=0.4)
    serial = generate_surrogate(shots(6), 3, MockBackend(spec), ContextBudget(40), seed=2)
    be = MockBackend(spec)
    be.max_concurrency = 6
    parallel = generate_surrogate(shots(6), 3, be, ContextBudget(40), seed=2)
    np.testing.assert_array_equal(serial.logits, parallel.logits)
    assert serial.context_ids == parallel.context_ids


def test_backend_errors_name_the_pair():
    class Broken(MockBackend):
        def _score(self, text, context):
            if context.ids == (1,) and text == shots(3)[2].text:
                raise BackendError("nope")
            return super()._score(text, context)

    with pytest.raises(SurrogateGenerationError, match=r"query 2 .*context \(1,\)"):
        generate_surrogate(shots(3), 1, Broken(MockModelSpec()))


def test_dataset_validation():
    with pytest.raises(ValueError):
        SurrogateDataset(1, [[0.0]], [0], [0], [(0,)], 2)
    with pytest.raises(ValueError):
        SurrogateDataset(2, [[0.0]], [0], [0], [(1,)], 2)
    with pytest.raises(ValueError):
        SurrogateDataset(1, [[0.0]], [2], [0], [(1,)], 2)


def test_save_load_roundtrip(tmp_path):
    ds = generate_surrogate(shots(5, n=3), 2, MockBackend(MockModelSpec(n_classes=3, noise_sd=1.0)))
    path = tmp_path / "s.jsonl"
    ds.save(path)
    back = SurrogateDataset.load(path)
    np.testing.assert_array_equal(back.logits, ds.logits)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.context_ids == ds.context_ids and back.n_classes == 3


def test_class_coverage():
    full = SurrogateDataset(1, np.zeros((4, 1)), [0, 1, 0, 1], [0, 1, 0, 1], [(1,), (0,), (2,), (2,)], 2)
    assert class_coverage(full).complete
    part = SurrogateDataset(1, np.zeros((3, 1)), [0, 0, 0], [0, 1, 2], [(1,), (0,), (0,)], 2)
    assert class_coverage(part).missing == (1,)
    # four demonstrations cannot cover five classes
    ex = [Exemplar(j, str(j), j) for j in range(4)]
    be = MockBackend(MockModelSpec(n_classes=5))
    for i in range(1, 4):
        assert not class_coverage(generate_surrogate(ex, i, be), 5).complete
