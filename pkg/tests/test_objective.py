import math
from itertools import combinations

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from supcal.backend import MockBackend, MockModelSpec
from supcal.core import CalibrationParams, Exemplar, calibrated_dist
from supcal.objective import (
    CalibrationObjective, ObjectiveConfig, inv_penalty, invariance_pairs, nll, sym_xent,
    total_objective, trust_region_value, trust_region_value_and_grad,
)
from supcal.surrogate import ContextBudget, SurrogateDataset, generate_surrogate


def one_record(m, label):
    return SurrogateDataset(1, [[m]], [label], [0], [(1,)], 2)


def k4_dataset(spec=MockModelSpec(majority_bias=1.5, noise_sd=0.7)):
    ex = [Exemplar(j, f"{v:.6f}", y) for j, (v, y) in enumerate([(-1.0, 0), (0.4, 1), (1.2, 1), (-0.3, 0)])]
    return generate_surrogate(ex, 2, MockBackend(spec), ContextBudget(10**6))


def fd_grad(f, theta, h=1e-5):
    out = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        out[j] = (f(theta + e) - f(theta - e)) / (2 * h)
    return out


def test_nll_examples():
    ident = CalibrationParams.identity(2)
    assert nll(ident, one_record(0.0, 0)) == pytest.approx(math.log(2.0), abs=1e-12)
    assert nll(ident, one_record(2.0, 1)) == pytest.approx(-math.log(math.exp(2) / (1 + math.exp(2))), abs=1e-12)


def test_nll_at_identity_is_base_log_loss():
    ds = k4_dataset()
    probs = calibrated_dist(ds.logits, CalibrationParams.identity(2, 2))
    want = -np.log(probs[np.arange(len(ds)), ds.labels]).sum()
    assert nll(CalibrationParams.identity(2, 2), ds) == pytest.approx(want, rel=1e-12)


def test_bias_grid_oracle_small_dataset():
    rng = np.random.default_rng(0)
    m = rng.normal(0.0, 1.0, 10)
    ds = SurrogateDataset(1, m[:, None], [0, 1] * 5, np.arange(10), [((j + 1) % 10,) for j in range(10)], 2)
    cfg = ObjectiveConfig(lambda_inv=0.0)

    def value(b):
        return total_objective(np.array([b, 1.0]), ds, cfg)[0]

    coarse = np.linspace(-4, 4, 801)
    centre = coarse[np.argmin([value(b) for b in coarse])]
    fine = np.linspace(centre - 0.01, centre + 0.01, 2001)
    b_grid = fine[np.argmin([value(b) for b in fine])]
    b_opt = minimize_scalar(value).x
    assert abs(b_opt - b_grid) < 1e-3


def test_sym_xent_examples():
    assert sym_xent([0.5, 0.5], [0.5, 0.5]) == pytest.approx(2 * math.log(2))
    eps = 1e-12
    assert sym_xent([1 - eps, eps], [eps, 1 - eps]) == pytest.approx(2 * 12 * math.log(10), rel=1e-6)
    rng = np.random.default_rng(1)
    for _ in range(100):
        p, q = rng.dirichlet([1, 1, 1]), rng.dirichlet([1, 1, 1])
        assert sym_xent(p, q) == sym_xent(q, p) >= 0


def test_inv_penalty_pair_count_and_brute_force():
    ds = k4_dataset()
    left, right = invariance_pairs(ds)
    assert len(left) == 60  # 4 queries x C(6, 2)
    theta = CalibrationParams([0.3], [0.8], context_size=2)
    p = calibrated_dist(ds.logits, theta)
    brute = 0.0
    for q in range(4):
        rows = np.flatnonzero(ds.query_ids == q)
        brute += sum(sym_xent(p[a], p[b]) for a, b in combinations(rows, 2))
    assert inv_penalty(theta, ds) == pytest.approx(brute, rel=1e-12)


def test_inv_penalty_single_context_is_zero():
    ds = SurrogateDataset(1, [[0.3], [-1.0]], [0, 1], [0, 1], [(1,), (0,)], 2)
    assert inv_penalty(CalibrationParams.identity(2), ds) == 0.0


def test_inv_penalty_context_free_mock_is_entropy_sum():
    ds = k4_dataset(MockModelSpec())

    def entropy_sum(theta):
        p = calibrated_dist(ds.logits, CalibrationParams.from_vector(theta, 2))
        ent = -(p * np.log(p)).sum(axis=1)
        return 2 * 15 * sum(ent[ds.query_ids == q][0] for q in range(4))

    theta = np.array([0.4, 1.3])
    assert inv_penalty(theta, ds) == pytest.approx(entropy_sum(theta), rel=1e-10)
    obj = CalibrationObjective(ds, ObjectiveConfig(lambda_inv=1.0))
    _, g_total = obj.value_and_grad(theta)
    _, g_nll = CalibrationObjective(ds, ObjectiveConfig(lambda_inv=0.0)).value_and_grad(theta)
    np.testing.assert_allclose(g_total - g_nll, fd_grad(entropy_sum, theta), rtol=1e-6, atol=1e-7)


def test_inv_penalty_ignores_context_relabelling_and_record_order():
    ds = k4_dataset()
    theta = CalibrationParams([0.2], [1.4], 2)
    relabel = {c: (c[1], c[0]) for c in set(ds.context_ids)}
    renamed = SurrogateDataset(2, ds.logits, ds.labels, ds.query_ids, [relabel[c] for c in ds.context_ids], 2)
    order = np.random.default_rng(0).permutation(len(ds))
    shuffled = ds.subset(order)
    base = inv_penalty(theta, ds)
    assert inv_penalty(theta, renamed) == pytest.approx(base, rel=1e-12)
    assert inv_penalty(theta, shuffled) == pytest.approx(base, rel=1e-12)


def test_pair_subsampling_above_forty_contexts():
    ex = [Exemplar(j, f"{0.1 * j:.6f}", j % 2) for j in range(9)]
    ds = generate_surrogate(ex, 2, MockBackend(MockModelSpec()), ContextBudget(10**6))
    assert len(ds.contexts_by_query[0]) == 56
    left, _ = invariance_pairs(ds, seed=0)
    assert len(left) == 9 * 780
    assert not np.array_equal(left, invariance_pairs(ds, seed=1)[0])


@pytest.mark.parametrize("theta, want", [
    ([0.0, 1.0], 1.0), ([1.0, 1.0], 1 / math.sqrt(2)), ([1.0, 0.0], 0.0), ([0.0, -1.0], -1.0),
])
def test_trust_region_examples(theta, want):
    assert trust_region_value(np.array(theta)) == pytest.approx(want, abs=1e-15)


def test_trust_region_gradient_and_zero_vector():
    theta = np.array([0.3, -1.2, 0.8, 0.5])
    _, g = trust_region_value_and_grad(theta)
    np.testing.assert_allclose(g, fd_grad(trust_region_value, theta), rtol=1e-7, atol=1e-9)
    assert trust_region_value(np.zeros(2)) == 0.0


def test_total_objective_identities():
    ds = k4_dataset()
    theta = np.array([0.2, 1.1])
    v0, _ = total_objective(theta, ds, ObjectiveConfig(lambda_inv=0.0))
    assert v0 == nll(theta, ds)
    v1, _ = total_objective(theta, ds, ObjectiveConfig(lambda_inv=3.0))
    v2, _ = total_objective(theta, ds, ObjectiveConfig(lambda_inv=6.0))
    assert (v2 - v0) == pytest.approx(2 * (v1 - v0), rel=1e-12)


def test_gradient_at_identity_matches_finite_differences():
    ds = k4_dataset()
    cfg = ObjectiveConfig()
    theta = CalibrationParams.identity(2, 2).to_vector()
    _, g = total_objective(theta, ds, cfg)
    fd = fd_grad(lambda t: total_objective(t, ds, cfg)[0], theta)
    assert np.all(np.abs(g - fd) / np.maximum(np.abs(fd), 1.0) < 1e-5)


def test_logistic_bias_gradient_closed_form():
    ds = k4_dataset()
    theta = np.array([0.7, 1.0])
    _, g = total_objective(theta, ds, ObjectiveConfig(lambda_inv=0.0))
    f1 = calibrated_dist(ds.logits, CalibrationParams.from_vector(theta, 2))[:, 1]
    assert g[0] == pytest.approx(np.sum(f1 - (ds.labels == 1)), rel=1e-12)


def test_mismatched_inputs_are_rejected():
    ds = k4_dataset()
    with pytest.raises(ValueError):
        nll(CalibrationParams.identity(2, context_size=1), ds)
    with pytest.raises(ValueError):
        total_objective(np.zeros(4), ds)
    with pytest.raises(ValueError):
        ObjectiveConfig(tau=1.5)
    with pytest.raises(ValueError):
        ObjectiveConfig(lambda_inv=-1.0)
