import math

import numpy as np
import pytest

from supcal.core import (
    CalibrationParams, Context, DimensionError, Exemplar, LabelSpace, apply_affine, as_prob_dist,
    calibrated_dist, logits_from_probs, predict_label, probs_from_logits,
)


def test_label_space_validation():
    ls = LabelSpace(("negative", "positive"))
    assert ls.n == 2 and ls.labels == [(0, "negative"), (1, "positive")]
    assert ls.index("positive") == 1
    with pytest.raises(ValueError):
        LabelSpace(("only",))
    with pytest.raises(ValueError):
        LabelSpace(("a", "a"))
    with pytest.raises(ValueError):
        LabelSpace(("a", ""))


def test_context_rejects_duplicate_ids_and_keeps_order():
    a, b = Exemplar(0, "x", 0), Exemplar(1, "y", 1)
    assert Context((a, b)).ids == (0, 1)
    assert Context((a, b)) != Context((b, a))
    with pytest.raises(ValueError):
        Context((a, a))


@pytest.mark.parametrize("p, m", [
    ([0.5, 0.5], [0.0]),
    ([0.2, 0.8], [math.log(4.0)]),
    ([0.1, 0.3, 0.6], [math.log(3.0), math.log(6.0)]),
])
def test_logits_from_probs(p, m):
    np.testing.assert_allclose(logits_from_probs(p), m, rtol=0, atol=1e-12)


def test_logits_from_probs_floors_zeros():
    m = logits_from_probs([1.0, 0.0])
    assert np.isfinite(m).all()
    assert m[0] == pytest.approx(math.log(1e-12))


@pytest.mark.parametrize("m, p", [
    ([0.0], [0.5, 0.5]),
    ([math.log(4.0)], [0.2, 0.8]),
    ([-2.0], [0.880797, 0.119203]),
])
def test_probs_from_logits(m, p):
    np.testing.assert_allclose(probs_from_logits(m), p, atol=1e-6)


def test_probs_from_logits_survives_huge_logits():
    p = probs_from_logits([800.0, -800.0])
    assert np.isfinite(p).all() and p[1] == pytest.approx(1.0)


def test_apply_affine_examples():
    np.testing.assert_array_equal(apply_affine([1.7], CalibrationParams.identity(2)), [1.7])
    np.testing.assert_array_equal(apply_affine([2.0], CalibrationParams([0.0], [-1.0])), [-2.0])
    theta = CalibrationParams([-1.294, 3.457], [-0.188, 1.097])
    np.testing.assert_allclose(apply_affine([1.0, -1.0], theta), [-1.482, 2.360], atol=1e-12)
    with pytest.raises(DimensionError):
        apply_affine([1.0, 2.0], CalibrationParams.identity(2))


def test_calibrated_dist_examples():
    np.testing.assert_array_equal(calibrated_dist([0.4], CalibrationParams.identity(2)), probs_from_logits([0.4]))
    np.testing.assert_allclose(calibrated_dist([2.0], CalibrationParams([0.0], [-1.0])), [0.880797, 0.119203], atol=1e-6)
    np.testing.assert_allclose(
        calibrated_dist([5.0, 5.0], CalibrationParams([-5.0, -5.0], [1.0, 1.0])), [1 / 3] * 3, atol=1e-15
    )


@pytest.mark.parametrize("p, y", [([0.2, 0.8], 1), ([0.5, 0.5], 0), ([0.3, 0.3, 0.4], 2)])
def test_predict_label(p, y):
    assert predict_label(p) == y


def test_calibration_params_layout_and_immutability():
    theta = CalibrationParams([0.5, -1.0], [2.0, 3.0], context_size=2)
    np.testing.assert_array_equal(theta.to_vector(), [0.5, -1.0, 2.0, 3.0])
    assert CalibrationParams.from_vector(theta.to_vector(), 2) == theta
    assert theta.n_classes == 3
    with pytest.raises(ValueError):
        theta.bias[0] = 1.0
    with pytest.raises(ValueError):
        CalibrationParams([np.nan], [1.0])
    with pytest.raises(ValueError):
        CalibrationParams([0.0, 0.0], [1.0])


def test_as_prob_dist_rejects_bad_vectors():
    with pytest.raises(ValueError):
        as_prob_dist([0.6, 0.6])
    with pytest.raises(ValueError):
        as_prob_dist([1.2, -0.2])
