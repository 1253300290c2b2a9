import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from l2r2.calibration import (
    CLASSWISE_GRID,
    CalibrationParams,
    CalibrationWarning,
    cross_entropy,
    expected_calibration_error,
    fit_classwise_temperatures,
    fit_temperature,
    scale_logits,
    softmax,
)
from l2r2.core_data import ValidationError

mpmath.mp.dps = 50


def mp_softmax(z):
    e = [mpmath.exp(mpmath.mpf(float(v))) for v in z]
    s = mpmath.fsum(e)
    return [float(x / s) for x in e]


def mp_ce(z, y):
    total = mpmath.mpf(0)
    for row, k in zip(z, y):
        lse = mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in row))
        total += lse - mpmath.mpf(float(row[k]))
    return float(total / len(y))


def loop_ece(probs, labels, bins):
    """Independent per-sample binning."""
    total = 0.0
    buckets = [[] for _ in range(bins)]
    for p, y in zip(probs, labels):
        k = max(range(len(p)), key=lambda j: (p[j], -j))
        c = p[k]
        b = min(bins - 1, max(0, math.ceil(c * bins) - 1))
        buckets[b].append((c, k == y))
    for b in buckets:
        if b:
            conf = sum(c for c, _ in b) / len(b)
            acc = sum(ok for _, ok in b) / len(b)
            total += len(b) / len(labels) * abs(acc - conf)
    return total


def calibrated_set(rng, n, C, scale=1.5):
    """Logits that are the true log-posteriors: labels drawn from softmax(z)."""
    z = rng.normal(0, scale, (n, C))
    p = softmax(z)
    u = rng.random(n)
    y = (p.cumsum(axis=1) < u[:, None]).sum(axis=1)
    return z, np.minimum(y, C - 1)


# softmax -------------------------------------------------------------------


def test_softmax_examples():
    np.testing.assert_array_equal(softmax([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(softmax([1000.0, 1000.0, 1000.0]), [1 / 3] * 3, rtol=0, atol=1e-15)
    np.testing.assert_allclose(softmax([1.0, 2.0, 3.0]), mp_softmax([1, 2, 3]), rtol=0, atol=1e-12)


def test_softmax_rejects_nonfinite():
    with pytest.raises(ValidationError):
        softmax([0.0, np.inf])


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, st.integers(2, 20), elements=st.floats(-50, 50)),
    st.floats(-1e3, 1e3),
)
def test_softmax_shift_invariance(z, c):
    p = softmax(z)
    assert np.all(p > 0)
    assert abs(p.sum() - 1) < 1e-12
    np.testing.assert_allclose(softmax(z + c), p, rtol=0, atol=1e-12)


# scaling -------------------------------------------------------------------


def test_scale_logits_examples():
    np.testing.assert_array_equal(scale_logits([2.0, 4.0], CalibrationParams("global", 2.0)), [1.0, 2.0])
    np.testing.assert_array_equal(scale_logits([2.0, 4.0], CalibrationParams.identity()), [2.0, 4.0])
    np.testing.assert_array_equal(
        scale_logits([3.0, -3.0, 0.0], CalibrationParams("classwise", (3.0, 1.0, 2.0))), [1.0, -3.0, 0.0]
    )
    with pytest.raises(ValidationError):
        scale_logits([1.0, 2.0], CalibrationParams("classwise", (1.0, 2.0, 3.0)))


def test_params_validation_and_json():
    with pytest.raises(ValidationError):
        CalibrationParams("global", 0.0)
    with pytest.raises(ValidationError):
        CalibrationParams("classwise", (1.0, -1.0))
    p = CalibrationParams("global", 1.73)
    assert p.to_json() == '{"kind": "global", "T": 1.73}'
    assert CalibrationParams.from_json(p.to_json()) == p
    q = CalibrationParams("classwise", (0.5, 2.0))
    assert CalibrationParams.from_json(q.to_json()) == q


def test_argmax_invariance_global(rng):
    for C in (2, 10, 100):
        z = rng.normal(0, 5, (1000, C))
        T = rng.uniform(0.05, 20, (1000, 1))
        np.testing.assert_array_equal(np.argmax(z / T, axis=1), np.argmax(z, axis=1))


# cross-entropy --------------------------------------------------------------


def test_cross_entropy_examples(rng):
    assert cross_entropy([[0.0, 0.0]], [0]) == pytest.approx(math.log(2), abs=1e-15)
    assert cross_entropy([[20.0, -20.0]], [0]) < 1e-8
    z = rng.normal(0, 3, (10, 4))
    y = rng.integers(0, 4, 10)
    assert cross_entropy(z, y) == pytest.approx(mp_ce(z, y), rel=1e-13)
    with pytest.raises(ValidationError):
        cross_entropy(np.empty((0, 3)), [])


# global temperature ----------------------------------------------------------


def grid_argmin_T(z, y):
    grid = np.exp(np.linspace(math.log(0.05), math.log(20), 2001))
    return grid[int(np.argmin([cross_entropy(z / t, y) for t in grid]))]


def test_fit_temperature_on_calibrated_logits():
    z, y = calibrated_set(np.random.default_rng(3), 4000, 4)
    T = fit_temperature(z, y).T
    assert 0.9 <= T <= 1.1
    assert T == pytest.approx(grid_argmin_T(z, y), rel=5e-3)


def test_fit_temperature_overconfident():
    z, y = calibrated_set(np.random.default_rng(4), 4000, 4)
    T = fit_temperature(5 * z, y).T
    assert 4.5 <= T <= 5.5
    assert T == pytest.approx(grid_argmin_T(5 * z, y), rel=5e-3)


def test_fit_temperature_single_sample_hits_bound():
    with pytest.warns(CalibrationWarning, match="bound"):
        p = fit_temperature([[2.0, 0.0]], [0])
    assert p.T == pytest.approx(0.05)


def test_fit_temperature_single_class_returns_one():
    with pytest.warns(CalibrationWarning, match="single-class"):
        p = fit_temperature([[2.0, 0.0], [1.0, 0.5]], [0, 0])
    assert p.T == 1.0


@pytest.mark.filterwarnings("ignore::l2r2.calibration.CalibrationWarning")
def test_fit_temperature_never_worse_than_one(rng):
    for _ in range(20):
        z = rng.normal(0, rng.uniform(0.1, 10), (50, 3))
        y = rng.integers(0, 3, 50)
        p = fit_temperature(z, y)
        assert cross_entropy(z / p.T, y) <= cross_entropy(z, y)


# ECE -----------------------------------------------------------------------


def test_ece_confident_correct_is_zero():
    probs = np.array([[1.0, 0.0]] * 10)
    r = expected_calibration_error(probs, [0] * 10, is_probs=True)
    assert r.ece == 0.0
    assert r.counts.sum() == 10
    assert r.counts[-1] == 10


def test_ece_confident_half_correct():
    probs = np.array([[1.0, 0.0]] * 10)
    r = expected_calibration_error(probs, [0] * 5 + [1] * 5, is_probs=True)
    assert r.ece == pytest.approx(0.5, abs=1e-15)


def test_ece_matches_loop_oracle(rng):
    z = rng.normal(0, 2, (500, 5))
    y = rng.integers(0, 5, 500)
    for bins in (1, 7, 15):
        r = expected_calibration_error(z, y, bins)
        assert r.ece == pytest.approx(loop_ece(softmax(z), y, bins), abs=1e-12)
        assert r.counts.sum() == 500


def test_ece_permutation_invariant(rng):
    z = rng.normal(0, 2, (300, 3))
    y = rng.integers(0, 3, 300)
    perm = rng.permutation(300)
    assert expected_calibration_error(z, y).ece == pytest.approx(expected_calibration_error(z[perm], y[perm]).ece, abs=1e-15)


def test_ece_errors():
    with pytest.raises(ValidationError):
        expected_calibration_error([[0.0, 1.0]], [0], bins=0)
    with pytest.raises(ValidationError):
        expected_calibration_error(np.empty((0, 2)), [])


# class-wise -------------------------------------------------------------------


def test_classwise_grid_shape():
    assert len(CLASSWISE_GRID) == 30
    assert CLASSWISE_GRID[0] == pytest.approx(0.2)
    assert CLASSWISE_GRID[-1] == pytest.approx(5.0)


def test_classwise_already_calibrated_keeps_ones():
    # confidence is exactly 1.0 in float64 and every prediction correct: ECE is 0 and stays 0
    z = np.array([[100.0, -100.0], [-100.0, 100.0]] * 10)
    y = np.array([0, 1] * 10)
    p = fit_classwise_temperatures(z, y)
    assert p.T == (1.0, 1.0)


def test_classwise_fixes_overconfident_class():
    z, y = calibrated_set(np.random.default_rng(3), 4000, 4)
    z[:, 0] = 3 * z[:, 0] + 1.0
    p = fit_classwise_temperatures(z, y)
    assert p.T[0] > 1
    before = loop_ece(softmax(z), y, 15)
    after = loop_ece(softmax(scale_logits(z, p)), y, 15)
    assert after < before
    assert np.mean(np.argmax(scale_logits(z, p), 1) == y) >= np.mean(np.argmax(z, 1) == y)
