from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from u2c.calibration import CalibratedModel, EpistemicCalibrator, constant_calibrator
from u2c.epistemic import EpistemicEstimator
from u2c.errors import NumericError
from u2c.predictors import (
    assign_region, predict_batch, rc_predict, rc_predict_batch, score_arrays, softmax, u2c_from_scored,
    u2c_predict, u2c_predict_batch,
)

from conftest import make_dataset

PASS = EpistemicEstimator("passthrough")


def _model(g=0.0, theta=1.0, tau=1.0, c=2):
    return CalibratedModel(c, tau, theta, constant_calibrator(g), PASS)


def test_softmax_hand_values():
    np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(softmax([math.log(3), 0.0]), [0.75, 0.25])
    # max shift keeps huge logits finite
    np.testing.assert_allclose(softmax([1000.0, 1000.0, -1000.0]), [0.5, 0.5, 0.0])
    with pytest.raises(NumericError):
        softmax([np.nan, 1.0])


def test_rc_accepts_and_rejects():
    m = _model(theta=1.0)
    d = make_dataset([[math.log(3), 0.0], [5.0, 0.0]], [1, 2], u=[0.5, 1.0])
    p = rc_predict_batch(m, d)
    np.testing.assert_allclose(p.probs[0], [0.75, 0.25, 0.0])
    np.testing.assert_array_equal(p.probs[1], [0.0, 0.0, 1.0])
    assert p.predicted.tolist() == [1, 3] and p.confidence.tolist() == [0.75, 1.0]


def test_u2c_extended_softmax():
    m = _model(g=math.log(2), tau=2.0)
    d = make_dataset([[2 * math.log(3), 0.0]], [1], u=[0.0])
    p = u2c_predict_batch(m, d)
    np.testing.assert_allclose(p.probs[0], [3 / 6, 1 / 6, 2 / 6])
    assert p.predicted[0] == 1


def test_tie_goes_to_in_domain_class():
    # abstention logit equal to the best class logit: U2C accepts (region A)
    m = _model(g=1.0, theta=5.0)
    d = make_dataset([[1.0, 0.0]], [1], u=[0.0])
    p = u2c_predict_batch(m, d)
    assert p.predicted[0] == 1 and p.region[0] == "A"


def test_regions_from_the_two_rules():
    m = _model(g=0.0, theta=1.0)
    logits = [[1.0, 0.5], [-1.0, -2.0], [1.0, 0.5], [-1.0, -2.0]]
    u = [0.0, 0.0, 2.0, 2.0]
    d = make_dataset(logits, [1, 1, 1, 1], u=u)
    assert u2c_predict_batch(m, d).region.tolist() == ["A", "B", "C", "D"]
    assert [assign_region(m, r) for r in d] == ["A", "B", "C", "D"]


def test_single_record_matches_batch():
    rng = np.random.default_rng(0)
    cal = EpistemicCalibrator("mlp", rng.normal(size=11), 0.2, 1.5)
    m = CalibratedModel(3, 1.7, 0.4, cal, PASS)
    d = make_dataset(rng.normal(size=(30, 3)), rng.integers(1, 4, 30), u=rng.normal(size=30))
    rb, ub = rc_predict_batch(m, d), u2c_predict_batch(m, d)
    for i, r in enumerate(d):
        a, b = rc_predict(m, r), u2c_predict(m, r)
        assert a.predicted == rb.predicted[i] and b.predicted == ub.predicted[i]
        np.testing.assert_array_equal(a.probs, rb.probs[i])
        # the mlp's matrix-vector product may round differently for one row
        np.testing.assert_allclose(b.probs, ub.probs[i], rtol=1e-14)


def test_predict_batch_dispatch():
    d = make_dataset([[0.0, 1.0]], [2], u=[0.0])
    assert predict_batch(_model(), d, "rc").predicted[0] == 2
    with pytest.raises(Exception):
        predict_batch(_model(), d, "oracle")


finite = st.floats(-30, 30, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(logits=arrays(float, (8, 3), elements=finite), u=arrays(float, 8, elements=finite),
       g=finite, theta=finite, tau=st.floats(0.05, 20))
def test_prediction_properties(logits, u, g, theta, tau):
    m = CalibratedModel(3, tau, theta, constant_calibrator(g), PASS)
    s = score_arrays(m, logits, u)
    rc, u2c = rc_predict_batch(m, make_dataset(logits, [1] * 8, u=u)), u2c_from_scored(s)
    for p in (rc, u2c):
        np.testing.assert_allclose(p.probs.sum(axis=1), 1.0, rtol=1e-12)
        assert np.all(p.probs >= 0)
        np.testing.assert_array_equal(p.confidence, p.probs[np.arange(8), p.predicted - 1])
    # each rule abstains exactly on its side of the region table
    np.testing.assert_array_equal(rc.predicted == 4, np.isin(s.region, ["C", "D"]))
    np.testing.assert_array_equal(u2c.predicted == 4, np.isin(s.region, ["B", "D"]))
    np.testing.assert_array_equal(rc.predicted == 4, u >= theta)
    # RC is all-or-nothing on the abstention class
    assert set(np.unique(rc.probs[:, 3])) <= {0.0, 1.0}
    # U2C never assigns exactly zero to the abstention class within this range
    assert np.all(u2c.probs[:, 3] > 0)
