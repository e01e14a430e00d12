from __future__ import annotations

import math

import numpy as np
import pytest

from u2c.errors import InputError
from u2c.metrics import ece, ece_bins, err, evaluate, nll
from u2c.oracles import oracle_metrics
from u2c.predictors import ExtendedPrediction, Predictions


def random_predictions(rng, n=None, c=None):
    """Prediction sets with edge cases mixed in: confidences on bin edges,
    zero true-class probabilities, one-hot rows."""
    n = int(rng.integers(1, 60)) if n is None else n
    c = int(rng.integers(2, 6)) if c is None else c
    probs = rng.dirichlet(np.full(c + 1, 0.5), n)
    kind = rng.integers(0, 4, n)
    onehot = np.eye(c + 1)[rng.integers(0, c + 1, n)]
    probs[kind == 1] = onehot[kind == 1]
    predicted = np.argmax(probs, axis=1) + 1
    conf = probs[np.arange(n), predicted - 1].copy()
    edges = rng.integers(0, 16, n) / 15
    conf[kind == 2] = edges[kind == 2]  # confidence exactly on a bin edge
    labels = rng.integers(1, c + 2, n)
    return Predictions(probs, predicted, conf, np.array(["A"] * n)), labels


def test_matches_oracle_on_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(200):
        preds, labels = random_predictions(rng)
        for bins in (1, 7, 15):
            mine, ref = evaluate(preds, labels, bins), oracle_metrics(preds, labels, bins)
            assert abs(mine.err - ref.err) <= 1e-12
            assert abs(mine.ece - ref.ece) <= 1e-12
            assert mine.nll_infinite == ref.nll_infinite and mine.nll_zero_events == ref.nll_zero_events
            if ref.nll is None:
                assert mine.nll is None
            else:
                assert abs(mine.nll - ref.nll) <= 1e-12
            assert [b.count for b in mine.bins] == [b.count for b in ref.bins]


def _one(probs, predicted, label):
    probs = np.asarray(probs, dtype=float)
    return [ExtendedPrediction(probs, predicted, float(probs[predicted - 1]), "A")], [label]


def test_single_record_hand_values():
    p, y = _one([0.7, 0.2, 0.1], 1, 1)
    assert err(p, y) == 0.0
    assert ece(p, y) == pytest.approx(0.3, abs=1e-15)
    assert nll(p, y).mean == pytest.approx(-math.log(0.7))
    p, y = _one([0.7, 0.2, 0.1], 1, 3)
    assert err(p, y) == 1.0
    assert nll(p, y).mean == pytest.approx(-math.log(0.1))


def test_zero_probability_flags_infinite_nll():
    p, y = _one([0.0, 1.0], 2, 1)
    r = nll(p, y)
    assert r.infinite and r.zero_events == 1 and r.mean is None and r.value == math.inf
    assert oracle_metrics(p, y).nll_infinite


def test_one_bin_ece_is_accuracy_gap():
    rng = np.random.default_rng(3)
    preds, labels = random_predictions(rng, n=500, c=3)
    acc = np.mean(preds.predicted == labels)
    assert ece(preds, labels, 1) == abs(acc - np.mean(preds.confidence))


def test_bin_membership_is_right_closed():
    conf = np.array([0.0, 1 / 3, 0.5, 2 / 3, 1.0])
    probs = np.stack([conf, 1 - conf], axis=1)
    preds = Predictions(probs, np.ones(5, dtype=np.int64), conf, np.array(["A"] * 5))
    _, bins = ece_bins(preds, [1] * 5, 3)
    assert [b.count for b in bins] == [2, 2, 1]


def test_perfectly_calibrated_predictor_has_small_ece():
    rng = np.random.default_rng(0)
    n, bins = 100_000, 15
    conf = rng.uniform(0.5, 1.0, n)
    correct = rng.random(n) < conf
    probs = np.stack([conf, 1 - conf], axis=1)
    labels = np.where(correct, 1, 2)
    preds = Predictions(probs, np.ones(n, dtype=np.int64), conf, np.array(["A"] * n))
    assert ece(preds, labels, bins) <= 1 / (2 * bins) + 0.01
    assert ece(preds, labels, bins) == pytest.approx(oracle_metrics(preds, labels, bins).ece, abs=1e-12)


def test_input_errors():
    p, _ = _one([0.5, 0.5], 1, 1)
    with pytest.raises(InputError):
        err(p, [1, 2])
    with pytest.raises(InputError):
        err(p, [3])
    with pytest.raises(InputError):
        ece(p, [1], 0)


def test_report_dict():
    rng = np.random.default_rng(1)
    preds, labels = random_predictions(rng, n=30, c=2)
    d = evaluate(preds, labels, 5, split="test-in", predictor="u2c").to_dict()
    assert d["split"] == "test-in" and d["predictor"] == "u2c" and len(d["bins"]) == 5
    assert sum(b["count"] for b in d["bins"]) == 30
