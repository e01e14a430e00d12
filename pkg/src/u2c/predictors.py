"""Extended (c+1)-way predictions from reject-or-classify (RC) and from the
unified calibrated softmax (U2C), and the A/B/C/D region partition.

Regions, by which of the two rules abstains::

              U2C accepts   U2C rejects
    RC accepts     A             B
    RC rejects     C             D

RC rejects when ``u >= theta``; U2C rejects when the abstention logit
strictly exceeds every scaled class logit. On an exact tie the argmax
tie-break picks the in-domain class, so the region test uses ``<`` too and
region labels always agree with the U2C prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import CalibratedModel
from .data_model import Dataset, Record, validate_compatibility
from .errors import InputError, NumericError

REGIONS = ("A", "B", "C", "D")


def softmax(z) -> np.ndarray:
    """Max-shifted softmax along the last axis."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax input contains non-finite values")
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


@dataclass(frozen=True)
class ExtendedPrediction:
    probs: np.ndarray
    predicted: int
    confidence: float
    region: str


@dataclass(frozen=True, eq=False)
class Predictions:
    """Column-oriented batch of extended predictions.

    ``predicted`` is 1-based; ``region`` holds the letters A-D.
    """

    probs: np.ndarray  # (n, c+1)
    predicted: np.ndarray  # (n,)
    confidence: np.ndarray  # (n,)
    region: np.ndarray  # (n,) of str

    def __len__(self) -> int:
        return self.predicted.shape[0]

    def __getitem__(self, i: int) -> ExtendedPrediction:
        return ExtendedPrediction(self.probs[i], int(self.predicted[i]), float(self.confidence[i]), str(self.region[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_list(cls, preds) -> "Predictions":
        preds = list(preds)
        if not preds:
            raise InputError("no predictions")
        return cls(
            np.array([p.probs for p in preds], dtype=float),
            np.array([p.predicted for p in preds], dtype=np.int64),
            np.array([p.confidence for p in preds], dtype=float),
            np.array([p.region for p in preds]),
        )


def as_predictions(preds) -> Predictions:
    return preds if isinstance(preds, Predictions) else Predictions.from_list(preds)


@dataclass(frozen=True, eq=False)
class Scored:
    """Quantities both predictors and the region test share for a batch."""

    scaled: np.ndarray  # logits / tau, (n, c)
    u: np.ndarray
    g: np.ndarray  # abstention logit tau_u(u)
    rc_reject: np.ndarray
    u2c_reject: np.ndarray

    @property
    def region(self) -> np.ndarray:
        code = self.rc_reject.astype(int) * 2 + self.u2c_reject.astype(int)
        return np.array(REGIONS)[code]


def score_batch(m: CalibratedModel, d: Dataset) -> Scored:
    validate_compatibility(d, m)
    return score_arrays(m, d.logits, m.estimator.score_dataset(d))


def score_arrays(m: CalibratedModel, logits, u) -> Scored:
    scaled = np.asarray(logits, dtype=float) / m.tau
    u = np.asarray(u, dtype=float)
    g = m.tau_u(u)
    if not np.all(np.isfinite(g)):
        raise NumericError("abstention logit is non-finite")
    return Scored(scaled, u, g, u >= m.theta, np.max(scaled, axis=1) < g)


def _finish(probs: np.ndarray, predicted: np.ndarray, region: np.ndarray) -> Predictions:
    conf = probs[np.arange(probs.shape[0]), predicted - 1]
    return Predictions(probs, predicted, conf, region)


def rc_from_scored(s: Scored) -> Predictions:
    n, c = s.scaled.shape
    probs = np.zeros((n, c + 1))
    probs[:, :c] = softmax(s.scaled)
    probs[s.rc_reject] = 0.0
    probs[s.rc_reject, c] = 1.0
    predicted = np.where(s.rc_reject, c + 1, np.argmax(s.scaled, axis=1) + 1)
    return _finish(probs, predicted, s.region)


def u2c_from_scored(s: Scored) -> Predictions:
    ext = np.concatenate([s.scaled, s.g[:, None]], axis=1)
    probs = softmax(ext)
    # argmax on the logits (first index wins ties) rather than on the rounded
    # probabilities keeps predictions consistent with the region test
    predicted = np.argmax(ext, axis=1) + 1
    return _finish(probs, predicted, s.region)


def rc_predict_batch(m: CalibratedModel, d: Dataset) -> Predictions:
    return rc_from_scored(score_batch(m, d))


def u2c_predict_batch(m: CalibratedModel, d: Dataset) -> Predictions:
    return u2c_from_scored(score_batch(m, d))


def _single(m: CalibratedModel, r: Record) -> Scored:
    if len(r.logits) != m.c:
        raise InputError(f"record {r.id!r} has {len(r.logits)} logits, model expects {m.c}")
    if r.u_score is None and m.estimator.needs_features and r.features is None:
        raise InputError(f"record {r.id!r} lacks the features the {m.estimator.kind} estimator needs")
    u = m.estimator.score(r)
    return score_arrays(m, np.asarray(r.logits, dtype=float)[None, :], [u])


def rc_predict(m: CalibratedModel, r: Record) -> ExtendedPrediction:
    return rc_from_scored(_single(m, r))[0]


def u2c_predict(m: CalibratedModel, r: Record) -> ExtendedPrediction:
    return u2c_from_scored(_single(m, r))[0]


def assign_region(m: CalibratedModel, r: Record) -> str:
    return str(_single(m, r).region[0])


def predict_batch(m: CalibratedModel, d: Dataset, predictor: str) -> Predictions:
    if predictor == "rc":
        return rc_predict_batch(m, d)
    if predictor == "u2c":
        return u2c_predict_batch(m, d)
    raise InputError(f"unknown predictor {predictor!r}")
