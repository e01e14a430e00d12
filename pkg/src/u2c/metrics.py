"""Classification error, binned expected calibration error and negative
log-likelihood over the extended label set ``1..c+1``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .predictors import Predictions, as_predictions

DEFAULT_BINS = 15


def _labels(preds: Predictions, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != len(preds):
        raise InputError(f"{len(preds)} predictions but {labels.shape[0]} labels")
    if labels.shape[0] == 0:
        raise InputError("metrics need at least one record")
    if np.any(labels < 1) or np.any(labels > preds.probs.shape[1]):
        raise InputError("labels must lie in 1..c+1")
    return labels


def err(preds, labels) -> float:
    preds = as_predictions(preds)
    labels = _labels(preds, labels)
    return int(np.count_nonzero(preds.predicted != labels)) / labels.shape[0]


@dataclass(frozen=True)
class Bin:
    lower: float
    upper: float
    count: int
    confidence: float | None
    accuracy: float | None


def bin_edges(n_bins: int) -> np.ndarray:
    return np.arange(n_bins + 1) / n_bins


def ece_bins(preds, labels, n_bins: int = DEFAULT_BINS) -> tuple[float, list[Bin]]:
    """Equal-width binning on [0, 1]; bins are right-closed ``(lo, hi]``
    except the first, which also holds 0."""
    preds = as_predictions(preds)
    labels = _labels(preds, labels)
    if n_bins < 1:
        raise InputError("n_bins must be >= 1")
    conf = preds.confidence
    if np.any(conf < 0) or np.any(conf > 1) or not np.all(np.isfinite(conf)):
        raise InputError("confidence values must lie in [0, 1]")
    correct = (preds.predicted == labels).astype(float)
    edges = bin_edges(n_bins)
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    n = labels.shape[0]
    total = 0.0
    bins = []
    for b in range(n_bins):
        mask = idx == b
        nb = int(np.count_nonzero(mask))
        if nb == 0:
            bins.append(Bin(float(edges[b]), float(edges[b + 1]), 0, None, None))
            continue
        acc_b = float(np.mean(correct[mask]))
        conf_b = float(np.mean(conf[mask]))
        total += (nb / n) * abs(acc_b - conf_b)
        bins.append(Bin(float(edges[b]), float(edges[b + 1]), nb, conf_b, acc_b))
    return total, bins


def ece(preds, labels, n_bins: int = DEFAULT_BINS) -> float:
    return ece_bins(preds, labels, n_bins)[0]


@dataclass(frozen=True)
class NLL:
    """``mean`` averages over records whose true-class probability is
    positive; ``infinite`` is set when any record has probability 0."""

    mean: float | None
    infinite: bool
    zero_events: int

    @property
    def value(self) -> float:
        return float("inf") if self.infinite else float(self.mean)


def per_record_nll(preds, labels) -> np.ndarray:
    preds = as_predictions(preds)
    labels = _labels(preds, labels)
    p = preds.probs[np.arange(labels.shape[0]), labels - 1]
    with np.errstate(divide="ignore"):
        return -np.log(p)


def nll(preds, labels) -> NLL:
    terms = per_record_nll(preds, labels)
    finite = np.isfinite(terms)
    zeros = int(terms.size - np.count_nonzero(finite))
    mean = float(np.mean(terms[finite])) if np.any(finite) else None
    return NLL(mean, zeros > 0, zeros)


@dataclass
class MetricsReport:
    err: float
    ece: float
    nll: float | None
    nll_infinite: bool
    nll_zero_events: int
    n: int
    bins: list[Bin] = field(default_factory=list)
    split: str | None = None
    predictor: str | None = None

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "predictor": self.predictor,
            "err": self.err,
            "ece": self.ece,
            "nll": self.nll,
            "nll_infinite": self.nll_infinite,
            "nll_zero_events": self.nll_zero_events,
            "n": self.n,
            "bins": [b.__dict__ for b in self.bins],
        }


def evaluate(preds, labels, n_bins: int = DEFAULT_BINS, split=None, predictor=None) -> MetricsReport:
    preds = as_predictions(preds)
    e, bins = ece_bins(preds, labels, n_bins)
    ll = nll(preds, labels)
    return MetricsReport(err(preds, labels), e, ll.mean, ll.infinite, ll.zero_events,
                         len(preds), bins, split, predictor)
