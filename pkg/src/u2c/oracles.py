"""Brute-force reference computations used to cross-check the library.

Nothing here imports from :mod:`u2c.metrics` or reuses its helpers: each
quantity is recomputed record by record in plain Python.
"""

from __future__ import annotations

import math

import numpy as np

from .data_model import Dataset
from .metrics import Bin, MetricsReport


def oracle_metrics(preds, labels, n_bins: int = 15) -> MetricsReport:
    rows = [(list(map(float, p.probs)), int(p.predicted), float(p.confidence)) for p in preds]
    labels = [int(y) for y in labels]
    n = len(rows)
    assert n == len(labels) and n > 0

    wrong = 0
    for (_, pred, _), y in zip(rows, labels):
        if pred != y:
            wrong += 1

    gap = 0.0
    bins = []
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        members = []
        for (_, pred, conf), y in zip(rows, labels):
            inside = (lo <= conf <= hi) if b == 0 else (lo < conf <= hi)
            if inside:
                members.append((conf, 1.0 if pred == y else 0.0))
        if not members:
            bins.append(Bin(lo, hi, 0, None, None))
            continue
        conf_mean = math.fsum(m[0] for m in members) / len(members)
        acc = math.fsum(m[1] for m in members) / len(members)
        gap += len(members) / n * abs(acc - conf_mean)
        bins.append(Bin(lo, hi, len(members), conf_mean, acc))

    zero_events = 0
    logs = []
    for (probs, _, _), y in zip(rows, labels):
        p = probs[y - 1]
        if p == 0.0:
            zero_events += 1
        else:
            logs.append(-math.log(p))
    mean = math.fsum(logs) / len(logs) if logs else None
    return MetricsReport(wrong / n, gap, mean, zero_events > 0, zero_events, n, bins)


def oracle_best_constant_calibrator(relabeled: Dataset, tau: float, n_grid: int = 1001):
    """Best constant abstention logit over a grid spanning the scaled logits
    +/- 5, and its extended cross-entropy."""
    scaled = np.asarray(relabeled.logits, dtype=float) / tau
    labels = np.asarray(relabeled.labels)
    c = relabeled.c
    top = scaled.max(axis=1)
    lse = top + np.log(np.exp(scaled - top[:, None]).sum(axis=1))
    out = labels == c + 1
    target = np.where(out, 0.0, scaled[np.arange(len(labels)), np.where(out, 0, labels - 1)])
    grid = np.linspace(scaled.min() - 5.0, scaled.max() + 5.0, n_grid)
    best_b, best_loss = None, math.inf
    for b in grid:
        hi = np.maximum(lse, b)
        log_z = hi + np.log(np.exp(lse - hi) + np.exp(b - hi))
        loss = float(np.mean(log_z - np.where(out, b, target)))
        if loss < best_loss:
            best_b, best_loss = float(b), loss
    return best_b, best_loss
