"""Empirical A/B/C/D region analysis and exact checks of the error, nll and
region-wise calibration identities relating RC and U2C.

All probabilities are empirical frequencies on the supplied datasets, so the
error identity holds exactly (up to float round-off) for any model.
Conditional errors on empty regions are ``None``; they only ever enter a
formula multiplied by the region's zero mass, which is done first.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .calibration import CalibratedModel
from .data_model import Dataset
from .errors import InputError, VerificationError
from .metrics import DEFAULT_BINS, ece, err, per_record_nll
from .predictors import REGIONS, Predictions, Scored, rc_from_scored, score_batch, u2c_from_scored

LEMMA1_TOL = 1e-12
LEMMA2_TOL = 1e-9
ECE_TOL = 1e-9

Predictor = Callable[[Scored], Predictions]


@dataclass(frozen=True)
class RegionMasses:
    n: int
    counts: dict
    masses: dict
    # error of the bare classifier argmax(logits) within each region
    cond_err: dict

    def to_dict(self) -> dict:
        return {"n": self.n, "counts": self.counts, "masses": self.masses, "cond_err": self.cond_err}


def _masses(s: Scored, labels: np.ndarray) -> RegionMasses:
    n = labels.shape[0]
    if n == 0:
        raise InputError("region analysis needs a non-empty dataset")
    region = s.region
    bare_wrong = (np.argmax(s.scaled, axis=1) + 1) != labels
    counts, masses, cond = {}, {}, {}
    for r in REGIONS:
        mask = region == r
        nr = int(np.count_nonzero(mask))
        counts[r] = nr
        masses[r] = nr / n
        cond[r] = int(np.count_nonzero(bare_wrong & mask)) / nr if nr else None
    return RegionMasses(n, counts, masses, cond)


def region_masses(m: CalibratedModel, d: Dataset) -> RegionMasses:
    return _masses(score_batch(m, d), d.labels)


def _weighted(mass: float, cond: float | None) -> float:
    return 0.0 if mass == 0 else mass * cond


@dataclass(frozen=True)
class Lemma1Result:
    residual_out: float
    residual_in: float
    err_out_rc: float
    err_out_u2c: float
    err_in_rc: float
    err_in_u2c: float
    masses_out: RegionMasses
    masses_in: RegionMasses

    @property
    def delta_out(self) -> float:
        """err(RC) - err(U2C) on out-domain data."""
        return self.err_out_rc - self.err_out_u2c

    def to_dict(self) -> dict:
        return {
            "residual_out": self.residual_out,
            "residual_in": self.residual_in,
            "err_out_rc": self.err_out_rc,
            "err_out_u2c": self.err_out_u2c,
            "err_in_rc": self.err_in_rc,
            "err_in_u2c": self.err_in_u2c,
            "out_B_minus_C": self.masses_out.masses["B"] - self.masses_out.masses["C"],
        }


def verify_lemma1(m: CalibratedModel, d_in: Dataset, d_out: Dataset, *, u2c: Predictor = u2c_from_scored,
                  rc: Predictor = rc_from_scored, tol: float = LEMMA1_TOL) -> Lemma1Result:
    """Check both error-difference identities.

    Out-domain: ``err(RC) - err(U2C) = P(B) - P(C)``. In-domain:
    ``err(RC) - err(U2C) = P(C) - P(B) + P(B) err(h|B) - P(C) err(h|C)``.
    """
    s_in, s_out = score_batch(m, d_in), score_batch(m, d_out)
    mi, mo = _masses(s_in, d_in.labels), _masses(s_out, d_out.labels)
    eo_rc, eo_u2c = err(rc(s_out), d_out.labels), err(u2c(s_out), d_out.labels)
    ei_rc, ei_u2c = err(rc(s_in), d_in.labels), err(u2c(s_in), d_in.labels)
    po, pi = mo.masses, mi.masses
    res_out = (eo_rc - eo_u2c) - (po["B"] - po["C"])
    res_in = (ei_rc - ei_u2c) - (
        pi["C"] - pi["B"] + _weighted(pi["B"], mi.cond_err["B"]) - _weighted(pi["C"], mi.cond_err["C"])
    )
    result = Lemma1Result(res_out, res_in, eo_rc, eo_u2c, ei_rc, ei_u2c, mo, mi)
    if not abs(res_out) <= tol:
        raise VerificationError("lemma1.out", f"residual {res_out:.3e} exceeds {tol:g}")
    if not abs(res_in) <= tol:
        raise VerificationError("lemma1.in", f"residual {res_in:.3e} exceeds {tol:g}")
    return result


# ----------------------------------------------------------------------- nll


def _lse(z: np.ndarray) -> np.ndarray:
    mx = np.max(z, axis=1)
    return mx + np.log(np.sum(np.exp(z - mx[:, None]), axis=1))


def _region_mean(values: np.ndarray, mask: np.ndarray):
    if not np.any(mask):
        return None
    v = values[mask]
    return float("inf") if np.any(np.isinf(v)) else float(np.mean(v))


def verify_lemma2(m: CalibratedModel, d_in: Dataset, d_out: Dataset, *, u2c: Predictor = u2c_from_scored,
                  rc: Predictor = rc_from_scored, tol: float = LEMMA2_TOL) -> dict:
    """U2C nll by the closed form versus the metrics module, and the 0/inf
    pattern of RC's nll by region."""
    table = {"u2c": {}, "rc": {}, "u2c_by_region": {}, "rc_by_region": {}}
    for name, d in (("out", d_out), ("in", d_in)):
        s = score_batch(m, d)
        labels = d.labels
        log_z = np.logaddexp(_lse(s.scaled), s.g)
        if name == "out":
            formula = -np.mean(s.g - log_z)
        else:
            formula = -np.mean(s.scaled[np.arange(len(d)), labels - 1] - log_z)
        u2c_terms = per_record_nll(u2c(s), labels)
        if not np.all(np.isfinite(u2c_terms)):
            raise VerificationError(f"lemma2.u2c.{name}.finite", "U2C assigned zero probability to a true label")
        metric = float(np.mean(u2c_terms))
        if not abs(formula - metric) <= tol:
            raise VerificationError(f"lemma2.u2c.{name}", f"closed form {formula!r} vs metrics {metric!r}")
        table["u2c"][name] = {"closed_form": float(formula), "metrics": metric}

        rc_terms = per_record_nll(rc(s), labels)
        region = s.region
        rejected = np.isin(region, ("C", "D"))
        accepted = ~rejected
        if name == "out":
            if np.any(rc_terms[rejected] != 0):
                raise VerificationError("lemma2.rc.out.CD", "RC nll must be 0 on out-domain records in C or D")
            if np.any(np.isfinite(rc_terms[accepted])):
                raise VerificationError("lemma2.rc.out.AB", "RC nll must be infinite on out-domain records in A or B")
            table["rc"][name] = {"zero_in_CD": int(rejected.sum()), "infinite_in_AB": int(accepted.sum())}
        else:
            if np.any(np.isfinite(rc_terms[rejected])):
                raise VerificationError("lemma2.rc.in.CD", "RC nll must be infinite on in-domain records in C or D")
            plain = _lse(s.scaled) - s.scaled[np.arange(len(d)), labels - 1]
            entry = {"infinite_in_CD": int(rejected.sum())}
            if np.any(accepted):
                rc_ab = float(np.mean(rc_terms[accepted]))
                plain_ab = float(np.mean(plain[accepted]))
                if not abs(rc_ab - plain_ab) <= tol:
                    raise VerificationError("lemma2.rc.in.AB", f"RC nll {rc_ab!r} vs plain classifier {plain_ab!r}")
                mass_ab = float(np.mean(accepted))
                entry.update(rc_AB=rc_ab, plain_AB=plain_ab, weighted_AB=mass_ab * plain_ab)
            table["rc"][name] = entry
        table["u2c_by_region"][name] = {r: _region_mean(u2c_terms, region == r) for r in REGIONS}
        table["rc_by_region"][name] = {r: _region_mean(rc_terms, region == r) for r in REGIONS}
    return table


# ----------------------------------------------------------------------- ece

_ECE_CLAUSES = (
    ("out", "rc", "A"), ("out", "rc", "B"), ("out", "rc", "C"), ("out", "rc", "D"),
    ("out", "u2c", "A"), ("out", "u2c", "B"), ("out", "u2c", "C"), ("out", "u2c", "D"),
    ("in", "rc", "A"), ("in", "rc", "B"), ("in", "rc", "C"), ("in", "rc", "D"),
    ("in", "u2c", "B"), ("in", "u2c", "D"),
)


def _closed_form(split: str, method: str, region: str, scaled: np.ndarray, g: np.ndarray,
                 labels: np.ndarray, n_bins: int) -> float:
    """Region-conditional calibration gap written straight from raw logits."""
    shift = np.maximum(np.max(scaled, axis=1), g)
    e_cls = np.exp(scaled - shift[:, None])
    e_abs = np.exp(g - shift)
    if method == "rc":
        if split == "out":
            if region in ("C", "D"):
                return 0.0
            return float(np.mean(np.max(e_cls, axis=1) / np.sum(e_cls, axis=1)))
        if region in ("C", "D"):
            return 1.0
        # A and B: same as the plain temperature-scaled classifier
        probs = e_cls / np.sum(e_cls, axis=1, keepdims=True)
        pred = np.argmax(scaled, axis=1) + 1
        conf = probs[np.arange(len(pred)), pred - 1]
        return _binned_gap(conf, (pred == labels).astype(float), n_bins)
    denom = np.sum(e_cls, axis=1) + e_abs
    if split == "out":
        if region in ("A", "C"):
            return float(np.mean(np.max(e_cls, axis=1) / denom))
        return float(np.mean(1.0 - e_abs / denom))
    return float(np.mean(e_abs / denom))


def _binned_gap(conf: np.ndarray, correct: np.ndarray, n_bins: int) -> float:
    # deliberately separate from metrics.ece: loop over bins with explicit predicates
    n = conf.shape[0]
    total = 0.0
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        mask = (conf > lo) & (conf <= hi) if b else (conf >= lo) & (conf <= hi)
        k = int(np.count_nonzero(mask))
        if k:
            total += k / n * abs(float(np.mean(correct[mask])) - float(np.mean(conf[mask])))
    return total


def _direct(split: str, method: str, region: str, preds: Predictions, labels: np.ndarray,
            c: int, n_bins: int) -> float:
    """The same quantity from predictor outputs: mean |confidence - true
    probability of the predicted class|, or the binned ece where the true
    in-domain probability is unobservable."""
    if split == "in" and method == "rc" and region in ("A", "B"):
        return ece(preds, labels, n_bins)
    if split == "out":
        truth = (preds.predicted == c + 1).astype(float)
    else:
        if np.any(preds.predicted != c + 1):
            raise VerificationError(f"ece.{split}.{method}.{region}", "expected only abstentions in this region")
        truth = np.zeros(len(preds))
    return float(np.mean(np.abs(preds.confidence - truth)))


def _subset(p: Predictions, mask: np.ndarray) -> Predictions:
    return Predictions(p.probs[mask], p.predicted[mask], p.confidence[mask], p.region[mask])


def verify_ece_lemmas(m: CalibratedModel, d_in: Dataset, d_out: Dataset, *, n_bins: int = DEFAULT_BINS,
                      u2c: Predictor = u2c_from_scored, rc: Predictor = rc_from_scored,
                      tol: float = ECE_TOL) -> dict:
    """Evaluate every region-conditional calibration expression two ways.

    Returns ``{"out.rc.A": {"closed_form", "direct", "n"}, ...}``; empty
    regions report ``None`` for both values.
    """
    scored = {"in": score_batch(m, d_in), "out": score_batch(m, d_out)}
    labels = {"in": d_in.labels, "out": d_out.labels}
    preds = {(sp, "rc"): rc(scored[sp]) for sp in scored}
    preds.update({(sp, "u2c"): u2c(scored[sp]) for sp in scored})
    table = {}
    for split, method, region in _ECE_CLAUSES:
        s = scored[split]
        mask = s.region == region
        key = f"{split}.{method}.{region}"
        n = int(np.count_nonzero(mask))
        if n == 0:
            table[key] = {"closed_form": None, "direct": None, "n": 0}
            continue
        closed = _closed_form(split, method, region, s.scaled[mask], s.g[mask], labels[split][mask], n_bins)
        direct = _direct(split, method, region, _subset(preds[(split, method)], mask),
                         labels[split][mask], m.c, n_bins)
        if not abs(closed - direct) <= tol:
            raise VerificationError(f"ece.{key}", f"closed form {closed!r} vs direct {direct!r}")
        table[key] = {"closed_form": closed, "direct": direct, "n": n}
    return table


# --------------------------------------------------------------------- report


@dataclass
class RegionReport:
    masses_in: RegionMasses
    masses_out: RegionMasses
    lemma1: Lemma1Result
    lemma2: dict
    ece_lemmas: dict

    def to_dict(self) -> dict:
        return {
            "in": self.masses_in.to_dict(),
            "out": self.masses_out.to_dict(),
            "lemma1_residual_out": self.lemma1.residual_out,
            "lemma1_residual_in": self.lemma1.residual_in,
            "lemma1": self.lemma1.to_dict(),
            "lemma2": self.lemma2,
            "ece_lemmas": self.ece_lemmas,
        }


def broken_u2c(s: Scored) -> Predictions:
    """Negative control: U2C that ignores the calibrator (abstention logit 0)."""
    return u2c_from_scored(replace(s, g=np.zeros_like(s.g)))


def region_report(m: CalibratedModel, d_in: Dataset, d_out: Dataset, *, n_bins: int = DEFAULT_BINS,
                  u2c: Predictor = u2c_from_scored) -> RegionReport:
    """Run all verifications; raises :class:`VerificationError` on the first
    failing clause."""
    lemma1 = verify_lemma1(m, d_in, d_out, u2c=u2c)
    lemma2 = verify_lemma2(m, d_in, d_out, u2c=u2c)
    ece_tab = verify_ece_lemmas(m, d_in, d_out, n_bins=n_bins, u2c=u2c)
    return RegionReport(lemma1.masses_in, lemma1.masses_out, lemma1, lemma2, ece_tab)


def uncertainty_triples(m: CalibratedModel, d: Dataset) -> list[tuple]:
    """(id, u, max softmax of the scaled logits, bare classifier correct, region)."""
    s = score_batch(m, d)
    e = np.exp(s.scaled - np.max(s.scaled, axis=1, keepdims=True))
    conf = np.max(e, axis=1) / np.sum(e, axis=1)
    correct = (np.argmax(s.scaled, axis=1) + 1) == d.labels
    return [(d.ids[i], float(s.u[i]), float(conf[i]), bool(correct[i]), str(s.region[i])) for i in range(len(d))]
