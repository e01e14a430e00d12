"""Epistemic uncertainty scores u(x): MaxLogit, Mahalanobis, KNN and ASH.

Higher u means "less like the in-domain data". Every estimator honours a
precomputed ``u`` column on the dataset, which overrides the estimator's own
computation; the ``passthrough`` kind relies on that column exclusively.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree

from ._util import ceil_product
from .data_model import Dataset, LinearHead, Record
from .errors import FitError, InputError, NumericError

KINDS = ("maxlogit", "mahalanobis", "knn", "ash", "passthrough")
_FEATURE_KINDS = ("mahalanobis", "knn", "ash")

RIDGE_SCALE = 1e-6
# used when the pooled scatter is exactly zero and trace-scaling gives no ridge
RIDGE_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class EpistemicEstimator:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown estimator kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "mahalanobis":
            cov = self.params["covariance"]
            try:
                chol = linalg.cholesky(cov, lower=True)
            except linalg.LinAlgError:
                raise NumericError("Mahalanobis covariance is not positive definite") from None
            object.__setattr__(self, "_chol", chol)
        if self.kind == "knn":
            ref = self.params["reference"]
            k = self.params["k"]
            if not 1 <= k <= ref.shape[0]:
                raise InputError(f"knn needs 1 <= k <= {ref.shape[0]} stored vectors, got k={k}")
            object.__setattr__(self, "_tree", cKDTree(ref))

    @property
    def needs_features(self) -> bool:
        return self.kind in _FEATURE_KINDS

    @property
    def d_feat(self) -> int | None:
        if self.kind == "mahalanobis":
            return self.params["means"].shape[1]
        if self.kind == "knn":
            return self.params["reference"].shape[1]
        if self.kind == "ash":
            return self.params["head"].d_feat
        return None

    # -------------------------------------------------------------- scoring

    def score_arrays(self, logits: np.ndarray | None, features: np.ndarray | None) -> np.ndarray:
        """Vectorised u over rows of ``logits`` (n, c) / ``features`` (n, d)."""
        if self.kind == "passthrough":
            raise InputError("passthrough estimator needs a precomputed u score")
        if self.kind == "maxlogit":
            if logits is None:
                raise InputError("maxlogit needs logits")
            return -np.max(np.asarray(logits, dtype=float), axis=1)
        if features is None:
            raise InputError(f"{self.kind} estimator needs features")
        phi = np.asarray(features, dtype=float)
        if phi.ndim != 2 or phi.shape[1] != self.d_feat:
            raise InputError(f"{self.kind} estimator expects {self.d_feat} features, got shape {phi.shape}")
        if self.kind == "mahalanobis":
            return _mahalanobis(phi, self.params["means"], self._chol)
        if self.kind == "knn":
            return _knn(self._tree, phi, self.params["k"])
        return _ash(phi, self.params["p"], self.params["fill"], self.params["head"])

    def score(self, r: Record) -> float:
        if r.u_score is not None:
            return float(r.u_score)
        logits = np.asarray(r.logits, dtype=float)[None, :]
        feats = None if r.features is None else np.asarray(r.features, dtype=float)[None, :]
        return float(self.score_arrays(logits, feats)[0])

    def score_dataset(self, d: Dataset) -> np.ndarray:
        if d.u is not None:
            return np.array(d.u, dtype=float)
        return self.score_arrays(d.logits, d.features)

    # -------------------------------------------------------- serialization

    def to_dict(self) -> dict:
        p = self.params
        if self.kind == "mahalanobis":
            params = {
                "means": p["means"].tolist(),
                "covariance": p["covariance"].tolist(),
                "ridge": p["ridge"],
            }
        elif self.kind == "knn":
            params = {"k": p["k"], "reference": p["reference"].tolist()}
        elif self.kind == "ash":
            params = {"p": p["p"], "fill": p["fill"], "head": p["head"].to_dict()}
        else:
            params = {}
        return {"kind": self.kind, "params": params}

    @classmethod
    def from_dict(cls, data: dict) -> "EpistemicEstimator":
        kind = data["kind"]
        raw = data.get("params", {})
        if kind == "mahalanobis":
            params = {
                "means": np.asarray(raw["means"], dtype=float),
                "covariance": np.asarray(raw["covariance"], dtype=float),
                "ridge": float(raw["ridge"]),
            }
        elif kind == "knn":
            params = {"k": int(raw["k"]), "reference": np.asarray(raw["reference"], dtype=float)}
        elif kind == "ash":
            params = {"p": float(raw["p"]), "fill": float(raw["fill"]), "head": LinearHead.from_dict(raw["head"])}
        else:
            params = {}
        return cls(kind, params)

    def __eq__(self, other):
        if not isinstance(other, EpistemicEstimator):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def _mahalanobis(phi: np.ndarray, means: np.ndarray, chol: np.ndarray) -> np.ndarray:
    best = np.full(phi.shape[0], np.inf)
    for mu in means:
        y = linalg.solve_triangular(chol, (phi - mu).T, lower=True)
        best = np.minimum(best, np.sum(y * y, axis=0))
    return np.sqrt(best)


def _knn(tree: cKDTree, phi: np.ndarray, k: int) -> np.ndarray:
    # the mean of the k smallest distances does not depend on how ties at the
    # k-th distance are broken, so the tree's ordering is deterministic enough
    dist, _ = tree.query(phi, k=k)
    dist = np.asarray(dist, dtype=float).reshape(phi.shape[0], k)
    return dist.mean(axis=1)


def ash_reshape(phi: np.ndarray, p: float, fill: float) -> np.ndarray:
    """Keep the top ``ceil(p * d)`` entries of each row by magnitude (ties to
    the lower index), set them to ``fill`` and zero the rest."""
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    d = phi.shape[1]
    keep = min(d, max(1, ceil_product(p, d)))
    order = np.argsort(-np.abs(phi), axis=1, kind="stable")[:, :keep]
    out = np.zeros_like(phi)
    np.put_along_axis(out, order, fill, axis=1)
    return out


def _ash(phi: np.ndarray, p: float, fill: float, head: LinearHead) -> np.ndarray:
    return -np.max(head(ash_reshape(phi, p, fill)), axis=1)


# ----------------------------------------------------------------------- fitting


def fit_estimator(kind: str, validation: Dataset, *, k: int = 5, ash_p: float = 0.1,
                  ash_fill: float = 1.0, head: LinearHead | None = None) -> EpistemicEstimator:
    """Fit an estimator on in-domain validation data.

    ``mahalanobis`` estimates class means and one pooled within-class
    covariance (maximum-likelihood normalisation) plus a ridge of
    ``1e-6 * trace / d`` on the diagonal. ``knn`` stores every validation
    feature vector. ``ash`` only records its settings and the head.
    """
    if kind not in KINDS:
        raise InputError(f"unknown estimator kind {kind!r}; expected one of {KINDS}")
    if np.any(validation.labels > validation.c):
        raise FitError("estimator must be fitted on in-domain data (found label c+1)")
    if kind in ("maxlogit",):
        return EpistemicEstimator(kind)
    if kind == "passthrough":
        if validation.u is None:
            raise FitError("passthrough estimator needs a 'u' column in the validation data")
        return EpistemicEstimator(kind)
    if validation.features is None:
        raise FitError(f"{kind} estimator needs feature columns in the validation data")
    phi = validation.features

    if kind == "mahalanobis":
        c, d = validation.c, phi.shape[1]
        means = np.empty((c, d))
        centered = np.empty_like(phi)
        for j in range(c):
            mask = validation.labels == j + 1
            if not np.any(mask):
                raise FitError(f"class {j + 1} has no validation examples; cannot estimate its mean")
            means[j] = phi[mask].mean(axis=0)
            centered[mask] = phi[mask] - means[j]
        scatter = centered.T @ centered / phi.shape[0]
        scatter = (scatter + scatter.T) / 2
        ridge = RIDGE_SCALE * float(np.trace(scatter)) / d
        if not ridge > 0:
            ridge = RIDGE_FLOOR
        cov = scatter + ridge * np.eye(d)
        return EpistemicEstimator(kind, {"means": means, "covariance": cov, "ridge": ridge})

    if kind == "knn":
        if k < 1:
            raise InputError("k must be a positive integer")
        if k > phi.shape[0]:
            raise FitError(f"k={k} exceeds the {phi.shape[0]} validation vectors")
        return EpistemicEstimator(kind, {"k": int(k), "reference": np.array(phi, dtype=float)})

    # ash
    if head is None:
        raise FitError("ash estimator needs the classifier's linear head")
    if not 0 < ash_p < 1:
        raise InputError("ash keep-fraction must lie in (0, 1)")
    if head.d_feat != phi.shape[1] or head.c != validation.c:
        raise FitError(
            f"linear head is {head.c}x{head.d_feat}, data has c={validation.c}, d_feat={phi.shape[1]}"
        )
    return EpistemicEstimator(kind, {"p": float(ash_p), "fill": float(ash_fill), "head": head})
