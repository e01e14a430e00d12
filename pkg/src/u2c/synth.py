"""Deterministic synthetic in/out-of-distribution benchmark.

In-domain inputs come from class-conditional Gaussians with a shared
covariance; labels are the generating class except with probability ``eta``,
when they are drawn uniformly from the other classes. Out-domain inputs come
from one extra Gaussian and are labelled ``c + 1``. Logits are a linear head
applied to the features (by default the Bayes-optimal head for ``eta = 0``).

Randomness is counter-based (Philox): record ``i`` of a split always reads
the same block of the stream, so any index range can be generated on its
own and matches a full sequential run bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from .data_model import Dataset, LinearHead
from .errors import InputError

SPLIT_IDS = {"train-val": 0, "test-in": 1, "out-domain": 2}
# uniforms per record: class, flip, replacement class, u-negation, then d normals
_FIXED_SLOTS = 4


class ConfigError(InputError):
    pass


def _triangle_means(side: float) -> np.ndarray:
    r = side / math.sqrt(3.0)
    angles = np.deg2rad([90.0, 210.0, 330.0])
    return np.stack([r * np.cos(angles), r * np.sin(angles)], axis=1)


@dataclass(frozen=True)
class SynthConfig:
    c: int = 3
    d: int = 2
    means: tuple = ()
    cov: tuple = ()
    out_mean: tuple = ()
    out_cov: tuple = ()
    eta: float = 0.2
    class_weights: tuple = ()
    head: LinearHead | None = None
    n_val: int = 10000
    n_test: int = 10000
    n_out: int = 10000
    seed: int = 0
    logit_scale: float = 1.0
    # "maha" writes true-model Mahalanobis scores to the u column;
    # misspec_fraction of them are then negated
    u_mode: str | None = None
    misspec_fraction: float = 0.0

    def __post_init__(self):
        if not self.means:
            if (self.c, self.d) != (3, 2):
                raise ConfigError("default means exist only for c=3, d=2")
            object.__setattr__(self, "means", tuple(map(tuple, _triangle_means(6.0))))
        if not self.cov:
            object.__setattr__(self, "cov", tuple(map(tuple, np.eye(self.d))))
        if not self.out_mean:
            centroid = np.mean(np.asarray(self.means, dtype=float), axis=0)
            object.__setattr__(self, "out_mean", tuple(centroid + 10.0))
        if not self.out_cov:
            object.__setattr__(self, "out_cov", tuple(map(tuple, 4.0 * np.eye(self.d))))
        if not self.class_weights:
            object.__setattr__(self, "class_weights", tuple([1.0 / self.c] * self.c))
        self.validate()

    # numpy views
    @property
    def means_a(self) -> np.ndarray:
        return np.asarray(self.means, dtype=float)

    @property
    def cov_a(self) -> np.ndarray:
        return np.asarray(self.cov, dtype=float)

    @property
    def out_mean_a(self) -> np.ndarray:
        return np.asarray(self.out_mean, dtype=float)

    @property
    def out_cov_a(self) -> np.ndarray:
        return np.asarray(self.out_cov, dtype=float)

    @property
    def weights_a(self) -> np.ndarray:
        return np.asarray(self.class_weights, dtype=float)

    def validate(self) -> None:
        if self.c < 2:
            raise ConfigError("need at least two classes")
        if self.means_a.shape != (self.c, self.d):
            raise ConfigError(f"means must be {self.c}x{self.d}")
        if len({tuple(m) for m in self.means}) != self.c:
            raise ConfigError("class means must be distinct")
        for name, cov in (("cov", self.cov_a), ("out_cov", self.out_cov_a)):
            if cov.shape != (self.d, self.d) or not np.allclose(cov, cov.T, rtol=0, atol=0):
                raise ConfigError(f"{name} must be a symmetric {self.d}x{self.d} matrix")
            if np.linalg.eigvalsh(cov).min() <= 0:
                raise ConfigError(f"{name} must be positive definite")
        if self.out_mean_a.shape != (self.d,):
            raise ConfigError(f"out_mean must have {self.d} entries")
        if not 0 <= self.eta < 0.5:
            raise ConfigError("eta must lie in [0, 0.5)")
        w = self.weights_a
        if w.shape != (self.c,) or np.any(w <= 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-12):
            raise ConfigError("class_weights must be c positive numbers summing to 1")
        if self.head is not None and (self.head.c, self.head.d_feat) != (self.c, self.d):
            raise ConfigError("head dimensions do not match c and d")
        if min(self.n_val, self.n_test, self.n_out) < 0:
            raise ConfigError("sample counts must be non-negative")
        if self.u_mode not in (None, "maha"):
            raise ConfigError(f"unknown u_mode {self.u_mode!r}")
        if not 0 <= self.misspec_fraction <= 1:
            raise ConfigError("misspec_fraction must lie in [0, 1]")

    def bayes_head(self) -> LinearHead:
        """Linear discriminant: exact class log-posteriors (up to a shared
        constant) for the noise-free mixture."""
        prec = np.linalg.inv(self.cov_a)
        w = self.means_a @ prec
        b = -0.5 * np.einsum("ij,ij->i", w, self.means_a) + np.log(self.weights_a)
        return LinearHead(w, b)

    def classifier(self) -> LinearHead:
        return self.head if self.head is not None else self.bayes_head()

    def to_dict(self) -> dict:
        d = {
            "c": self.c, "d": self.d,
            "means": self.means_a.tolist(), "cov": self.cov_a.tolist(),
            "out_mean": self.out_mean_a.tolist(), "out_cov": self.out_cov_a.tolist(),
            "eta": self.eta, "class_weights": self.weights_a.tolist(),
            "head": self.classifier().to_dict(),
            "n_val": self.n_val, "n_test": self.n_test, "n_out": self.n_out,
            "seed": self.seed, "logit_scale": self.logit_scale,
            "u_mode": self.u_mode, "misspec_fraction": self.misspec_fraction,
        }
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        data = dict(data)
        head = data.pop("head", None)
        for key in ("means", "cov", "out_cov"):
            if key in data:
                data[key] = tuple(map(tuple, data[key]))
        for key in ("out_mean", "class_weights"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(head=LinearHead.from_dict(head) if head is not None else None, **data)


def default_config(**overrides) -> SynthConfig:
    return replace(SynthConfig(), **overrides)


def misspecified_config(**overrides) -> SynthConfig:
    """Scores are true-model Mahalanobis distances with 30% of them negated,
    a u that disagrees with where the data actually is. The out-domain cloud
    sits at the centroid shifted by (3, 3) so that it overlaps the classes
    and every region receives out-domain mass."""
    base = dict(u_mode="maha", misspec_fraction=0.3, out_mean=(3.0, 3.0))
    base.update(overrides)
    return default_config(**base)


def overconfident_config(**overrides) -> SynthConfig:
    """Noise-free labels, so the Bayes head is calibrated at temperature 1,
    with every logit then multiplied by 5."""
    base = dict(logit_scale=5.0, eta=0.0)
    base.update(overrides)
    return default_config(**base)


# ----------------------------------------------------------------- generation


def _blocks_per_record(cfg: SynthConfig) -> int:
    return -(-(_FIXED_SLOTS + cfg.d) // 4)


def _uniforms(cfg: SynthConfig, split: str, start: int, stop: int) -> np.ndarray:
    """Uniforms in (0, 1) for records ``start..stop-1``; row i depends only on
    (seed, split, i)."""
    blocks = _blocks_per_record(cfg)
    gen = np.random.Philox(key=[cfg.seed, SPLIT_IDS[split]], counter=[start * blocks, 0, 0, 0])
    raw = gen.random_raw((stop - start) * 4 * blocks).reshape(stop - start, 4 * blocks)
    return ((raw >> np.uint64(11)).astype(float) + 0.5) * 2.0 ** -53


@dataclass(frozen=True)
class SplitSample:
    """A generated split together with its latent generating class."""

    dataset: Dataset
    true_class: np.ndarray  # 1-based; c+1 for out-domain
    features: np.ndarray


def true_mahalanobis(cfg: SynthConfig, x: np.ndarray) -> np.ndarray:
    prec = np.linalg.inv(cfg.cov_a)
    d2 = np.stack([np.einsum("ij,jk,ik->i", x - mu, prec, x - mu) for mu in cfg.means_a], axis=1)
    return np.sqrt(np.min(d2, axis=1))


def generate_split(cfg: SynthConfig, split: str, start: int = 0, stop: int | None = None) -> SplitSample:
    if split not in SPLIT_IDS:
        raise ConfigError(f"synthetic splits are {tuple(SPLIT_IDS)}")
    n_total = {"train-val": cfg.n_val, "test-in": cfg.n_test, "out-domain": cfg.n_out}[split]
    stop = n_total if stop is None else stop
    if not 0 <= start <= stop <= n_total:
        raise ConfigError(f"record range [{start}, {stop}) outside 0..{n_total}")
    n = stop - start
    uni = _uniforms(cfg, split, start, stop)
    normals = ndtri(uni[:, _FIXED_SLOTS:_FIXED_SLOTS + cfg.d])
    c = cfg.c
    if split == "out-domain":
        true_class = np.full(n, c + 1, dtype=np.int64)
        x = cfg.out_mean_a + normals @ np.linalg.cholesky(cfg.out_cov_a).T
        labels = true_class.copy()
    else:
        cum = np.cumsum(cfg.weights_a)
        cum[-1] = 1.0
        k = np.minimum(np.searchsorted(cum, uni[:, 0], side="right"), c - 1)
        true_class = k + 1
        x = cfg.means_a[k] + normals @ np.linalg.cholesky(cfg.cov_a).T
        flip = uni[:, 1] < cfg.eta
        other = np.minimum(np.floor(uni[:, 2] * (c - 1)).astype(np.int64), c - 2)
        other = other + (other >= k)  # skip the generating class
        labels = np.where(flip, other + 1, true_class)
    logits = cfg.classifier()(x) * cfg.logit_scale
    u = None
    if cfg.u_mode == "maha":
        u = true_mahalanobis(cfg, x)
        u = np.where(uni[:, 3] < cfg.misspec_fraction, -u, u)
    ids = [f"{split}-{i:06d}" for i in range(start, stop)]
    ds = Dataset(c, split, ids, labels, logits, x, u)
    return SplitSample(ds, true_class, x)


def generate(cfg: SynthConfig) -> dict[str, Dataset]:
    """The three splits ``train-val``, ``test-in`` and ``out-domain``."""
    return {split: generate_split(cfg, split).dataset for split in SPLIT_IDS}


def write_benchmark(cfg: SynthConfig, out_dir) -> dict[str, Path]:
    """Write the three CSVs, ``config.json`` and a ``manifest.json``."""
    from .data_model import ManifestEntry, save_dataset, write_manifest

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    entries = []
    for split, ds in generate(cfg).items():
        p = out / f"{split}.csv"
        save_dataset(ds, p)
        paths[split] = p
        entries.append(ManifestEntry(p, split, "validation" if split == "train-val" else "evaluation"))
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    paths["config"] = cfg_path
    write_manifest(entries, out / "manifest.json", relative_to=out)
    paths["manifest"] = out / "manifest.json"
    return paths


def random_config(rng: np.random.Generator, n: int = 400) -> SynthConfig:
    """A random but valid small configuration, for property checks."""
    c = int(rng.integers(2, 6))
    d = int(rng.integers(2, 5))
    means = rng.normal(0.0, 3.0, (c, d))
    a = rng.normal(0.0, 1.0, (d, d))
    cov = a @ a.T / d + 0.5 * np.eye(d)
    cov = (cov + cov.T) / 2
    return SynthConfig(
        c=c, d=d, means=tuple(map(tuple, means)), cov=tuple(map(tuple, cov)),
        out_mean=tuple(rng.normal(0.0, 6.0, d)), out_cov=tuple(map(tuple, 3.0 * np.eye(d))),
        eta=float(rng.uniform(0.0, 0.4)), n_val=n, n_test=n, n_out=n,
        seed=int(rng.integers(0, 2**31)), logit_scale=float(rng.uniform(0.5, 4.0)),
    )
