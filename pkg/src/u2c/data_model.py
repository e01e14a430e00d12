"""Records, datasets and the CSV/manifest formats they travel in.

Labels are 1-based everywhere a caller can see them: in-domain classes are
``1..c`` and the abstention (out-domain) class is ``c + 1``.

CSV layout (header mandatory, columns located by name)::

    id,label,logit_0,...,logit_{c-1}[,feat_0,...,feat_{d-1}][,u]

Out-domain files may omit ``label``; every row then gets ``c + 1``.
"""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import CompatibilityError, DataError, SchemaError

SPLITS = ("train-val", "test-in", "covariate-shift", "out-domain")
IN_DOMAIN_SPLITS = ("train-val", "test-in", "covariate-shift")
ROLES = ("validation", "evaluation")

_NUMBER = re.compile(r"^[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?$")
_NON_FINITE = {"nan", "+nan", "-nan", "inf", "+inf", "-inf", "infinity", "+infinity", "-infinity"}
_LABEL = re.compile(r"^[+]?\d+$")


def format_float(x: float) -> str:
    # 17 significant digits always round-trips an IEEE double
    return format(float(x), ".17g")


@dataclass(frozen=True)
class Record:
    id: str
    label: int
    logits: np.ndarray
    features: np.ndarray | None = None
    u_score: float | None = None


@dataclass(frozen=True)
class LinearHead:
    """Affine map from representation space to the ``c`` logits."""

    weights: np.ndarray  # (c, d)
    bias: np.ndarray  # (c,)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        b = np.array(self.bias, dtype=float)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise SchemaError(f"linear head shape mismatch: weights {w.shape}, bias {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise DataError("linear head has non-finite parameters")
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def c(self) -> int:
        return self.weights.shape[0]

    @property
    def d_feat(self) -> int:
        return self.weights.shape[1]

    def __call__(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=float) @ self.weights.T + self.bias

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "LinearHead":
        return cls(np.asarray(data["weights"], dtype=float), np.asarray(data["bias"], dtype=float))

    def __eq__(self, other):
        if not isinstance(other, LinearHead):
            return NotImplemented
        return np.array_equal(self.weights, other.weights) and np.array_equal(self.bias, other.bias)


def _frozen(a: np.ndarray | None) -> np.ndarray | None:
    if a is not None:
        a.flags.writeable = False
    return a


class Dataset:
    """Immutable, column-oriented collection of records sharing ``c`` and ``d_feat``.

    Iterating or indexing yields :class:`Record` views; the numeric columns
    are also exposed directly as read-only arrays for vectorised work.
    """

    def __init__(
        self,
        c: int,
        split: str,
        ids: Sequence[str],
        labels,
        logits,
        features=None,
        u=None,
    ):
        if split not in SPLITS:
            raise SchemaError(f"unknown split {split!r}; expected one of {SPLITS}")
        if c < 1:
            raise SchemaError("class count must be >= 1")
        labels = np.array(labels, dtype=np.int64).reshape(-1)
        logits = np.array(logits, dtype=float)
        n = labels.shape[0]
        if logits.ndim == 1 and n == 0:
            logits = logits.reshape(0, c)
        if logits.shape != (n, c):
            raise SchemaError(f"logits must have shape ({n}, {c}), got {logits.shape}")
        if len(ids) != n:
            raise SchemaError(f"{len(ids)} ids for {n} records")
        if features is not None:
            features = np.array(features, dtype=float)
            if features.ndim != 2 or features.shape[0] != n:
                raise SchemaError(f"features must have shape ({n}, d), got {features.shape}")
        if u is not None:
            u = np.array(u, dtype=float).reshape(-1)
            if u.shape[0] != n:
                raise SchemaError(f"u must have {n} entries, got {u.shape[0]}")

        _check_finite(logits, "logits", ids)
        if features is not None:
            _check_finite(features, "features", ids)
        if u is not None:
            _check_finite(u.reshape(-1, 1), "u", ids)
        bad = np.flatnonzero((labels < 1) | (labels > c + 1))
        if bad.size:
            i = int(bad[0])
            raise DataError(f"row {i + 1} (id {ids[i]!r}): label {labels[i]} outside 1..{c + 1}")
        if split == "out-domain" and np.any(labels != c + 1):
            i = int(np.flatnonzero(labels != c + 1)[0])
            raise DataError(f"row {i + 1} (id {ids[i]!r}): out-domain records must carry label {c + 1}")

        self.c = int(c)
        self.split = split
        self.ids = tuple(str(s) for s in ids)
        self.labels = _frozen(labels)
        self.logits = _frozen(logits)
        self.features = _frozen(features)
        self.u = _frozen(u)

    @property
    def d_feat(self) -> int | None:
        return None if self.features is None else self.features.shape[1]

    @property
    def has_features(self) -> bool:
        return self.features is not None

    @property
    def is_out_domain(self) -> bool:
        return self.split == "out-domain"

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __getitem__(self, i: int) -> Record:
        return Record(
            id=self.ids[i],
            label=int(self.labels[i]),
            logits=self.logits[i],
            features=None if self.features is None else self.features[i],
            u_score=None if self.u is None else float(self.u[i]),
        )

    def __iter__(self) -> Iterator[Record]:
        return (self[i] for i in range(len(self)))

    @property
    def records(self) -> list[Record]:
        return list(self)

    def replace(self, **changes) -> "Dataset":
        fields = dict(
            c=self.c, split=self.split, ids=self.ids, labels=self.labels,
            logits=self.logits, features=self.features, u=self.u,
        )
        fields.update(changes)
        return Dataset(**fields)

    @classmethod
    def from_records(cls, records: Sequence[Record], c: int, split: str) -> "Dataset":
        records = list(records)
        has_feat = {r.features is not None for r in records}
        has_u = {r.u_score is not None for r in records}
        if len(has_feat) > 1 or len(has_u) > 1:
            raise SchemaError("records disagree on which optional fields are present")
        feats = None
        if records and records[0].features is not None:
            dims = {len(r.features) for r in records}
            if len(dims) != 1:
                raise SchemaError(f"feature dimension differs across records: {sorted(dims)}")
            feats = np.array([r.features for r in records], dtype=float)
        u = np.array([r.u_score for r in records], dtype=float) if records and records[0].u_score is not None else None
        logits = np.array([r.logits for r in records], dtype=float).reshape(len(records), c) if records else np.zeros((0, c))
        return cls(c, split, [r.id for r in records], [r.label for r in records], logits, feats, u)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.c == other.c
            and self.split == other.split
            and self.ids == other.ids
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.logits, other.logits)
            and _opt_equal(self.features, other.features)
            and _opt_equal(self.u, other.u)
        )

    def __repr__(self):
        return f"Dataset(split={self.split!r}, n={len(self)}, c={self.c}, d_feat={self.d_feat}, u={'yes' if self.u is not None else 'no'})"


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


def _check_finite(a: np.ndarray, name: str, ids) -> None:
    bad = np.argwhere(~np.isfinite(a))
    if bad.size:
        i, j = (int(v) for v in bad[0])
        raise DataError(f"row {i + 1} (id {ids[i]!r}): non-finite value in {name}[{j}]")


# --------------------------------------------------------------------------- CSV


def _parse_float(text: str, row: int, col: str) -> float:
    s = text.strip()
    if _NUMBER.match(s):
        return float(s)
    if s.lower() in _NON_FINITE:
        raise DataError(f"row {row}: non-finite value {text!r} in column {col!r}")
    raise DataError(f"row {row}: cannot parse {text!r} in column {col!r} as a decimal number")


def _indexed_columns(header: list[str], prefix: str) -> list[int]:
    found = {}
    for pos, name in enumerate(header):
        if name.startswith(prefix):
            suffix = name[len(prefix):]
            if not suffix.isdigit():
                raise SchemaError(f"bad column name {name!r}")
            found[int(suffix)] = pos
    if sorted(found) != list(range(len(found))):
        raise SchemaError(f"{prefix}* columns must be numbered 0..n-1 without gaps, got {sorted(found)}")
    return [found[j] for j in range(len(found))]


def parse_dataset(text: str, split: str | None = None, c: int | None = None,
                  d_feat: int | None = None, source: str = "<string>") -> Dataset:
    """Parse CSV text into a validated :class:`Dataset`.

    ``c`` and ``d_feat``, when given, are the expected dimensions; a file
    declaring different ones is a schema error. ``split=None`` infers
    ``out-domain`` when the label column is absent or every label is
    ``c + 1``, and ``test-in`` otherwise.
    """
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError(f"{source}: empty file, header required") from None
    known = {"id", "label", "u"}
    for name in header:
        if name not in known and not name.startswith(("logit_", "feat_")):
            raise SchemaError(f"{source}: unknown column {name!r}")
    if len(set(header)) != len(header):
        raise SchemaError(f"{source}: duplicate column names")
    if "id" not in header:
        raise SchemaError(f"{source}: missing 'id' column")
    logit_cols = _indexed_columns(header, "logit_")
    feat_cols = _indexed_columns(header, "feat_")
    if not logit_cols:
        raise SchemaError(f"{source}: no logit_* columns")
    n_classes = len(logit_cols)
    if c is not None and c != n_classes:
        raise SchemaError(f"{source}: class count mismatch, file has {n_classes} logit columns, expected {c}")
    if d_feat is not None and feat_cols and d_feat != len(feat_cols):
        raise SchemaError(f"{source}: feature dimension mismatch, file has {len(feat_cols)}, expected {d_feat}")
    id_col = header.index("id")
    label_col = header.index("label") if "label" in header else None
    u_col = header.index("u") if "u" in header else None
    if label_col is None and split not in (None, "out-domain"):
        raise SchemaError(f"{source}: split {split!r} requires a 'label' column")

    ids, labels, logits, feats, us = [], [], [], [], []
    width = len(header)
    for row_no, row in enumerate(reader, start=1):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != width:
            raise SchemaError(f"{source}: row {row_no} has {len(row)} fields, header declares {width}")
        ids.append(row[id_col].strip())
        if label_col is None:
            labels.append(n_classes + 1)
        else:
            lab = row[label_col].strip()
            if not _LABEL.match(lab):
                raise DataError(f"{source}: row {row_no}: label {lab!r} is not a positive integer")
            lab_i = int(lab)
            if not 1 <= lab_i <= n_classes + 1:
                raise DataError(f"{source}: row {row_no}: label {lab_i} outside 1..{n_classes + 1}")
            labels.append(lab_i)
        logits.append([_parse_float(row[p], row_no, header[p]) for p in logit_cols])
        if feat_cols:
            feats.append([_parse_float(row[p], row_no, header[p]) for p in feat_cols])
        if u_col is not None:
            us.append(_parse_float(row[u_col], row_no, "u"))

    labels_a = np.array(labels, dtype=np.int64)
    if split is None:
        if label_col is None or (labels_a.size and np.all(labels_a == n_classes + 1)):
            split = "out-domain"
        elif np.any(labels_a == n_classes + 1):
            raise DataError(f"{source}: file mixes in-domain and out-domain labels; declare its split")
        else:
            split = "test-in"
    if split in IN_DOMAIN_SPLITS:
        bad = np.flatnonzero(labels_a == n_classes + 1)
        if bad.size:
            raise DataError(
                f"{source}: row {int(bad[0]) + 1}: in-domain split {split!r} cannot carry label {n_classes + 1}"
            )
    return Dataset(
        n_classes,
        split,
        ids,
        labels_a,
        np.array(logits, dtype=float).reshape(len(ids), n_classes),
        np.array(feats, dtype=float).reshape(len(ids), len(feat_cols)) if feat_cols else None,
        np.array(us, dtype=float) if u_col is not None else None,
    )


def load_dataset(path, split: str | None = None, c: int | None = None, d_feat: int | None = None) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"dataset file not found: {path}")
    # newline="" so the csv module sees raw line endings
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_dataset(fh.read(), split=split, c=c, d_feat=d_feat, source=str(path))


def dataset_to_csv(d: Dataset) -> str:
    header = ["id", "label"] + [f"logit_{j}" for j in range(d.c)]
    if d.features is not None:
        header += [f"feat_{j}" for j in range(d.d_feat)]
    if d.u is not None:
        header.append("u")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for i in range(len(d)):
        row = [d.ids[i], str(int(d.labels[i]))]
        row += [format_float(x) for x in d.logits[i]]
        if d.features is not None:
            row += [format_float(x) for x in d.features[i]]
        if d.u is not None:
            row.append(format_float(d.u[i]))
        w.writerow(row)
    return buf.getvalue()


def save_dataset(d: Dataset, path) -> None:
    Path(path).write_text(dataset_to_csv(d), encoding="utf-8")


# ---------------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    split: str
    role: str


def load_manifest(path) -> list[ManifestEntry]:
    """Read a JSON manifest: a list (or ``{"files": [...]}``) of
    ``{path, split, role}`` objects. Relative paths resolve against the
    manifest's directory."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise SchemaError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: malformed manifest JSON: {exc}") from None
    if isinstance(data, dict):
        data = data.get("files")
    if not isinstance(data, list):
        raise SchemaError(f"{path}: manifest must be a list of entries")
    entries = []
    for k, item in enumerate(data):
        if not isinstance(item, dict) or not {"path", "split", "role"} <= set(item):
            raise SchemaError(f"{path}: entry {k} needs path, split and role")
        if item["split"] not in SPLITS:
            raise SchemaError(f"{path}: entry {k}: unknown split {item['split']!r}")
        if item["role"] not in ROLES:
            raise SchemaError(f"{path}: entry {k}: unknown role {item['role']!r}")
        p = Path(item["path"])
        if not p.is_absolute():
            p = path.parent / p
        entries.append(ManifestEntry(p.resolve(), item["split"], item["role"]))
    return entries


def write_manifest(entries: Sequence[ManifestEntry], path, relative_to=None) -> None:
    base = Path(relative_to) if relative_to is not None else None
    out = []
    for e in entries:
        p = Path(e.path)
        if base is not None:
            p = p.relative_to(base)
        out.append({"path": p.as_posix(), "split": e.split, "role": e.role})
    Path(path).write_text(json.dumps(out, indent=2) + "\n", encoding="utf-8")


# ------------------------------------------------------------------ compatibility


def validate_compatibility(d: Dataset, m) -> None:
    """Raise :class:`CompatibilityError` unless model ``m`` can score ``d``."""
    if d.c != m.c:
        raise CompatibilityError(f"class count mismatch: dataset has c={d.c}, model expects c={m.c}")
    est = m.estimator
    if d.u is not None:
        return  # precomputed scores bypass the estimator inputs
    if est.kind == "passthrough":
        raise CompatibilityError("u column required: model was fitted on precomputed scores")
    if est.needs_features:
        if d.features is None:
            raise CompatibilityError(f"features required by the {est.kind} estimator")
        if d.d_feat != est.d_feat:
            raise CompatibilityError(
                f"feature dimension mismatch: dataset has d_feat={d.d_feat}, estimator expects {est.d_feat}"
            )
