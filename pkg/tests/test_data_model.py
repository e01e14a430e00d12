from __future__ import annotations

import json

import numpy as np
import pytest

from u2c.calibration import CalibratedModel, constant_calibrator
from u2c.data_model import (
    Dataset, LinearHead, ManifestEntry, Record, dataset_to_csv, load_dataset, load_manifest,
    parse_dataset, save_dataset, validate_compatibility, write_manifest,
)
from u2c.epistemic import EpistemicEstimator
from u2c.errors import CompatibilityError, DataError, SchemaError

CSV = """id,label,logit_0,logit_1,feat_0,u
a,1,0.5,-1.25,3,0.1
b,2,1e-3,2.5E+1,-4.0,0.2
"""


def test_parse_basic_columns():
    d = parse_dataset(CSV)
    assert d.split == "test-in" and d.c == 2 and d.d_feat == 1
    assert d.ids == ("a", "b")
    np.testing.assert_array_equal(d.labels, [1, 2])
    np.testing.assert_array_equal(d.logits, [[0.5, -1.25], [1e-3, 25.0]])
    np.testing.assert_array_equal(d.u, [0.1, 0.2])


def test_columns_located_by_name_not_position():
    shuffled = "u,logit_1,id,logit_0,label\n0.3,2,x,1,2\n"
    d = parse_dataset(shuffled)
    np.testing.assert_array_equal(d.logits, [[1.0, 2.0]])
    assert d.u[0] == 0.3 and d.labels[0] == 2


def test_csv_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(50, 3)) * 1e3
    feats = rng.normal(size=(50, 4)) / 7
    d = Dataset(3, "train-val", [f"i{k}" for k in range(50)], rng.integers(1, 4, 50), logits, feats,
                rng.random(50))
    p = tmp_path / "d.csv"
    save_dataset(d, p)
    back = load_dataset(p, split="train-val")
    assert back == d
    assert dataset_to_csv(back) == p.read_text()


@pytest.mark.parametrize("value", ["nan", "inf", "-Infinity", "NaN"])
def test_non_finite_values_name_row_and_column(value):
    text = f"id,label,logit_0,logit_1\na,1,0,{value}\n"
    with pytest.raises(DataError, match=r"row 1.*logit_1"):
        parse_dataset(text)


@pytest.mark.parametrize("value", ["1_000", "1,000", "0x10", "1.2.3", ""])
def test_malformed_numbers_rejected(value):
    text = f'id,label,logit_0,logit_1\na,1,0,"{value}"\n'
    with pytest.raises(DataError):
        parse_dataset(text)


def test_unknown_column_rejected():
    with pytest.raises(SchemaError, match="unknown column"):
        parse_dataset("id,label,logit_0,weight\na,1,0,1\n")


def test_gap_in_logit_columns_rejected():
    with pytest.raises(SchemaError):
        parse_dataset("id,label,logit_0,logit_2\na,1,0,1\n")


def test_declared_class_count_mismatch():
    with pytest.raises(SchemaError, match="class count mismatch"):
        parse_dataset(CSV, c=3)


def test_ragged_row_rejected():
    with pytest.raises(SchemaError, match="row 1"):
        parse_dataset("id,label,logit_0\na,1\n")


@pytest.mark.parametrize("label", ["0", "4", "-1", "1.0"])
def test_label_range(label):
    with pytest.raises(DataError):
        parse_dataset(f"id,label,logit_0,logit_1\na,{label},0,1\n")


def test_split_inference():
    assert parse_dataset("id,logit_0,logit_1\na,0,1\n").split == "out-domain"
    assert parse_dataset("id,label,logit_0,logit_1\na,3,0,1\nb,3,1,0\n").split == "out-domain"
    with pytest.raises(DataError, match="mixes"):
        parse_dataset("id,label,logit_0,logit_1\na,3,0,1\nb,1,1,0\n")


def test_in_domain_split_refuses_abstention_label():
    with pytest.raises(DataError, match="cannot carry label 3"):
        parse_dataset("id,label,logit_0,logit_1\na,3,0,1\n", split="train-val")


def test_out_domain_dataset_requires_abstention_label():
    with pytest.raises(DataError):
        Dataset(2, "out-domain", ["a"], [1], [[0.0, 1.0]])


def test_dataset_is_immutable():
    d = parse_dataset(CSV)
    with pytest.raises(ValueError):
        d.logits[0, 0] = 9.0
    assert d.replace(labels=[2, 1]).labels.tolist() == [2, 1]
    assert d.labels.tolist() == [1, 2]


def test_records_view_and_from_records():
    d = parse_dataset(CSV)
    recs = list(d)
    assert isinstance(recs[0], Record) and recs[0].id == "a" and recs[1].u_score == 0.2
    assert Dataset.from_records(recs, 2, "test-in") == d


def test_linear_head_round_trip():
    h = LinearHead([[1.0, 2.0], [3.0, 4.0]], [0.5, -0.5])
    np.testing.assert_allclose(h(np.array([[1.0, 1.0]])), [[3.5, 6.5]])
    assert LinearHead.from_dict(json.loads(json.dumps(h.to_dict()))) == h


def test_manifest_round_trip(tmp_path):
    for name in ("va.csv", "te.csv"):
        (tmp_path / name).write_text(CSV)
    entries = [ManifestEntry(tmp_path / "va.csv", "train-val", "validation"),
               ManifestEntry(tmp_path / "te.csv", "test-in", "evaluation")]
    write_manifest(entries, tmp_path / "m.json", relative_to=tmp_path)
    assert json.loads((tmp_path / "m.json").read_text())[0]["path"] == "va.csv"
    back = load_manifest(tmp_path / "m.json")
    assert [(e.path, e.split, e.role) for e in back] == [(e.path.resolve(), e.split, e.role) for e in entries]


@pytest.mark.parametrize("content", ['{"files": 3}', '[{"path": "a"}]', "not json",
                                     '[{"path": "a", "split": "weird", "role": "validation"}]'])
def test_manifest_errors(tmp_path, content):
    (tmp_path / "m.json").write_text(content)
    with pytest.raises(SchemaError):
        load_manifest(tmp_path / "m.json")


def _model(kind="maxlogit", c=2, params=None):
    return CalibratedModel(c, 1.0, 0.0, constant_calibrator(0.0), EpistemicEstimator(kind, params or {}))


def test_compatibility_messages():
    d = parse_dataset("id,label,logit_0,logit_1\na,1,0,1\n")
    with pytest.raises(CompatibilityError, match="class count mismatch"):
        validate_compatibility(d, _model(c=3))
    with pytest.raises(CompatibilityError, match="u column required"):
        validate_compatibility(d, _model("passthrough"))
    knn = _model("knn", params={"k": 1, "reference": np.zeros((2, 3))})
    with pytest.raises(CompatibilityError, match="features required by the knn estimator"):
        validate_compatibility(d, knn)
    d2 = parse_dataset("id,label,logit_0,logit_1,feat_0\na,1,0,1,2\n")
    with pytest.raises(CompatibilityError, match="feature dimension mismatch"):
        validate_compatibility(d2, knn)
    validate_compatibility(d2.replace(u=[0.5]), knn)  # a u column bypasses the estimator inputs
