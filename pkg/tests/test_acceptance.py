"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line; the lines are printed together at the
end of the pytest run (see ``conftest.py``) and when this file is executed
directly.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from u2c.calibration import (
    ExtendedLoss, fit_epistemic_calibrator_detailed, fit_model, fit_temperature, fit_threshold,
    gradient_check, relabel, temperature_nll,
)
from u2c.cli import main
from u2c.metrics import ece, evaluate, nll
from u2c.oracles import oracle_best_constant_calibrator, oracle_metrics
from u2c.predictors import rc_predict_batch, u2c_predict_batch
from u2c.regions import region_masses, verify_ece_lemmas, verify_lemma1, verify_lemma2
from u2c.synth import default_config, generate, misspecified_config, overconfident_config, random_config

from test_metrics import random_predictions

RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {detail}"
    print(RESULTS[n])
    assert ok, detail


def test_criterion_01_error_identity_exact(default_bench):
    start = time.perf_counter()
    worst = 0.0
    model, _ = fit_model(default_bench["train-val"], "mahalanobis")
    res = verify_lemma1(model, default_bench["test-in"], default_bench["out-domain"])
    worst = max(worst, abs(res.residual_out), abs(res.residual_in))
    rng = np.random.default_rng(2024)
    kinds = ("maxlogit", "mahalanobis", "knn")
    for i in range(20):
        bench = generate(random_config(rng, n=400))
        m, _ = fit_model(bench["train-val"], kinds[i % 3], iterations=300)
        res = verify_lemma1(m, bench["test-in"], bench["out-domain"])
        worst = max(worst, abs(res.residual_out), abs(res.residual_in))
    elapsed = time.perf_counter() - start
    record(1, worst <= 1e-12 and elapsed <= 10.0,
           f"max error-identity residual {worst:.1e} (<= 1e-12) over default + 20 random configs, {elapsed:.1f}s (<= 10s)")


def test_criterion_02_nll_identity(default_bench, default_fit):
    model, _ = default_fit
    table = verify_lemma2(model, default_bench["test-in"], default_bench["out-domain"])
    gaps = [abs(v["closed_form"] - v["metrics"]) for v in table["u2c"].values()]
    finite = all(not nll(u2c_predict_batch(model, d), d.labels).infinite for d in default_bench.values())
    rc_out = table["rc_by_region"]["out"]
    pattern = all(rc_out[r] in (None, 0.0) for r in "CD") and all(rc_out[r] in (None, math.inf) for r in "AB")
    record(2, max(gaps) <= 1e-9 and finite and pattern,
           f"U2C nll closed form vs metrics gap {max(gaps):.1e} (<= 1e-9); RC out-domain nll 0 on C/D, inf on A/B; "
           f"U2C nll finite on all splits: {finite}")


def test_criterion_03_region_ece_expressions(default_bench, default_fit):
    model, _ = default_fit
    table = verify_ece_lemmas(model, default_bench["test-in"], default_bench["out-domain"])
    checked = {k: v for k, v in table.items() if v["n"]}
    gap = max(abs(v["closed_form"] - v["direct"]) for v in checked.values())
    record(3, gap <= 1e-9 and len(table) >= 8,
           f"{len(table)} region expressions ({len(checked)} on non-empty regions), max gap {gap:.1e} (<= 1e-9)")


def test_criterion_04_threshold_and_relabel(default_bench, default_fit):
    model, log = default_fit
    val = default_bench["train-val"]
    u = model.estimator.score_dataset(val)
    m = len(val)
    distinct = np.unique(u).size == m
    relabeled = relabel(val, model.estimator, fit_threshold(u, 0.95))
    count = int(np.count_nonzero(relabeled.labels == val.c + 1))
    p_d = region_masses(model, val).masses["D"]
    expected = m - math.ceil(0.95 * m)
    record(4, distinct and count == expected == log.relabeled and p_d <= 0.10,
           f"relabeled {count} of {m} (expected {expected}); validation P(D) = {p_d:.4f} (<= 0.10)")


def test_criterion_05_temperature_improves():
    val = generate(overconfident_config())["train-val"]
    tau = fit_temperature(val)
    at_tau, at_one = temperature_nll(val.logits, val.labels, tau), temperature_nll(val.logits, val.labels, 1.0)
    record(5, at_tau < at_one - 1e-6,
           f"overconfident preset: nll {at_tau:.6f} at tau={tau:.4f} vs {at_one:.6f} at tau=1 (improvement > 1e-6)")


def test_criterion_06_gradients(default_bench, default_fit):
    model, _ = default_fit
    val = default_bench["train-val"]
    u = model.estimator.score_dataset(val)
    relabeled = relabel(val, model.estimator, model.theta)
    worst = {}
    for form in ("linear", "mlp"):
        cal, _ = fit_epistemic_calibrator_detailed(relabeled, model.tau, model.estimator, form, iterations=50)
        loss = ExtendedLoss(relabeled.logits / model.tau, relabeled.labels, cal.standardize(u))
        worst[form] = gradient_check(cal, loss, n_points=10, seed=11)
    record(6, max(worst.values()) < 1e-4,
           f"max relative gradient error linear {worst['linear']:.1e}, mlp {worst['mlp']:.1e} (< 1e-4, 10 points each)")


def test_criterion_07_fit_quality(default_bench, default_fit):
    model, log = default_fit
    relabeled = relabel(default_bench["train-val"], model.estimator, model.theta)
    _, oracle = oracle_best_constant_calibrator(relabeled, model.tau)
    ok = log.final_loss <= oracle + 1e-9 and log.final_loss <= log.linear_loss + 1e-9
    record(7, ok, f"mlp loss {log.final_loss:.6f}, linear {log.linear_loss:.6f}, "
                  f"best-constant oracle {oracle:.6f}")


def test_criterion_08_metrics_oracle():
    rng = np.random.default_rng(8)
    worst = 0.0
    flags = True
    for _ in range(1000):
        preds, labels = random_predictions(rng)
        a, b = evaluate(preds, labels, 15), oracle_metrics(preds, labels, 15)
        worst = max(worst, abs(a.err - b.err), abs(a.ece - b.ece))
        flags &= a.nll_infinite == b.nll_infinite
        if b.nll is not None:
            worst = max(worst, abs(a.nll - b.nll))
        else:
            flags &= a.nll is None
    one_bin = True
    for _ in range(100):
        preds, labels = random_predictions(rng)
        gap = abs(np.mean(preds.predicted == labels) - np.mean(preds.confidence))
        one_bin &= ece(preds, labels, 1) == gap
    record(8, worst <= 1e-12 and flags and one_bin,
           f"1000 random sets: max |library - oracle| {worst:.1e} (<= 1e-12); one-bin ece exact: {one_bin}")


def test_criterion_09_misspecified_contrast():
    start = time.perf_counter()
    bench = generate(misspecified_config())
    model, _ = fit_model(bench["train-val"], "passthrough")
    d_out = bench["out-domain"]
    res = verify_lemma1(model, bench["test-in"], d_out)
    p = res.masses_out.masses
    delta = res.err_out_rc - res.err_out_u2c
    nll_rc = nll(rc_predict_batch(model, d_out), d_out.labels)
    nll_u2c = nll(u2c_predict_batch(model, d_out), d_out.labels)
    elapsed = time.perf_counter() - start
    ok = (abs(delta - (p["B"] - p["C"])) <= 1e-12 and np.sign(delta) == np.sign(p["B"] - p["C"])
          and p["B"] > 0 and p["C"] > 0 and nll_rc.infinite and not nll_u2c.infinite and elapsed <= 30)
    record(9, ok,
           f"out-domain err(RC) - err(U2C) = {delta:+.4f} = P(B) - P(C) = {p['B']:.4f} - {p['C']:.4f}; "
           f"nll RC inf, U2C {nll_u2c.value:.3f}; {elapsed:.1f}s (<= 30s)")


def _snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_determinism(tmp_path):
    snaps = []
    for name in ("first", "second"):
        root = tmp_path / name
        codes = [main(["synth", "--out", str(root / "data"), "--seed", "0"])]
        codes.append(main(["fit", "--val", str(root / "data" / "train-val.csv"), "--estimator", "mahalanobis",
                           "--seed", "0", "--out", str(root / "model.json")]))
        inputs = ["--model", str(root / "model.json"), "--manifest", str(root / "data" / "manifest.json")]
        codes.append(main(["eval", *inputs, "--out", str(root / "eval")]))
        codes.append(main(["verify", *inputs, "--out", str(root / "verify")]))
        assert codes == [0, 0, 0, 0]
        snaps.append(_snapshot(root))
    same = snaps[0] == snaps[1]
    record(10, same, f"synth -> fit -> eval -> verify twice: {len(snaps[0])} files, byte-identical: {same}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
