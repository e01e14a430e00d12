from __future__ import annotations

import numpy as np
import pytest

from u2c.calibration import fit_model
from u2c.data_model import Dataset
from u2c.synth import default_config, generate, misspecified_config


@pytest.fixture(scope="session")
def default_bench():
    return generate(default_config())


@pytest.fixture(scope="session")
def default_fit(default_bench):
    """Mahalanobis model on the default benchmark, with its fit log."""
    return fit_model(default_bench["train-val"], "mahalanobis")


@pytest.fixture(scope="session")
def small_bench():
    return generate(default_config(n_val=1000, n_test=1000, n_out=1000, seed=3))


@pytest.fixture(scope="session")
def small_fit(small_bench):
    return fit_model(small_bench["train-val"], "mahalanobis", iterations=300)


@pytest.fixture(scope="session")
def misspec_bench():
    return generate(misspecified_config())


@pytest.fixture(scope="session")
def misspec_fit(misspec_bench):
    return fit_model(misspec_bench["train-val"], "passthrough")


def make_dataset(logits, labels, split="test-in", features=None, u=None, c=None) -> Dataset:
    logits = np.asarray(logits, dtype=float)
    c = logits.shape[1] if c is None else c
    ids = [f"r{i}" for i in range(len(labels))]
    return Dataset(c, split, ids, labels, logits, features, u)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
