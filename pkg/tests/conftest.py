import numpy as np
import pytest

from mopjci.core import TrialDataset

# acceptance outcomes, filled by test_acceptance and echoed at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}. {text}")


def make_dataset(n=40, p=3, d=2, seed=0, with_tau=True):
    gen = np.random.default_rng(seed)
    X = gen.normal(size=(n, p))
    t = np.tile([0.0, 1.0], n // 2 + 1)[:n]
    Y = gen.normal(size=(n, d))
    tau = gen.normal(size=(n, d)) if with_tau else None
    return TrialDataset(X, tuple(f"x{j}" for j in range(p)), t, Y, tuple(f"y{k}" for k in range(d)), tau)


@pytest.fixture
def small_ds():
    return make_dataset()
