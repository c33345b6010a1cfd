import time
from typing import NamedTuple

import numpy as np
import pytest

from sftg.config import RunConfig
from sftg.data import SynthConfig
from sftg.encoder import EgtConfig
from sftg.gradcheck import relative_errors
from sftg.pipeline import prepare
from sftg.tensor_core import Tape, finite_diff_gradient
from sftg.trainer import TrainConfig, Trainer


def assert_grad_matches(fn, inputs: dict, rtol=1e-4, atol=1e-7):
    """Compare tape gradients of scalar ``fn(**vars)`` against central differences."""
    tape = Tape()
    variables = tape.watch(inputs)
    loss = fn(**variables)
    analytic = tape.backward(loss, variables)
    numeric = finite_diff_gradient(lambda p: float(fn(**p)), {k: np.array(v, dtype=float) for k, v in inputs.items()})
    for name in inputs:
        err = relative_errors(analytic[name], numeric[name], atol).max()
        assert err <= rtol, f"gradient of {name}: worst relative error {err:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


SMALL_RUN = RunConfig(
    synth=SynthConfig(subjects=2, classes=3, sequences=10, channels=16, samples=64),
    model=EgtConfig(d=8, heads=2, d_k=4, K=3, f=2, n_classes=3, d_e=8, J=16),
    train=TrainConfig(epochs=2, batch_size=6),
)


@pytest.fixture(scope="session")
def small_exp():
    """A few dozen short trials with a tiny model."""
    return prepare(SMALL_RUN)


@pytest.fixture(scope="session")
def default_exp():
    return prepare(RunConfig())


class TrainedRun(NamedTuple):
    trainer: Trainer
    seconds: float


@pytest.fixture(scope="session")
def trained_default(default_exp):
    """EGT+GAC trained for the full default 50 epochs on the default synthetic data."""
    start = time.perf_counter()
    trainer = default_exp.trainer().fit()
    return TrainedRun(trainer, time.perf_counter() - start)


# (criterion, title, passed, detail) rows filled in by the acceptance suite
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {num}. {title}: {detail}")
