import contextlib

import numpy as np
import pytest

from moemos.dataset import Dataset, Sample
from moemos.model import MoeConfig, init_model
from moemos.numkernel import RngState

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@contextlib.contextmanager
def criterion(name: str):
    """Record a pass/fail line for the acceptance summary.

    The yielded list collects measured values to show next to the verdict.
    """
    notes: list[str] = []
    try:
        yield notes
    except BaseException as exc:
        why = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        _ACCEPTANCE.append((name, False, "; ".join([*notes, why])))
        raise
    _ACCEPTANCE.append((name, True, "; ".join(notes)))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, why in _ACCEPTANCE:
        line = f"{'PASS' if ok else 'FAIL'}  {name}"
        if why:
            line += f"  ({why[:200]})"
        terminalreporter.write_line(line)


@pytest.fixture
def small_cfg():
    return MoeConfig(n_experts=3, input_dim=5, expert_hidden=(7, 6), expert_out_dim=4,
                     dropout_rate=0.2, n_classes=3)


@pytest.fixture
def small_model(small_cfg):
    return init_model(small_cfg, RngState(3))


@pytest.fixture
def toy_dataset():
    rng = np.random.default_rng(0)
    samples = []
    for k in range(3):
        for j in range(4):
            samples.append(Sample(f"s{k}_{j}", f"sys{k}", rng.normal(size=4), mos=float(2 + k)))
    return Dataset(tuple(samples))
