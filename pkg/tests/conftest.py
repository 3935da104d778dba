import numpy as np
import pytest

from patchcad.network import NetworkModel
from patchcad.tensor import make_rng

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] AC{number} {name}: {detail}")


@pytest.fixture
def record_criterion():
    def record(number, name, ok, detail=""):
        ACCEPTANCE_RESULTS.append((number, name, bool(ok), detail))
        print(f"[{'PASS' if ok else 'FAIL'}] AC{number} {name}: {detail}")
        return ok

    return record


@pytest.fixture
def rng():
    return make_rng(1234)


def tiny_model(seed=0, in_channels=2, patch_size=8, widths=(4, 3, 2), hidden=5, dropout=0.5):
    """Shrunken architecture for finite-difference checks."""
    return NetworkModel.initialize(
        make_rng(seed), in_channels=in_channels, patch_size=patch_size, widths=widths, hidden=hidden, dropout=dropout
    )


@pytest.fixture
def small_model():
    return tiny_model()


def random_unit_vector(rng, shape):
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v)
