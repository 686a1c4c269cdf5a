import numpy as np
import pytest

from pointjem.energy import init_params
from pointjem.netcore import forward


def random_cloud(rng, n=16, batch=None):
    shape = (n, 3) if batch is None else (batch, n, 3)
    return rng.uniform(-1.0, 1.0, shape)


def kink_margin(params, X) -> float:
    """Smallest |pre-activation| over layers whose activation has a kink."""
    X = np.asarray(X)
    _, tape = forward(params, X if X.ndim == 3 else X[None])
    layers = list(params.point_layers) + list(params.head_layers)
    margins = [np.abs(z).min() for z, spec in zip(tape.pre, layers)
               if spec.activation.kind in ("relu", "leaky_relu")]
    return float(min(margins)) if margins else np.inf


def generic_point(activation, n_classes=4, widths=(8, 16), head=(6,), n=40, margin=2e-4, seed=0):
    """Params and cloud with every kinked pre-activation at least ``margin`` from 0."""
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        params = init_params(n_classes, widths, head, activation, seed=rng)
        X = random_cloud(rng, n)
        fake = random_cloud(rng, n)
        if min(kink_margin(params, X), kink_margin(params, fake)) > margin:
            return params, X, fake
    raise RuntimeError("no generic point found")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the suite prints them all at the end."""
    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
