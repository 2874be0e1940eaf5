import numpy as np
import pytest

from faqd.autodiff import Tensor


def numeric_grad(f, arrays, index, h=1e-3):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[index]`` (float64)."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = float(f(*base))
        x[i] = old - h
        fm = float(f(*base))
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def analytic_grads(build, arrays):
    """Grads of the scalar tensor ``build(*tensors)`` for every float64 input."""
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(*ts)
    out.backward()
    return [t.grad for t in ts]


def assert_grads_match(build, arrays, rtol=1e-4, atol=1e-8, h=1e-3, skip=None):
    """Compare reverse-mode grads with central differences.

    The error is measured relative to the largest finite-difference
    component of each input, so tiny gradient entries are not held to a
    tolerance below the difference step's own truncation error.

    ``skip`` maps an input index to a boolean mask of coordinates to ignore
    (points near a kink).
    """
    grads = analytic_grads(build, arrays)

    def value(*arrs):
        return build(*[Tensor(a, dtype=np.float64) for a in arrs]).data

    for i in range(len(arrays)):
        num = numeric_grad(value, arrays, i, h)
        ana = grads[i] if grads[i] is not None else np.zeros_like(num)
        keep = np.ones(num.shape, bool) if skip is None or i not in skip else ~skip[i]
        err = np.abs(ana - num)[keep]
        if not err.size:
            continue
        tol = atol + rtol * np.abs(num[keep]).max()
        assert err.max() <= tol, f"input {i}: max err {err.max():.3g} > tol {tol:.3g}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import ACCEPTANCE_LINES
    except ImportError:
        return
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
