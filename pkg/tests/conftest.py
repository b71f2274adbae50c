import numpy as np
import pytest

from loglearn.autodiff import Tensor, gradients


def numeric_grad(f, arrays, eps=1e-5):
    """Central differences of scalar ``f(*arrays)`` w.r.t. each array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = a[i]
            a[i] = orig + eps
            hi = f(*arrays)
            a[i] = orig - eps
            lo = f(*arrays)
            a[i] = orig
            g[i] = (hi - lo) / (2 * eps)
        out.append(g)
    return out


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(a))), float(np.max(np.abs(b)))))


def check_grad(build, arrays, eps=1e-5):
    """Max relative error between autodiff and central differences.

    ``build(*tensors)`` must return a scalar Tensor.
    """
    arrays = [np.array(a, dtype=float) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = gradients(build(*leaves), leaves)
    numeric = numeric_grad(lambda *xs: build(*[Tensor(x) for x in xs]).item(), arrays, eps)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """``record(criterion, ok, detail)`` logs a pass/fail line for the terminal summary."""

    def record(criterion, ok, detail=""):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
