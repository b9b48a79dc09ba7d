import numpy as np
import pytest

from atmrn.tensor import Tensor, precision


def numeric_grad(f, x: np.ndarray, idx, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f(x)`` at the flat positions ``idx``."""
    out = np.empty(len(idx))
    flat = x.reshape(-1)
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[n] = (fp - fm) / (2 * eps)
    return out


def gradcheck(build, arrays, rtol=1e-3, eps=1e-6, max_entries=40, seed=0):
    """Compare autodiff gradients of ``sum(build(*tensors) * R)`` with central differences.

    ``arrays`` are float64 numpy arrays perturbed in place; a fixed random
    projection ``R`` turns any output into a scalar.  Returns the worst
    relative error seen.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with precision(np.float64):
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        out = build(*ts)
        proj = rng.standard_normal(out.shape)
        (out * Tensor(proj)).sum().backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

        def scalar():
            return float(np.sum(build(*[Tensor(a) for a in arrays]).data * proj))

        worst = 0.0
        for a, g in zip(arrays, analytic):
            n = a.size
            idx = rng.choice(n, size=min(n, max_entries), replace=False)
            num = numeric_grad(scalar, a, idx, eps)
            ana = g.reshape(-1)[idx]
            scale = max(np.max(np.abs(num)), np.max(np.abs(ana)), 1e-12)
            err = np.abs(num - ana) / np.maximum(np.maximum(np.abs(num), np.abs(ana)), 1e-3 * scale)
            worst = max(worst, float(err.max()))
    assert worst <= rtol, f"gradient mismatch: worst relative error {worst:.3e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
