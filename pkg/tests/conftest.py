import numpy as np
import pytest

from aebsde.market import ModelSpec, build_correlation_root


@pytest.fixture
def set_a():
    return ModelSpec(d=1, mu=0.05, sigma=0.3, r=0.01, R=0.06, T=0.5, x0=100.0, strikes=(103.0,))


@pytest.fixture
def root1():
    return build_correlation_root(1, 0.0)


def central_difference(f, x, eps):
    """Central-difference gradient of scalar ``f`` w.r.t. the float array ``x`` (perturbed in place)."""
    x = np.asarray(x)
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * eps)
    return grad


def rel_err(a, b, floor=1e-9):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# criterion -> list of (ok, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record_criterion(criterion, ok, detail):
    ACCEPTANCE.setdefault(criterion, []).append((bool(ok), detail))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[criterion]
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {criterion:>2}: {status}  {detail}")
