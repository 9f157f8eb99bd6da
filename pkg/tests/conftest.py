import numpy as np
import pytest

from ilpcnet import grad as G


def fd_check(loss_fn, tensors, h=1e-5, tol=1e-4, floor=1e-6):
    """Assert analytic gradients match central differences elementwise."""
    G.zero_grad(tensors)
    G.backward(loss_fn())
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        num = np.empty(flat.size)
        with G.no_grad():
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                num[i] = (up - down) / (2 * h)
        a = analytic.reshape(-1)
        err = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        assert err.max() < tol, f"{t.name}: max rel err {err.max():.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    from ilpcnet import io
    return io.synth_corpus(6, 0.5, seed=11)


# one line per acceptance criterion, printed after the test summary
ACCEPTANCE = {}
N_CRITERIA = 8


def record_criterion(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n}: NOT RUN")
