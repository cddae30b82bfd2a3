from __future__ import annotations

import numpy as np
import pytest

from latentfactor.numerics import Tape, Tensor


def tape_grads(fn, *arrays):
    """Analytic gradients of scalar ``fn(*tensors)`` with respect to each array."""
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
    return out.item(), tape.backward(out, leaves)


def central_diff(fn, *arrays, h: float = 1e-5):
    """Central finite differences of scalar ``fn(*tensors)`` (no tape)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            hi = [x.copy() for x in arrays]
            lo = [x.copy() for x in arrays]
            hi[i][idx] += h
            lo[i][idx] -= h
            f_hi = fn(*[Tensor(x) for x in hi]).item()
            f_lo = fn(*[Tensor(x) for x in lo]).item()
            g[idx] = (f_hi - f_lo) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# acceptance criteria: one PASS/FAIL line each, repeated in the terminal summary

ACCEPTANCE: dict[int, str] = {}


def _criterion(item) -> int | None:
    mark = item.get_closest_marker("acceptance")
    return None if mark is None else int(mark.args[0])


@pytest.fixture
def report(request):
    """``report(ok, detail)`` records and asserts the test's acceptance criterion."""
    num = _criterion(request.node)

    def _report(ok: bool, detail: str) -> None:
        line = f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[num] = line
        print(line)
        assert ok, line

    return _report


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    num = _criterion(item)
    if num is not None and rep.when == "call" and rep.failed and num not in ACCEPTANCE:
        ACCEPTANCE[num] = f"criterion {num:>2}: FAIL  error: {call.excinfo.typename}: {call.excinfo.value}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for num in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[num])
