import numpy as np
import pytest

from gsnet.diagnostics import grad_check
from gsnet.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_tensor(rng, *shape, grad=True):
    return Tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=grad)


def assert_grads(f, x, tol=1e-4, **kw):
    """Finite-difference check helper; returns the report for further inspection."""
    report = grad_check(f, x, **kw)
    name, worst = report.worst() if report.entries else ("", None)
    assert report.passed(tol), f"{name}: rel err {worst.max_rel_err:.3e} at {worst.worst_index}"
    return report


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
