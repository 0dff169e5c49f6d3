import numpy as np
import pytest

from syncswitch.kernel import Hyperparams
from syncswitch.simulator import KernelConfig, Simulation

B = 32

# Every trace produced anywhere in the suite, with its residuals.
AUDITED_RUNS: list[tuple[str, dict[int, int]]] = []

_original_run = Simulation.run


def _audited_run(self):
    trace = _original_run(self)
    residuals = {w: trace.residual_ns(w) for w in trace.accounts}
    AUDITED_RUNS.append((trace.status, residuals))
    assert all(r == 0 for r in residuals.values()), f"time accounting residual {residuals}"
    return trace


@pytest.fixture(autouse=True)
def audit_time_accounting(monkeypatch):
    monkeypatch.setattr(Simulation, "run", _audited_run)
    yield


def hp(W: int, lr: float = 0.05, momentum: float = 0.9, batch: int = B, **kw) -> Hyperparams:
    kw.setdefault("lr_boundaries", ())
    kw.setdefault("lr_factors", ())
    return Hyperparams(batch_size=batch, learning_rate=lr, momentum=momentum, total_workload=W, **kw)


SMALL_KERNEL = KernelConfig(n_train=512, n_test=256, d=8, C=3, hidden=16, eval_every=10**9)


@pytest.fixture
def small_kernel():
    return SMALL_KERNEL


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        verdict, title = mod.RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d} {verdict}: {title}")
