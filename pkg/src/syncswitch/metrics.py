"""Metrics over run traces and the search-cost analysis.

Converged accuracy uses a five-evaluation stability window. The
Monte-Carlo search analysis replays :func:`binary_search_timing` on
sessions resampled from recorded training logs.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .policies import SearchSession, TimingSearchConfig, binary_search_timing
from .simulator import RunTrace

STABILITY_WINDOW = 5
STABILITY_TOLERANCE = 0.001
FAILED = "failed"


class CoverageError(LookupError):
    """The session pool has no recorded run for a fraction the search needs."""


def converged_index(history: Sequence[float], window: int = STABILITY_WINDOW, tol: float = STABILITY_TOLERANCE) -> int | None:
    """Index of the first evaluation closing a stable window, or None."""
    for i in range(window - 1, len(history)):
        chunk = history[i - window + 1:i + 1]
        if max(chunk) - min(chunk) <= tol + 1e-12:
            return i
    return None


def converged_accuracy(trace: RunTrace, window: int = STABILITY_WINDOW, tol: float = STABILITY_TOLERANCE):
    """``(accuracy, global_step)`` at convergence, or None if never stable.

    Diverged traces never converge.
    """
    if trace.diverged:
        return None
    evals = trace.evaluations()
    i = converged_index([r.test_accuracy for r in evals], window, tol)
    if i is None:
        return None
    return evals[i].test_accuracy, evals[i].global_step


def final_accuracy(trace: RunTrace) -> float:
    """Converged accuracy if the trace stabilised, else the last evaluation.

    Diverged runs score 0.
    """
    if trace.diverged:
        return 0.0
    conv = converged_accuracy(trace)
    if conv is not None:
        return conv[0]
    evals = trace.evaluations() or [r for r in trace.records if r.event == "end"]
    return evals[-1].test_accuracy if evals else 0.0


def tta(trace: RunTrace, threshold: float) -> float | None:
    """Simulated seconds until an evaluation first reaches ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    for r in trace.records:
        if r.event in ("eval", "end") and r.test_accuracy >= threshold:
            return r.sim_time
    return None


def speedups(trace_a: RunTrace, trace_b: RunTrace, threshold: float | None = None):
    """How much faster ``trace_a`` is than the comparator ``trace_b``.

    Returns ``(throughput_speedup, tta_speedup)``. A diverged run, or a
    TTA threshold one side never reaches, gives ``"failed"`` in place of
    the ratio.
    """
    if trace_a.diverged or trace_b.diverged:
        return FAILED, FAILED
    throughput = trace_b.total_time / trace_a.total_time
    if threshold is None:
        threshold = min(
            max(r.test_accuracy for r in trace_a.records),
            max(r.test_accuracy for r in trace_b.records),
        )
    ta, tb = tta(trace_a, threshold), tta(trace_b, threshold)
    if ta is None or tb is None or ta == 0:
        return throughput, FAILED
    return throughput, tb / ta


def amortization(search_cost: float, relative_cost: float) -> float:
    """Job recurrences after which the search pays for itself."""
    if relative_cost >= 1:
        return math.inf
    return search_cost / (1.0 - relative_cost)


def effective_training_ratio(sessions_produced: int, search_cost: float) -> float:
    if search_cost <= 0:
        raise ValueError("search_cost must be positive")
    return sessions_produced / search_cost


# --------------------------------------------------------------------------
# Monte-Carlo search analysis
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchSetting:
    recurring: bool
    bsp_runs: int
    candidate_runs: int

    def __post_init__(self):
        if self.candidate_runs < 1:
            raise ValueError("candidate_runs must be >= 1")
        if self.bsp_runs < 0:
            raise ValueError("bsp_runs must be >= 0")
        if not self.recurring and self.bsp_runs < 1:
            raise ValueError("a new job needs at least one BSP run to set the target")

    @classmethod
    def parse(cls, text: str) -> "SearchSetting":
        """Parse ``"No,5,5"`` / ``"Yes,0,3"``."""
        rec, bsp, cand = (p.strip() for p in text.split(","))
        return cls(rec.lower() in ("yes", "y", "true", "1"), int(bsp), int(cand))

    @property
    def label(self) -> str:
        return f"({'Yes' if self.recurring else 'No'}, {self.bsp_runs}, {self.candidate_runs})"


@dataclass(frozen=True)
class CostReport:
    setting: SearchSetting
    search_cost: float
    amortization: float
    effective_training: float
    success_probability: float
    ground_truth: float
    relative_cost: float
    sessions: int


def _key(fraction: float) -> float:
    return round(float(fraction), 9)


class SessionPool:
    """Recorded sessions grouped by BSP fraction, costs normalised to BSP."""

    def __init__(self, sessions: Iterable[tuple[float, float, float]]):
        groups: dict[float, list[tuple[float, float]]] = defaultdict(list)
        for fraction, accuracy, cost in sessions:
            groups[_key(fraction)].append((float(accuracy), float(cost)))
        if 1.0 not in groups:
            raise CoverageError("pool has no BSP-only (fraction 1.0) sessions")
        bsp_cost = float(np.mean([c for _, c in groups[1.0]]))
        if bsp_cost <= 0:
            raise ValueError("BSP sessions must have positive cost")
        self.bsp_cost = bsp_cost
        self.groups = {
            f: (np.array([a for a, _ in v]), np.array([c / bsp_cost for _, c in v]))
            for f, v in sorted(groups.items())
        }

    @classmethod
    def from_search_sessions(cls, sessions: Iterable[SearchSession]) -> "SessionPool":
        return cls((s.fraction, s.accuracy, s.cost) for s in sessions)

    def _group(self, fraction: float):
        try:
            return self.groups[_key(fraction)]
        except KeyError:
            raise CoverageError(f"no recorded sessions at BSP fraction {fraction:g}") from None

    def mean_accuracy(self, fraction: float) -> float:
        return float(self._group(fraction)[0].mean())

    def mean_cost(self, fraction: float) -> float:
        return float(self._group(fraction)[1].mean())

    def sample(self, fraction: float, rng: np.random.Generator) -> tuple[float, float]:
        accs, costs = self._group(fraction)
        i = rng.integers(len(accs))
        return float(accs[i]), float(costs[i])


def ground_truth_fraction(pool: SessionPool, beta: float, M: int) -> float:
    """Fraction the search settles on when every setting scores its pool mean."""
    cfg = TimingSearchConfig(beta=beta, M=M, R=1, A=pool.mean_accuracy(1.0))
    fraction, _ = binary_search_timing(lambda f, r: pool.mean_accuracy(f), cfg)
    return fraction


def monte_carlo_search(
    pool: SessionPool,
    setting: SearchSetting,
    trials: int,
    beta: float = 0.01,
    M: int = 4,
    seed: int = 0,
) -> CostReport:
    """Replay the timing search ``trials`` times on resampled sessions."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    truth = ground_truth_fraction(pool, beta, M)
    relative = pool.mean_cost(truth)
    A = pool.mean_accuracy(1.0) if setting.recurring else None
    cfg = TimingSearchConfig(
        beta=beta, M=M, R=setting.candidate_runs, A=A,
        bsp_runs=0 if setting.recurring else setting.bsp_runs,
    )
    children = np.random.SeedSequence(seed).spawn(trials)
    costs, hits, sessions = [], 0, None
    for child in children:
        rng = np.random.default_rng(child)
        found, log = binary_search_timing(lambda f, r: pool.sample(f, rng), cfg)
        costs.append(sum(s.cost for s in log))
        hits += _key(found) == _key(truth)
        sessions = len(log)
    cost = float(np.mean(costs))
    return CostReport(
        setting=setting,
        search_cost=cost,
        amortization=amortization(cost, relative),
        effective_training=effective_training_ratio(sessions, cost),
        success_probability=hits / trials,
        ground_truth=truth,
        relative_cost=relative,
        sessions=sessions,
    )
