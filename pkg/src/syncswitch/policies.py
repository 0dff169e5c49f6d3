"""Switching policies: what protocol to run, when to switch, and with what
hyper-parameters.

* :func:`config_policy` derives per-protocol hyper-parameters from the
  user's single-worker settings (linear scaling for BSP, down-scaling for
  ASP).
* :func:`remap_lr_schedule` converts sample-based decay points into step
  indices for a BSP/ASP split.
* :func:`binary_search_timing` is the offline switch-point search.
* :func:`detect_stragglers`, :func:`greedy_policy_step` and
  :func:`elastic_policy_step` are the online straggler reactions.
* :func:`dynamic_switch_criterion` compares gradient drift against the
  sampling noise of the current batch gradient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .kernel import Hyperparams
from .protocols import ASP, BSP, PROTOCOLS

logger = logging.getLogger(__name__)

MOMENTUM_VARIANTS = ("same", "zero", "inverse_n", "ramp_pow2", "ramp_linear")
ASP_LR_SCALINGS = ("sqrt_down", "linear_down", "none")
STRAGGLER_POLICIES = ("none", "greedy", "elastic")


class WorkloadError(ValueError):
    """Workload does not split into whole mini-batches."""


# --------------------------------------------------------------------------
# Configuration policy
# --------------------------------------------------------------------------


def config_policy(
    user: Hyperparams,
    n: int,
    protocol: str,
    momentum_variant: str | None = None,
    asp_lr_scaling: str = "sqrt_down",
) -> Hyperparams:
    """Hyper-parameters for running ``protocol`` on ``n`` workers.

    ``batch_size`` of the result is the batch consumed by one parameter
    update: ``n * B`` under BSP, ``B`` under ASP.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    variant = momentum_variant or user.momentum_variant
    if variant not in MOMENTUM_VARIANTS:
        raise ValueError(f"unknown momentum variant {variant!r}")
    if protocol == BSP:
        return replace(
            user,
            batch_size=n * user.batch_size,
            learning_rate=n * user.learning_rate,
            momentum_variant=variant,
        )
    if asp_lr_scaling == "sqrt_down":
        lr = user.learning_rate / math.sqrt(n)
    elif asp_lr_scaling == "linear_down":
        lr = user.learning_rate / n
    elif asp_lr_scaling == "none":
        lr = user.learning_rate
    else:
        raise ValueError(f"unknown ASP learning-rate scaling {asp_lr_scaling!r}")
    return replace(
        user,
        learning_rate=lr,
        momentum=asp_momentum(variant, user.momentum, n, 0),
        momentum_variant=variant,
    )


def asp_momentum(variant: str, momentum: float, n: int, epochs_since_switch: int) -> float:
    """Momentum used under ASP ``epochs_since_switch`` epochs after switching.

    Ramp variants grow as ``2**i / n`` or ``i / n`` and stop once they reach
    the BSP momentum.
    """
    i = epochs_since_switch
    if variant == "same":
        return momentum
    if variant == "zero":
        return 0.0
    if variant == "inverse_n":
        return 1.0 / n
    if variant == "ramp_pow2":
        return min(momentum, 2.0 ** i / n)
    if variant == "ramp_linear":
        return min(momentum, i / n)
    raise ValueError(f"unknown momentum variant {variant!r}")


# --------------------------------------------------------------------------
# Learning-rate schedule remapping
# --------------------------------------------------------------------------


def _bsp_samples(W: int, s_bsp: float) -> int:
    exact = W * s_bsp
    samples = round(exact)
    if abs(exact - samples) > 1e-6 * max(1, W):
        raise WorkloadError(f"W * S_bsp = {exact} is not a whole number of samples")
    return int(samples)


def remap_lr_schedule(
    W: int,
    boundaries: Sequence[int],
    B: int,
    N: int,
    s_bsp: float,
) -> tuple[int, int, list[int]]:
    """Step counts and decay boundaries that keep decay points workload-aligned.

    ``boundaries`` are given in samples. A boundary inside the BSP phase is
    placed at ``W_i / (B N)``; one after the switch at
    ``W_i / B - W S / B + W S / (B N)``.
    """
    if not 0.0 <= s_bsp <= 1.0:
        raise ValueError("S_bsp must lie in [0, 1]")
    if W % B:
        raise WorkloadError(f"W={W} is not divisible by B={B}")
    bsp = _bsp_samples(W, s_bsp)
    if bsp % (B * N):
        raise WorkloadError(f"BSP workload {bsp} is not divisible by B*N={B * N}")
    bsp_steps = bsp // (B * N)
    asp_steps = W // B - bsp // B
    out = []
    for wi in boundaries:
        if wi <= bsp:
            if wi % (B * N):
                raise WorkloadError(f"boundary {wi} is not divisible by B*N={B * N}")
            out.append(wi // (B * N))
        else:
            if wi % B:
                raise WorkloadError(f"boundary {wi} is not divisible by B={B}")
            out.append(wi // B - bsp // B + bsp_steps)
    return bsp_steps, asp_steps, out


# --------------------------------------------------------------------------
# Plans
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DynamicCriterionConfig:
    k: int = 1
    c: float = 2.0
    T: int = 5

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.c <= 1:
            raise ValueError("c must be > 1")
        if self.T < 1:
            raise ValueError("T must be >= 1")


@dataclass(frozen=True)
class StragglerDetectorConfig:
    window: float = 1.0
    consecutive_required: int = 3

    def __post_init__(self):
        if self.window <= 0:
            raise ValueError("window must be positive")
        if self.consecutive_required < 1:
            raise ValueError("consecutive_required must be >= 1")


@dataclass(frozen=True)
class Phase:
    protocol: str
    fraction: float
    hyperparams: Hyperparams


@dataclass(frozen=True)
class SwitchPlan:
    """Resolved training plan.

    ``base`` keeps the user's single-worker hyper-parameters so that phases
    can be re-derived when the cluster is resized.
    """

    phases: tuple[Phase, ...]
    base: Hyperparams
    n_workers: int
    straggler_policy: str = "none"
    dynamic_criterion: DynamicCriterionConfig | None = None
    detector: StragglerDetectorConfig = field(default_factory=StragglerDetectorConfig)
    asp_lr_scaling: str = "sqrt_down"

    @property
    def bsp_fraction(self) -> float:
        return sum(p.fraction for p in self.phases if p.protocol == BSP)

    def phase_samples(self) -> list[int]:
        """Samples assigned to each phase; the last phase absorbs rounding."""
        W = self.base.total_workload
        out, acc = [], 0.0
        for p in self.phases[:-1]:
            acc_next = acc + p.fraction
            out.append(_bsp_samples(W, acc_next) - _bsp_samples(W, acc))
            acc = acc_next
        out.append(W - sum(out))
        return out

    def hyperparams_for(self, protocol: str, n: int) -> Hyperparams:
        return config_policy(self.base, n, protocol, asp_lr_scaling=self.asp_lr_scaling)

    def validate(self) -> None:
        if self.n_workers < 1:
            raise ValueError("plan needs at least one worker")
        if not self.phases:
            raise ValueError("plan has no phases")
        for p in self.phases:
            if p.protocol not in PROTOCOLS:
                raise ValueError(f"unknown protocol {p.protocol!r}")
            if not 0.0 <= p.fraction <= 1.0:
                raise ValueError(f"phase fraction {p.fraction} outside [0, 1]")
        total = sum(p.fraction for p in self.phases)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"phase fractions sum to {total}, expected 1")
        if self.straggler_policy not in STRAGGLER_POLICIES:
            raise ValueError(f"unknown straggler policy {self.straggler_policy!r}")
        if self.asp_lr_scaling not in ASP_LR_SCALINGS:
            raise ValueError(f"unknown ASP learning-rate scaling {self.asp_lr_scaling!r}")
        B = self.base.batch_size
        if self.base.total_workload % B:
            raise WorkloadError("total workload must be a multiple of the batch size")
        for samples in self.phase_samples():
            if samples % B:
                raise WorkloadError(f"phase workload {samples} is not a multiple of B={B}")
        if self.straggler_policy != "none" or self.dynamic_criterion is not None:
            protos = [p.protocol for p in self.phases if p.fraction > 0]
            if protos and protos != [BSP, ASP][: len(protos)] and protos != [BSP]:
                raise ValueError("online policies require a BSP-then-ASP plan")


def make_plan(
    user: Hyperparams,
    n: int,
    bsp_fraction: float,
    order: str = "bsp_asp",
    straggler_policy: str = "none",
    asp_lr_scaling: str = "sqrt_down",
    dynamic_criterion: DynamicCriterionConfig | None = None,
    detector: StragglerDetectorConfig | None = None,
) -> SwitchPlan:
    """Two-phase plan spending ``bsp_fraction`` of the workload under BSP."""
    bsp = Phase(BSP, bsp_fraction, config_policy(user, n, BSP, asp_lr_scaling=asp_lr_scaling))
    asp = Phase(ASP, 1.0 - bsp_fraction, config_policy(user, n, ASP, asp_lr_scaling=asp_lr_scaling))
    if order == "bsp_asp":
        phases = (bsp, asp)
    elif order == "asp_bsp":
        phases = (Phase(ASP, 1.0 - bsp_fraction, asp.hyperparams), Phase(BSP, bsp_fraction, bsp.hyperparams))
    else:
        raise ValueError(f"unknown order {order!r}")
    plan = SwitchPlan(
        phases=phases,
        base=user,
        n_workers=n,
        straggler_policy=straggler_policy,
        dynamic_criterion=dynamic_criterion,
        detector=detector or StragglerDetectorConfig(),
        asp_lr_scaling=asp_lr_scaling,
    )
    plan.validate()
    return plan


# --------------------------------------------------------------------------
# Offline timing search
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TimingSearchConfig:
    beta: float = 0.01
    M: int = 4
    R: int = 1
    A: float | None = None
    bsp_runs: int | None = None  # defaults to R
    integer_percent: bool = False

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.M < 1 or self.R < 1:
            raise ValueError("M and R must be >= 1")
        if self.bsp_runs is not None and self.bsp_runs < 0:
            raise ValueError("bsp_runs must be >= 0")


@dataclass(frozen=True)
class SearchSession:
    setting: int  # -1 for BSP baselines
    fraction: float
    run: int
    accuracy: float
    cost: float
    kind: str  # "bsp" or "candidate"


def _score(result) -> tuple[float, float]:
    if isinstance(result, tuple):
        acc, cost = result
    else:
        acc, cost = result, 0.0
    if acc is None or not math.isfinite(acc):
        acc = 0.0  # diverged sessions fail the threshold
    return float(acc), float(cost)


def binary_search_timing(
    train_fn: Callable[[float, int], float | tuple[float, float] | None],
    cfg: TimingSearchConfig,
) -> tuple[float, list[SearchSession]]:
    """Bisect the BSP share of the workload.

    ``train_fn(fraction, run)`` trains with ``fraction`` of the workload
    under BSP and returns the converged accuracy, or ``(accuracy, cost)``.
    ``None`` or NaN means the session diverged and scores 0.

    A setting is accepted when its mean accuracy over ``R`` runs lies within
    ``beta`` of the target ``A`` (the mean of BSP-only runs when ``A`` is
    not given). Exactly ``M`` settings are tried; the smallest accepted
    upper bound is returned.
    """
    log: list[SearchSession] = []
    target = cfg.A
    if target is None:
        runs = cfg.R if cfg.bsp_runs is None else cfg.bsp_runs
        if runs < 1:
            raise ValueError("a target accuracy is required when no BSP runs are made")
        accs = []
        for r in range(runs):
            acc, cost = _score(train_fn(1.0, r))
            accs.append(acc)
            log.append(SearchSession(-1, 1.0, r, acc, cost, "bsp"))
        target = sum(accs) / len(accs)

    upper, lower = 100.0, 0.0
    for m in range(cfg.M):
        pct = (upper + lower) / 2
        if cfg.integer_percent:
            pct = float(math.floor(pct))
        total = 0.0
        for r in range(cfg.R):
            acc, cost = _score(train_fn(pct / 100.0, r))
            total += acc
            log.append(SearchSession(m, pct / 100.0, r, acc, cost, "candidate"))
        if target - cfg.beta <= total / cfg.R <= target + cfg.beta:
            upper = pct
        else:
            lower = pct
    return upper / 100.0, log


# --------------------------------------------------------------------------
# Online straggler policies
# --------------------------------------------------------------------------


def detect_stragglers(
    throughputs: Mapping[int, float],
    cfg: StragglerDetectorConfig,
    history: dict[int, int],
) -> set[int]:
    """Flag workers below ``mean - std`` for enough consecutive windows.

    ``history`` maps worker id to its current run of below-threshold
    windows and is updated in place. Workers absent from ``throughputs``
    (no finished step in the window) keep their count, so a flagged
    worker stays flagged until it reports a healthy window. With fewer
    than two reporting workers there is nothing to compare against and
    no count changes.
    """
    if len(throughputs) >= 2:
        rates = np.array(list(throughputs.values()), dtype=float)
        threshold = rates.mean() - rates.std()
        for w, rate in throughputs.items():
            history[w] = history.get(w, 0) + 1 if rate < threshold else 0
    return {w for w, count in history.items() if count >= cfg.consecutive_required}


SWITCH_TO_ASP = "switch_to_asp"
SWITCH_TO_BSP = "switch_to_bsp"
NO_ACTION = "none"
REMOVE = "remove"
RESTORE_AND_SWITCH = "restore_and_switch_to_asp"


def greedy_policy_step(protocol: str, bsp_quota_remaining: int, stragglers: Iterable[int]) -> str:
    """Leave BSP while stragglers are present, return once they are gone."""
    stragglers = set(stragglers)
    if bsp_quota_remaining <= 0:
        return NO_ACTION
    if stragglers and protocol == BSP:
        return SWITCH_TO_ASP
    if not stragglers and protocol == ASP:
        return SWITCH_TO_BSP
    return NO_ACTION


def elastic_policy_step(
    protocol: str,
    quota_met: bool,
    stragglers: Iterable[int],
    active: Iterable[int],
) -> tuple[str, frozenset[int]]:
    """Drop stragglers from the BSP cluster; restore and go ASP at the quota.

    Returns ``(action, workers)``; ``workers`` is only meaningful for
    ``remove``.
    """
    if protocol != BSP:
        return NO_ACTION, frozenset()
    if quota_met:
        return RESTORE_AND_SWITCH, frozenset()
    active = set(active)
    stragglers = set(stragglers) & active
    if not stragglers:
        return NO_ACTION, frozenset()
    if stragglers == active:
        logger.warning("every active worker looks like a straggler; not removing any")
        return NO_ACTION, frozenset()
    return REMOVE, frozenset(stragglers)


# --------------------------------------------------------------------------
# Dynamic switching criterion
# --------------------------------------------------------------------------


def dynamic_switch_criterion(
    g: np.ndarray,
    g_lag: np.ndarray,
    per_sample: np.ndarray,
    cfg: DynamicCriterionConfig,
    streak: int = 0,
) -> tuple[bool, float, float, int]:
    """Check ``||g - g_lag|| < c * sigma`` and count consecutive hits.

    ``sigma`` is the standard error of the batch-mean gradient projected
    on the drift direction. A zero drift counts as satisfied. Returns
    ``(fire, drift_norm, sigma, new_streak)``.
    """
    g = np.asarray(g, dtype=float)
    g_lag = np.asarray(g_lag, dtype=float)
    per_sample = np.atleast_2d(np.asarray(per_sample, dtype=float))
    if g.shape != g_lag.shape or per_sample.shape[1] != g.shape[0]:
        raise ValueError("gradient shapes do not agree")
    B = per_sample.shape[0]
    if B < 2:
        raise ValueError("need at least two per-sample gradients")
    delta = g - g_lag
    norm = float(np.linalg.norm(delta))
    if norm == 0.0:
        satisfied, sigma = True, 0.0
    else:
        proj = (per_sample - g) @ delta
        sigma = float(np.sqrt(np.sum(proj ** 2)) / (B * norm))
        satisfied = norm < cfg.c * sigma
    streak = streak + 1 if satisfied else 0
    return streak >= cfg.T, norm, sigma, streak
