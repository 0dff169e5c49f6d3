"""Discrete-event simulation of parameter-server training.

Virtual time is kept in integer nanoseconds so that the time budget of a
run (compute + network + wait + switch overhead + cluster init) closes
exactly. Every event carries a ``(time, kind rank, worker id, sequence)``
key; that total order fixes ASP interleavings and makes runs reproducible.

Workers loop pull -> compute -> push. Under BSP the server releases a
superstep once all participating workers have pushed; under ASP each push
is applied immediately.
"""

from __future__ import annotations

import heapq
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .kernel import (
    BatchSampler,
    DivergenceError,
    Hyperparams,
    LRSchedule,
    Model,
    MomentumState,
    ParameterVector,
    SyntheticDataset,
    loss_and_grad,
    lr_at,
    make_dataset,
    per_sample_grads,
    test_accuracy,
)
from .policies import (
    ASP,
    BSP,
    REMOVE,
    RESTORE_AND_SWITCH,
    SWITCH_TO_ASP,
    SWITCH_TO_BSP,
    SwitchPlan,
    asp_momentum,
    detect_stragglers,
    dynamic_switch_criterion,
    elastic_policy_step,
    greedy_policy_step,
)
from .protocols import (
    BarrierState,
    GradientMessage,
    StalenessRecord,
    asp_apply,
    bsp_superstep,
    pull_params,
)

logger = logging.getLogger(__name__)

NS_PER_S = 1_000_000_000
MAX_TRANSIENT_DURATION = 100.0

# Tie-break order for simultaneous events.
EVENT_KINDS = (
    "switch_end",
    "injection_start",
    "injection_end",
    "push_arrives",
    "pull_arrives",
    "compute_done",
    "barrier_release",
    "detect_tick",
    "eval_tick",
    "switch_begin",
)
KIND_RANK = {k: i for i, k in enumerate(EVENT_KINDS)}

COMPLETED = "completed"
DIVERGED = "diverged"


def to_ns(seconds: float) -> int:
    return int(round(seconds * NS_PER_S))


def to_s(ns: int) -> float:
    return ns / NS_PER_S


# --------------------------------------------------------------------------
# Inputs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WorkerProfile:
    worker_id: int
    base_step_time: float
    jitter: float = 0.0
    base_net_latency: float = 0.0

    def __post_init__(self):
        if self.base_step_time <= 0:
            raise ValueError("base_step_time must be positive")
        if self.base_net_latency < 0:
            raise ValueError("base_net_latency must be non-negative")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")


def homogeneous_cluster(n: int, step_time: float, latency: float = 0.0, jitter: float = 0.0) -> list[WorkerProfile]:
    return [WorkerProfile(i, step_time, jitter, latency) for i in range(n)]


@dataclass(frozen=True)
class StragglerInjection:
    worker_id: int
    onset: float
    duration: float
    added_latency: float = 0.0
    compute_multiplier: float = 1.0

    def __post_init__(self):
        if self.onset < 0:
            raise ValueError("injection onset must be non-negative")
        if self.duration <= 0:
            raise ValueError("injection duration must be positive")
        if self.added_latency < 0:
            raise ValueError("added_latency must be non-negative")
        if self.compute_multiplier < 1:
            raise ValueError("compute_multiplier must be >= 1")

    @property
    def end(self) -> float:
        return self.onset + self.duration


def validate_injections(
    injections: Iterable[StragglerInjection],
    max_duration: float = MAX_TRANSIENT_DURATION,
) -> None:
    by_worker: dict[int, list[StragglerInjection]] = {}
    for inj in injections:
        if inj.duration > max_duration:
            raise ValueError(f"injection on worker {inj.worker_id} lasts {inj.duration}s > {max_duration}s")
        by_worker.setdefault(inj.worker_id, []).append(inj)
    for w, items in by_worker.items():
        items.sort(key=lambda i: i.onset)
        for a, b in zip(items, items[1:]):
            if b.onset < a.end:
                raise ValueError(f"overlapping injections on worker {w}")


@dataclass(frozen=True)
class SwitchOverheadModel:
    checkpoint_plus_restart: float = 36.0
    cluster_init: float = 90.0

    def __post_init__(self):
        if self.checkpoint_plus_restart < 0 or self.cluster_init < 0:
            raise ValueError("overheads must be non-negative")

    @classmethod
    def for_cluster(cls, n: int) -> "SwitchOverheadModel":
        """Measured parallel-actuator costs: 8 workers (36 s, 90 s), 16 (53 s, 128 s)."""
        if n <= 8:
            return cls(36.0, 90.0)
        return cls(53.0, 128.0)


@dataclass(frozen=True)
class KernelConfig:
    """Workload and model used by a simulation."""

    dataset_seed: int = 1
    n_train: int = 2000
    n_test: int = 1000
    d: int = 16
    C: int = 4
    separation: float = 0.75
    hidden: int = 32
    linear: bool = False
    eval_every: int | None = None  # samples; default 2000 ASP steps

    def build(self) -> tuple[Model, SyntheticDataset]:
        ds = make_dataset(self.dataset_seed, self.n_train, self.n_test, self.d, self.C, self.separation)
        return Model(self.d, self.C, self.hidden, self.linear), ds


# --------------------------------------------------------------------------
# Trace
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceRecord:
    sim_time: float
    global_step: int
    protocol: str
    train_loss: float
    test_accuracy: float
    throughput_total: float
    active_workers: int
    event: str
    worker_throughput: dict = field(default_factory=dict, compare=False)


@dataclass
class WorkerAccount:
    compute: int = 0
    network: int = 0
    wait: int = 0


@dataclass
class RunTrace:
    records: list[TraceRecord] = field(default_factory=list)
    status: str = COMPLETED
    init_ns: int = 0
    end_ns: int = 0
    overhead_ns: int = 0
    num_switches: int = 0
    accounts: dict[int, WorkerAccount] = field(default_factory=dict)
    staleness: dict[str, StalenessRecord] = field(
        default_factory=lambda: {BSP: StalenessRecord(), ASP: StalenessRecord()}
    )
    samples: dict[str, int] = field(default_factory=lambda: {BSP: 0, ASP: 0})
    completions: dict[int, list[tuple[int, int, int]]] = field(default_factory=dict)
    final_params: ParameterVector | None = None

    @property
    def total_time(self) -> float:
        return to_s(self.end_ns)

    @property
    def switch_overhead_total(self) -> float:
        return to_s(self.overhead_ns)

    @property
    def diverged(self) -> bool:
        return self.status == DIVERGED

    def evaluations(self) -> list[TraceRecord]:
        return [r for r in self.records if r.event == "eval"]

    def residual_ns(self, worker_id: int) -> int:
        a = self.accounts[worker_id]
        return self.end_ns - (a.compute + a.network + a.wait + self.overhead_ns + self.init_ns)

    def time_breakdown(self, worker_id: int) -> dict[str, float]:
        a = self.accounts[worker_id]
        return {
            "compute": to_s(a.compute),
            "network": to_s(a.network),
            "wait": to_s(a.wait),
            "switch_overhead": to_s(self.overhead_ns),
            "init": to_s(self.init_ns),
        }

    def training_throughput(self) -> float:
        """Samples per second over the run, excluding init and switch time."""
        busy = self.end_ns - self.init_ns - self.overhead_ns
        return (self.samples[BSP] + self.samples[ASP]) / to_s(busy) if busy else 0.0

    def throughput_window(self, worker_id: int, window: float, now: float | None = None, mode: str = "elapsed"):
        now_ns = self.end_ns if now is None else to_ns(now)
        return throughput_window(self.completions.get(worker_id, []), window, now_ns, mode)


def throughput_window(
    completions: list[tuple[int, int, int]],
    window: float,
    now_ns: int,
    mode: str = "elapsed",
    in_progress_since: int | None = None,
) -> float | None:
    """Windowed samples/s of one worker.

    ``completions`` holds ``(end_ns, start_ns, samples)`` per finished step.
    ``elapsed`` divides the samples finished in ``(now - window, now]`` by
    the window (clamped at time zero), so barrier waits lower the rate.
    ``busy`` divides them by the time those steps took, i.e. the worker's
    own pace; it returns None when the window holds no finished step,
    unless a step has been running since before the window started, which
    yields 0.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    w_ns = to_ns(window)
    lo = max(0, now_ns - w_ns)
    samples = 0
    busy = 0
    for end, start, n in reversed(completions):
        if end <= lo:
            break
        if end <= now_ns:
            samples += n
            busy += end - start
    if mode == "elapsed":
        span = now_ns - lo
        return samples / to_s(span) if span else 0.0
    if mode == "busy":
        if busy:
            return samples / to_s(busy)
        if in_progress_since is not None and in_progress_since <= lo:
            return 0.0
        return None
    raise ValueError(f"unknown throughput mode {mode!r}")


def cluster_stats(rates: Iterable[float]) -> tuple[float, float]:
    """Mean and population standard deviation of per-worker throughputs."""
    arr = np.asarray(list(rates), dtype=float)
    return float(arr.mean()), float(arr.std())


# --------------------------------------------------------------------------
# Engine
# --------------------------------------------------------------------------


class PlanError(ValueError):
    """The plan or cluster cannot be simulated."""


@dataclass
class _Worker:
    profile: WorkerProfile
    rng: np.random.Generator
    last_t: int
    active: bool = True
    activity: tuple[str, int, int] | None = None
    cycle_start: int = 0
    snapshot: np.ndarray | None = None
    base_version: int = 0
    batch: np.ndarray | None = None
    grad: np.ndarray | None = None
    account: WorkerAccount = field(default_factory=WorkerAccount)
    completions: list = field(default_factory=list)


class Simulation:
    """One training run; call :meth:`run` once."""

    def __init__(
        self,
        cluster: list[WorkerProfile],
        plan: SwitchPlan,
        kernel: KernelConfig | None = None,
        injections: Iterable[StragglerInjection] = (),
        seed: int = 0,
        overhead: SwitchOverheadModel | None = None,
        dataset: SyntheticDataset | None = None,
        model: Model | None = None,
        max_transient_duration: float = MAX_TRANSIENT_DURATION,
    ):
        self.cluster = list(cluster)
        self.plan = plan
        self.kernel = kernel or KernelConfig()
        self.injections = sorted(injections, key=lambda i: (i.onset, i.worker_id))
        self.seed = seed
        self.overhead = overhead or SwitchOverheadModel.for_cluster(len(self.cluster))
        self._validate(max_transient_duration)

        if dataset is None:
            built_model, dataset = self.kernel.build()
            model = model or built_model
        elif model is None:
            model = Model(dataset.n_features, dataset.n_classes, self.kernel.hidden, self.kernel.linear)
        self.model = model
        self.dataset = dataset

        ss = np.random.SeedSequence(seed)
        init_ss, sampler_ss, *worker_ss = ss.spawn(2 + len(self.cluster))
        self._init_seed = int(init_ss.generate_state(1)[0])
        self.sampler = BatchSampler(len(dataset.y_train), int(sampler_ss.generate_state(1)[0]))
        self._worker_seeds = worker_ss

        B = plan.base.batch_size
        self.eval_every = self.kernel.eval_every or 2000 * B
        self.schedule = LRSchedule(1.0, plan.base.lr_boundaries, plan.base.lr_factors)
        self._ran = False

    def initial_params(self) -> ParameterVector:
        """Parameters the run starts from (same seed derivation as :meth:`run`)."""
        return self.model.init_params(self._init_seed)

    def _validate(self, max_transient: float) -> None:
        if not self.cluster:
            raise PlanError("cluster is empty")
        ids = [w.worker_id for w in self.cluster]
        if len(set(ids)) != len(ids):
            raise PlanError("duplicate worker ids")
        if self.plan.n_workers != len(self.cluster):
            raise PlanError(f"plan is for {self.plan.n_workers} workers, cluster has {len(self.cluster)}")
        try:
            self.plan.validate()
            validate_injections(self.injections, max_transient)
        except ValueError as exc:
            raise PlanError(str(exc)) from exc
        unknown = {i.worker_id for i in self.injections} - set(ids)
        if unknown:
            raise PlanError(f"injections target unknown workers {sorted(unknown)}")

    # ---- setup ----------------------------------------------------------

    def _setup(self) -> None:
        self.trace = RunTrace()
        self.init_ns = to_ns(self.overhead.cluster_init)
        self.switch_ns = to_ns(self.overhead.checkpoint_plus_restart)
        self.trace.init_ns = self.init_ns
        self.now = self.init_ns
        self.workers = {
            p.worker_id: _Worker(p, np.random.default_rng(s), self.init_ns)
            for p, s in zip(self.cluster, self._worker_seeds)
        }
        self.all_ids = sorted(self.workers)
        self.params = self.model.init_params(self._init_seed)
        self.mstate = MomentumState.zeros_like(self.params)
        self.events: list = []
        self._seq = 0
        self.gen = 0
        self.finished = False
        self.in_switch = False
        self.barrier: BarrierState | None = None
        self.pending_removal: set[int] = set()

        self.budgets = self.plan.phase_samples()
        self.phase_idx = 0
        self.phase_done = 0
        self.samples_done = 0
        self.detour = False
        self.detour_samples = 0
        self.policy_live = self.plan.straggler_policy != "none"
        self.detector_history: dict[int, int] = {}
        self.criterion_streak = 0
        self.grad_history: deque = deque(maxlen=self.plan.dynamic_criterion.k if self.plan.dynamic_criterion else 1)
        self.next_eval = self.eval_every
        self.last_record_t = self.init_ns
        self.last_record_samples = 0
        self.last_lr_factor = None
        self.momentum_epoch_base = 0

    # ---- helpers --------------------------------------------------------

    def _push(self, t: int, kind: str, worker: int = -1, payload=None, gen: int | None = None) -> None:
        self._seq += 1
        heapq.heappush(self.events, (t, KIND_RANK[kind], worker, self._seq, kind, payload, gen))

    def _injection(self, w: int, t: int) -> StragglerInjection | None:
        ts = to_s(t)
        for inj in self.injections:
            if inj.worker_id == w and inj.onset <= ts < inj.end:
                return inj
        return None

    def _latency(self, w: int, t: int) -> int:
        inj = self._injection(w, t)
        extra = inj.added_latency if inj else 0.0
        return to_ns(self.workers[w].profile.base_net_latency + extra)

    def _compute_time(self, w: int, t: int) -> int:
        worker = self.workers[w]
        p = worker.profile
        factor = 1.0
        if p.jitter > 0:
            factor = math.exp(p.jitter * worker.rng.standard_normal() - 0.5 * p.jitter ** 2)
        inj = self._injection(w, t)
        mult = inj.compute_multiplier if inj else 1.0
        return max(1, to_ns(p.base_step_time * factor * mult))

    def _begin_activity(self, worker: _Worker, kind: str, t: int, dur: int) -> int:
        if worker.last_t > t:
            raise RuntimeError("worker clock ran backwards")
        worker.account.wait += t - worker.last_t
        worker.last_t = t
        worker.activity = (kind, t, t + dur)
        return t + dur

    def _end_activity(self, worker: _Worker, t: int) -> None:
        kind, start, end = worker.activity
        stop = min(t, end)
        setattr(worker.account, kind, getattr(worker.account, kind) + stop - start)
        worker.last_t = stop
        worker.activity = None

    def _truncate_all(self, t: int) -> None:
        """Stop every worker at ``t``; idle time up to ``t`` counts as waiting."""
        for worker in self.workers.values():
            if worker.activity is not None:
                self._end_activity(worker, t)
            worker.account.wait += t - worker.last_t
            worker.last_t = t
            worker.grad = None
            worker.batch = None

    @property
    def active_ids(self) -> list[int]:
        return [w for w in self.all_ids if self.workers[w].active]

    @property
    def protocol(self) -> str:
        return self._protocol

    def _hyperparams(self, protocol: str) -> Hyperparams:
        n = len(self.active_ids)
        if n == self.plan.n_workers:
            for phase in self.plan.phases:
                if phase.protocol == protocol:
                    return phase.hyperparams
        return self.plan.hyperparams_for(protocol, n)

    def _lr_momentum(self) -> tuple[float, float]:
        hp = self.hp
        factor = lr_at(self.schedule, self.samples_done)
        if factor != self.last_lr_factor:
            if self.last_lr_factor is not None:
                self._record("lr_decay")
            self.last_lr_factor = factor
        mu = hp.momentum
        if self._protocol == ASP and hp.momentum_variant != "same":
            epochs = (self.samples_done - self.momentum_epoch_base) // len(self.dataset.y_train)
            mu = asp_momentum(hp.momentum_variant, self.plan.base.momentum, len(self.active_ids), epochs)
        return hp.learning_rate * factor, mu

    # ---- trace ----------------------------------------------------------

    def _record(self, event: str) -> None:
        t = self.now
        dt = t - self.last_record_t
        ds = self.samples_done - self.last_record_samples
        total = ds / to_s(dt) if dt > 0 else 0.0
        per_worker = {}
        for w in self.all_ids:
            n = 0
            for end, _, samples in reversed(self.workers[w].completions):
                if end <= self.last_record_t:
                    break
                n += samples
            per_worker[w] = n / to_s(dt) if dt > 0 else 0.0
        loss, _ = loss_and_grad(self.model, self.params, self.dataset.X_train, self.dataset.y_train)
        acc = test_accuracy(self.model, self.params, self.dataset)
        self.trace.records.append(
            TraceRecord(
                to_s(t), self.params.version, self._protocol, loss, acc, total,
                len(self.active_ids), event, per_worker,
            )
        )
        if dt > 0:
            self.last_record_t = t
            self.last_record_samples = self.samples_done

    def _record_safe(self, event: str) -> None:
        try:
            self._record(event)
        except DivergenceError:
            self.trace.records.append(
                TraceRecord(to_s(self.now), self.params.version, self._protocol, math.nan, math.nan,
                            0.0, len(self.active_ids), event)
            )

    # ---- protocol phases ------------------------------------------------

    def _start_protocol(self, t: int) -> None:
        self.gen += 1
        if self._protocol == BSP:
            self._start_superstep(t)
        else:
            for w in self.active_ids:
                self._start_pull(w, t)

    def _phase_remaining(self) -> int:
        return self.budgets[self.phase_idx] - self.phase_done

    def _start_superstep(self, t: int) -> None:
        B = self.plan.base.batch_size
        remaining = self._phase_remaining()
        active = self.active_ids
        k = min(len(active), remaining // B)
        participants = active[:k]
        idx = self.sampler.next_indices(k * B)
        self.barrier = BarrierState(participants)
        self.superstep_batch = idx
        for j, w in enumerate(participants):
            self.workers[w].batch = idx[j * B:(j + 1) * B]
            self._start_pull(w, t)

    def _start_pull(self, w: int, t: int) -> None:
        worker = self.workers[w]
        worker.cycle_start = t
        worker.snapshot, worker.base_version = pull_params(w, self.params)
        end = self._begin_activity(worker, "network", t, self._latency(w, t))
        self._push(end, "pull_arrives", w, gen=self.gen)

    def _on_pull_arrives(self, w: int, t: int) -> None:
        worker = self.workers[w]
        self._end_activity(worker, t)
        if self._protocol == ASP:
            worker.batch = self.sampler.next_indices(self.plan.base.batch_size)
        X = self.dataset.X_train[worker.batch]
        y = self.dataset.y_train[worker.batch]
        _, worker.grad = loss_and_grad(self.model, worker.snapshot, X, y, self.plan.base.weight_decay)
        end = self._begin_activity(worker, "compute", t, self._compute_time(w, t))
        self._push(end, "compute_done", w, gen=self.gen)

    def _on_compute_done(self, w: int, t: int) -> None:
        worker = self.workers[w]
        self._end_activity(worker, t)
        end = self._begin_activity(worker, "network", t, self._latency(w, t))
        self._push(end, "push_arrives", w, gen=self.gen)

    def _on_push_arrives(self, w: int, t: int) -> None:
        worker = self.workers[w]
        self._end_activity(worker, t)
        B = len(worker.batch)
        worker.completions.append((t, worker.cycle_start, B))
        msg = GradientMessage(w, worker.base_version, worker.grad, B, to_s(t))
        worker.grad = None
        if self._protocol == BSP:
            if self.barrier.add(msg):
                self._release_barrier(t)
            return
        lr, mu = self._lr_momentum()
        self.params, self.mstate, staleness = asp_apply(msg, self.params, self.mstate, lr, mu)
        self.trace.staleness[ASP].record(staleness)
        self._account_samples(B)
        if self.detour:
            self.detour_samples += B
            if self._asp_budget_left() <= 0:
                # ASP share used up while dodging stragglers: finish the BSP quota regardless
                self.detour = False
                self.policy_live = False
                self._maybe_eval()
                self._switch(t, BSP, "forced_switch_to_bsp")
                return
        else:
            self.phase_done += B
        self._maybe_eval()
        if not self.detour and self._phase_remaining() <= 0:
            self._end_phase(t)
        else:
            self._start_pull(w, t)

    def _release_barrier(self, t: int) -> None:
        msgs = self.barrier.drain()
        lr, mu = self._lr_momentum()
        pre_values = self.params.values
        pre_version = self.params.version
        self.params, self.mstate = bsp_superstep(msgs, self.params, self.mstate, lr, mu)
        for m in msgs:
            self.trace.staleness[BSP].record(pre_version - m.base_version)
        n_samples = len(self.superstep_batch)
        self._account_samples(n_samples)
        self.phase_done += n_samples
        self._maybe_eval()
        if self.pending_removal:
            for w in self.pending_removal:
                self.workers[w].active = False
            self.pending_removal = set()
            self.hp = self._hyperparams(BSP)
            self._record("resize")
        if self._check_dynamic(msgs, pre_values):
            return
        if self._phase_remaining() <= 0:
            self._end_phase(t)
        else:
            self._start_superstep(t)

    def _check_dynamic(self, msgs: list[GradientMessage], pre_values: np.ndarray) -> bool:
        cfg = self.plan.dynamic_criterion
        if cfg is None or self.phase_idx != 0 or self._protocol != BSP:
            return False
        g = np.mean([m.grad for m in msgs], axis=0)
        fire = False
        if len(self.grad_history) == cfg.k and len(self.superstep_batch) >= 2:
            idx = self.superstep_batch
            per = per_sample_grads(self.model, pre_values, self.dataset.X_train[idx], self.dataset.y_train[idx])
            per = per + self.plan.base.weight_decay * pre_values
            fire, _, _, self.criterion_streak = dynamic_switch_criterion(
                g, self.grad_history[0], per, cfg, self.criterion_streak
            )
        self.grad_history.append(g)
        if fire and self._phase_remaining() > 0 and self.phase_idx + 1 < len(self.budgets):
            left = self._phase_remaining()
            self.budgets[self.phase_idx] -= left
            self.budgets[self.phase_idx + 1] += left
            self._record("dynamic_switch")
            self._end_phase(self.now)
            return True
        return False

    def _asp_budget_left(self) -> int:
        """ASP samples still unspent by greedy detours during the BSP phase."""
        asp = self.budgets[1] if len(self.budgets) > 1 else 0
        return asp - self.detour_samples

    def _account_samples(self, n: int) -> None:
        self.samples_done += n
        self.trace.samples[self._protocol] += n

    def _maybe_eval(self) -> None:
        if self.samples_done >= self.next_eval:
            self._record("eval")
            while self.next_eval <= self.samples_done:
                self.next_eval += self.eval_every

    def _end_phase(self, t: int) -> None:
        prev = self.plan.phases[self.phase_idx].protocol
        self.phase_done = 0
        self.phase_idx += 1
        if self.phase_idx < len(self.budgets) and prev == BSP and self.detour_samples:
            self.budgets[self.phase_idx] = max(0, self.budgets[self.phase_idx] - self.detour_samples)
        while self.phase_idx < len(self.budgets) and self.budgets[self.phase_idx] == 0:
            self.phase_idx += 1
        if self.phase_idx >= len(self.budgets):
            self._finish(t)
            return
        nxt = self.plan.phases[self.phase_idx].protocol
        if prev == BSP:
            self.policy_live = False
            if self.plan.straggler_policy == "elastic":
                action, _ = elastic_policy_step(prev, True, (), self.active_ids)
                if action == RESTORE_AND_SWITCH:
                    self.resize_cluster(restore_all=True)
        if nxt != self._protocol:
            self._switch(t, nxt, "switch")
        else:
            self.hp = self._hyperparams(nxt)
            self._start_protocol(t)

    def _switch(self, t: int, to_protocol: str, tag: str) -> None:
        """Checkpoint, discard in-flight work and restart under ``to_protocol``."""
        if to_protocol == self._protocol:
            raise ValueError("switch target equals the current protocol")
        self._truncate_all(t)
        self.barrier = None
        self.gen += 1
        self.in_switch = True
        self.trace.num_switches += 1
        self.trace.overhead_ns += self.switch_ns
        self._record_safe("switch_begin" if tag == "switch" else tag)
        self._pending_protocol = to_protocol
        self._push(t + self.switch_ns, "switch_end")

    def _on_switch_end(self, t: int) -> None:
        for worker in self.workers.values():
            worker.last_t = t
        self.in_switch = False
        self._protocol = self._pending_protocol
        self.hp = self._hyperparams(self._protocol)
        if self._protocol == ASP:
            self.momentum_epoch_base = self.samples_done
        self._record_safe("switch_end")
        self._start_protocol(t)

    def perform_switch(self, to_protocol: str) -> None:
        """Switch at the current simulated time (used by policies)."""
        self._switch(self.now, to_protocol, "switch")

    def resize_cluster(self, remove: Iterable[int] | None = None, restore_all: bool = False) -> None:
        """Queue worker removal (applied after the current superstep) or restore everyone."""
        if restore_all:
            for w in self.all_ids:
                self.workers[w].active = True
            self.pending_removal = set()
            return
        remove = set(remove or ())
        if not remove:
            return
        remaining = set(self.active_ids) - self.pending_removal - remove
        if not remaining:
            raise ValueError("cannot remove every worker")
        self.pending_removal |= remove & set(self.active_ids)

    def _finish(self, t: int, status: str = COMPLETED) -> None:
        self._truncate_all(t)
        self.finished = True
        self.trace.status = status
        self.trace.end_ns = t
        self.now = t
        if status == COMPLETED:
            self._record("end")

    # ---- online policies ------------------------------------------------

    def _on_detect_tick(self, t: int) -> None:
        if not self.policy_live:
            return
        self._push(t + to_ns(self.plan.detector.window), "detect_tick")
        if self.in_switch:
            return
        rates = {}
        for w in self.active_ids:
            worker = self.workers[w]
            since = worker.cycle_start if worker.activity is not None else None
            r = throughput_window(worker.completions, self.plan.detector.window, t, "busy", since)
            if r is not None:
                rates[w] = r
        stragglers = detect_stragglers(rates, self.plan.detector, self.detector_history)
        if self.plan.straggler_policy == "greedy":
            quota = self.budgets[0] - self.phase_done if self.phase_idx == 0 else 0
            action = greedy_policy_step(self._protocol, quota, stragglers)
            if action == SWITCH_TO_ASP and self._asp_budget_left() > 0:
                self.detour = True
                self._switch(t, ASP, "switch")
            elif action == SWITCH_TO_BSP:
                self.detour = False
                self._switch(t, BSP, "switch")
        else:
            action, workers = elastic_policy_step(self._protocol, False, stragglers, self.active_ids)
            if action == REMOVE:
                self.resize_cluster(workers)
                for w in workers:
                    self.detector_history[w] = 0

    # ---- main loop ------------------------------------------------------

    def run(self) -> RunTrace:
        if self._ran:
            raise RuntimeError("a Simulation can only run once")
        self._ran = True
        self._setup()
        budgets = self.budgets
        first = next((i for i, b in enumerate(budgets) if b > 0), None)
        self.phase_idx = first
        self._protocol = self.plan.phases[first].protocol
        self.hp = self._hyperparams(self._protocol)
        if self._protocol == ASP:
            self.policy_live = False
        self._record("start")
        for inj in self.injections:
            # an injection may already be running when the cluster comes up
            self._push(max(self.now, to_ns(inj.onset)), "injection_start", inj.worker_id, inj)
            self._push(max(self.now, to_ns(inj.end)), "injection_end", inj.worker_id, inj)
        if self.policy_live:
            self._push(self.init_ns + to_ns(self.plan.detector.window), "detect_tick")
        self._lr_momentum()
        self._start_protocol(self.now)

        handlers = {
            "pull_arrives": self._on_pull_arrives,
            "compute_done": self._on_compute_done,
            "push_arrives": self._on_push_arrives,
        }
        try:
            while not self.finished:
                if not self.events:
                    raise RuntimeError("event queue drained before the workload finished")
                t, _, w, _, kind, payload, gen = heapq.heappop(self.events)
                if t < self.now:
                    raise RuntimeError("event scheduled in the past")
                if gen is not None and gen != self.gen:
                    continue
                self.now = t
                if kind in handlers:
                    handlers[kind](w, t)
                elif kind == "switch_end":
                    self._on_switch_end(t)
                elif kind == "detect_tick":
                    self._on_detect_tick(t)
                elif kind in ("injection_start", "injection_end"):
                    self._record(kind)
        except DivergenceError:
            logger.info("training diverged at t=%.3fs", to_s(self.now))
            self._finish(self.now, DIVERGED)

        for w, worker in self.workers.items():
            self.trace.accounts[w] = worker.account
            self.trace.completions[w] = worker.completions
        self.trace.final_params = self.params
        return self.trace


def run(
    cluster: list[WorkerProfile],
    plan: SwitchPlan,
    kernel: KernelConfig | None = None,
    injections: Iterable[StragglerInjection] = (),
    seed: int = 0,
    overhead: SwitchOverheadModel | None = None,
    **kwargs,
) -> RunTrace:
    return Simulation(cluster, plan, kernel, injections, seed, overhead, **kwargs).run()
