"""BSP and ASP parameter-server update rules.

Gradients arrive as :class:`GradientMessage` objects tagged with the
parameter version they were computed against. BSP collects one message
per worker behind a barrier and applies their mean as a single momentum
step; ASP applies every message on arrival and records its staleness.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .kernel import MomentumState, ParameterVector, sgd_momentum_step

BSP = "bsp"
ASP = "asp"
PROTOCOLS = (BSP, ASP)


class ProtocolError(RuntimeError):
    """Base class for protocol state-machine violations."""


class ProtocolViolation(ProtocolError):
    """Missing, duplicate or unexpected worker message at a barrier."""


class BarrierIntegrityError(ProtocolError):
    """A barrier message was computed against a different parameter version."""


class CausalityError(ProtocolError):
    """A gradient claims a base version newer than the server's."""


@dataclass(frozen=True)
class GradientMessage:
    worker_id: int
    base_version: int
    grad: np.ndarray
    batch_size: int
    compute_finished_at: float = 0.0


def pull_params(worker_id: int, params: ParameterVector) -> tuple[np.ndarray, int]:
    """Read-only snapshot of the current values and their version."""
    snapshot = params.values.copy()
    snapshot.setflags(write=False)
    return snapshot, params.version


class BarrierState:
    """Collects one gradient per expected worker for the current superstep."""

    def __init__(self, expected: Iterable[int]):
        self.expected = frozenset(expected)
        if not self.expected:
            raise ValueError("a barrier needs at least one worker")
        self.received: dict[int, GradientMessage] = {}

    def add(self, msg: GradientMessage) -> bool:
        """Register ``msg``; return True once every expected worker reported."""
        if msg.worker_id not in self.expected:
            raise ProtocolViolation(f"worker {msg.worker_id} is not part of this barrier")
        if msg.worker_id in self.received:
            raise ProtocolViolation(f"duplicate gradient from worker {msg.worker_id}")
        self.received[msg.worker_id] = msg
        return self.released

    @property
    def released(self) -> bool:
        return self.received.keys() == self.expected

    def drain(self) -> list[GradientMessage]:
        if not self.released:
            missing = sorted(self.expected - self.received.keys())
            raise ProtocolViolation(f"barrier still waiting on workers {missing}")
        msgs = [self.received[w] for w in sorted(self.received)]
        self.received = {}
        return msgs


@dataclass
class StalenessRecord:
    values: list[int] = field(default_factory=list)

    def record(self, staleness: int) -> None:
        if staleness < 0:
            raise CausalityError(f"negative staleness {staleness}")
        self.values.append(staleness)

    @property
    def histogram(self) -> Counter:
        return Counter(self.values)

    @property
    def max(self) -> int:
        return max(self.values, default=0)

    def __len__(self) -> int:
        return len(self.values)


def bsp_superstep(
    msgs: list[GradientMessage],
    params: ParameterVector,
    mstate: MomentumState,
    lr: float,
    momentum: float,
    expected: Iterable[int] | None = None,
) -> tuple[ParameterVector, MomentumState]:
    """Average one gradient per worker and apply a single momentum step."""
    if not msgs:
        raise ProtocolViolation("no gradients at the barrier")
    ids = [m.worker_id for m in msgs]
    if len(set(ids)) != len(ids):
        raise ProtocolViolation(f"duplicate worker ids in {sorted(ids)}")
    if expected is not None and set(ids) != set(expected):
        raise ProtocolViolation(f"barrier expected {sorted(expected)}, got {sorted(ids)}")
    for m in msgs:
        if m.base_version != params.version:
            raise BarrierIntegrityError(
                f"worker {m.worker_id} computed on version {m.base_version}, server is at {params.version}"
            )
    grad = np.mean([m.grad for m in msgs], axis=0)
    return sgd_momentum_step(params, mstate, grad, lr, momentum)


def asp_apply(
    msg: GradientMessage,
    params: ParameterVector,
    mstate: MomentumState,
    lr: float,
    momentum: float,
) -> tuple[ParameterVector, MomentumState, int]:
    """Apply ``msg`` immediately; return the new state and its staleness."""
    if msg.base_version > params.version:
        raise CausalityError(
            f"worker {msg.worker_id} claims version {msg.base_version} > server version {params.version}"
        )
    staleness = params.version - msg.base_version
    new_params, new_state = sgd_momentum_step(params, mstate, msg.grad, lr, momentum)
    return new_params, new_state, staleness


@dataclass(frozen=True)
class PSShardSpec:
    """Contiguous partition of the parameter vector, one shard per server."""

    n_shards: int
    shard_ranges: tuple[tuple[int, int], ...]

    @classmethod
    def even(cls, n_shards: int, n_params: int) -> "PSShardSpec":
        if n_shards < 1:
            raise ValueError("n_shards must be >= 1")
        edges = np.linspace(0, n_params, n_shards + 1).round().astype(int)
        ranges = tuple((int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]))
        return cls(n_shards, ranges)

    def __post_init__(self):
        if len(self.shard_ranges) != self.n_shards:
            raise ValueError("one range per shard is required")
        pos = 0
        for lo, hi in self.shard_ranges:
            if lo != pos or hi < lo:
                raise ValueError("shard ranges must be contiguous and ordered")
            pos = hi

    @property
    def length(self) -> int:
        return self.shard_ranges[-1][1]

    def split(self, vec: np.ndarray) -> list[np.ndarray]:
        if len(vec) != self.length:
            raise ValueError("vector length does not match shard spec")
        return [vec[lo:hi] for lo, hi in self.shard_ranges]

    def reassemble(self, parts: list[np.ndarray]) -> np.ndarray:
        return np.concatenate(parts)


def sharded_momentum_step(
    spec: PSShardSpec,
    params: ParameterVector,
    mstate: MomentumState,
    grad: np.ndarray,
    lr: float,
    momentum: float,
) -> tuple[ParameterVector, MomentumState]:
    """Apply one momentum step shard by shard, as collocated servers would."""
    w_parts = spec.split(params.values)
    v_parts = spec.split(mstate.velocity)
    g_parts = spec.split(grad)
    new_w, new_v = [], []
    for w, v, g in zip(w_parts, v_parts, g_parts):
        v2 = momentum * v + g
        new_v.append(v2)
        new_w.append(w - lr * v2)
    return (
        ParameterVector(spec.reassemble(new_w), params.version + 1),
        MomentumState(spec.reassemble(new_v)),
    )
