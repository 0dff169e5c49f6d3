"""Experiment configuration: a single JSON document, strictly validated.

Unknown keys are errors. Every error message names the offending key path
(for example ``plan.detector.window``).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .kernel import Hyperparams
from .policies import (
    DynamicCriterionConfig,
    Phase,
    StragglerDetectorConfig,
    SwitchPlan,
    TimingSearchConfig,
    config_policy,
)
from .protocols import ASP, BSP
from .simulator import (
    KernelConfig,
    StragglerInjection,
    SwitchOverheadModel,
    WorkerProfile,
)


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


# Straggler scenarios: (stragglers, occurrences per straggler, added latency in s)
PRESETS = {
    "none": (0, 0, 0.0),
    "mild": (1, 1, 0.010),
    "moderate": (2, 4, 0.030),
}

_DETECTOR = {"window": 1.0, "consecutive_required": 3}
_DYNAMIC = {"k": 1, "c": 2.0, "T": 5}
_STUB = {
    "intercept": 0.86,
    "slope": 0.24,
    "cap": 0.92,
    "units": "percent",
    "noise": 0.0,
    "seed": 0,
    "asp_relative_cost": 0.2,
}
_SEARCH = {
    "beta": 0.01,
    "M": 4,
    "R": 1,
    "target_accuracy": None,
    "bsp_runs": None,
    "integer_percent": False,
    "stub_curve": None,
}
_INJECTION = {"worker_id": None, "onset": None, "duration": None, "added_latency": 0.0, "compute_multiplier": 1.0}
_PHASE = {"protocol": None, "fraction": None}

DEFAULTS: dict[str, Any] = {
    "workload": {
        "dataset": {"seed": 1, "n_train": 8000, "n_test": 1000, "d": 16, "C": 4, "separation": 0.75},
        "model": {"hidden": 32, "linear": False},
        "total_workload": 153600,
        "batch_size": 32,
        "learning_rate": 0.05,
        "momentum": 0.9,
        "weight_decay": 0.0,
        "lr_boundaries": [76800, 115200],
        "lr_factors": [0.1, 0.01],
        "eval_every": 3840,
        "tta_threshold": 0.85,
    },
    "cluster": {"n_workers": 8, "base_step_time": 0.05, "base_net_latency": 0.001, "jitter": 0.0},
    "plan": {
        "phases": [{"protocol": "bsp", "fraction": 0.25}, {"protocol": "asp", "fraction": 0.75}],
        "straggler_policy": "none",
        "momentum_variant": "same",
        "asp_lr_scaling": "sqrt_down",
        "detector": dict(_DETECTOR),
        "dynamic_criterion": None,
        "search": None,
    },
    "stragglers": {"preset": "none", "injections": []},
    "overhead": {"checkpoint_plus_restart": None, "cluster_init": None},
    "seed": 0,
    "repeats": 1,
}

# Keys whose default is None but which take an object of this shape.
_OPTIONAL_OBJECTS = {
    "plan.dynamic_criterion": _DYNAMIC,
    "plan.search": _SEARCH,
    "plan.search.stub_curve": _STUB,
}
_LIST_ITEMS = {"plan.phases": _PHASE, "stragglers.injections": _INJECTION}


def _merge(defaults: dict, user: Any, path: str) -> dict:
    if not isinstance(user, dict):
        raise ConfigError(path, "expected an object")
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        sub = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(sub, "unknown key")
        default = defaults[key]
        if sub in _OPTIONAL_OBJECTS and value is not None:
            out[key] = _merge(_OPTIONAL_OBJECTS[sub], value, sub)
        elif isinstance(default, dict):
            out[key] = _merge(default, value, sub)
        elif sub in _LIST_ITEMS:
            if not isinstance(value, list):
                raise ConfigError(sub, "expected a list")
            items = []
            for i, item in enumerate(value):
                merged = _merge(_LIST_ITEMS[sub], item, f"{sub}[{i}]")
                for k, v in merged.items():
                    if v is None:
                        raise ConfigError(f"{sub}[{i}].{k}", "required")
                items.append(merged)
            out[key] = items
        else:
            out[key] = value
    return out


def _num(cfg: dict, key: str, path: str, kind=float, minimum=None, allow_none=False):
    value = cfg[key]
    full = f"{path}.{key}" if path else key
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(full, f"expected a number, got {value!r}")
    if kind is int:
        if float(value) != int(value):
            raise ConfigError(full, f"expected an integer, got {value!r}")
        value = int(value)
    else:
        value = float(value)
    if minimum is not None and value < minimum:
        raise ConfigError(full, f"must be >= {minimum}")
    return value


@dataclass
class Experiment:
    """Resolved, validated experiment."""

    raw: dict
    kernel: KernelConfig
    user: Hyperparams
    cluster: list[WorkerProfile]
    plan: SwitchPlan | None
    search: TimingSearchConfig | None
    stub_curve: dict | None
    overhead: SwitchOverheadModel
    preset: str
    injections: list[StragglerInjection]
    seed: int
    repeats: int
    tta_threshold: float

    @property
    def digest(self) -> str:
        return config_digest(self.raw)

    def plan_for_fraction(self, bsp_fraction: float, order: str = "bsp_asp") -> SwitchPlan:
        base = self.plan_template()
        n = len(self.cluster)
        B, W = self.user.batch_size, self.user.total_workload
        # snap to whole mini-batches
        bsp_samples = int(round(bsp_fraction * W / B)) * B
        fraction = bsp_samples / W
        bsp = Phase(BSP, fraction, config_policy(self.user, n, BSP, asp_lr_scaling=base.asp_lr_scaling))
        asp = Phase(ASP, 1.0 - fraction, config_policy(self.user, n, ASP, asp_lr_scaling=base.asp_lr_scaling))
        phases = (bsp, asp) if order == "bsp_asp" else (asp, bsp)
        plan = SwitchPlan(
            phases, self.user, n, base.straggler_policy, base.dynamic_criterion, base.detector, base.asp_lr_scaling
        )
        plan.validate()
        return plan

    def plan_template(self) -> SwitchPlan:
        p = self.raw["plan"]
        dyn = p["dynamic_criterion"]
        return SwitchPlan(
            phases=self.plan.phases if self.plan else (),
            base=self.user,
            n_workers=len(self.cluster),
            straggler_policy=p["straggler_policy"],
            dynamic_criterion=DynamicCriterionConfig(**dyn) if dyn else None,
            detector=StragglerDetectorConfig(**p["detector"]),
            asp_lr_scaling=p["asp_lr_scaling"],
        )

    def injections_for(self, plan: SwitchPlan, seed: int) -> list[StragglerInjection]:
        if self.preset == "none":
            return list(self.injections)
        return list(self.injections) + expand_preset(self.preset, self.cluster, plan, self.overhead, seed)

    def with_overrides(self, **changes) -> "Experiment":
        raw = copy.deepcopy(self.raw)
        for key, value in changes.items():
            if value is None:
                continue
            if key == "preset":
                raw["stragglers"]["preset"] = value
            else:
                raw[key] = value
        return parse_config(raw)


def expand_preset(
    preset: str,
    cluster: list[WorkerProfile],
    plan: SwitchPlan,
    overhead: SwitchOverheadModel,
    seed: int,
) -> list[StragglerInjection]:
    """Spread the preset's straggler occurrences over the BSP part of training.

    The horizon is the straggler-free duration of the BSP phase (the whole
    run for ASP-only plans). Each straggler is slowed ``frequency`` times
    for ``min(100 s, horizon / (2 * frequency))``.
    """
    n_strag, freq, latency = PRESETS[preset]
    if n_strag == 0:
        return []
    n = len(cluster)
    n_strag = min(n_strag, n - 1) if n > 1 else 0
    if n_strag == 0:
        return []
    B, W = plan.base.batch_size, plan.base.total_workload
    slowest = max(p.base_step_time + 2 * p.base_net_latency for p in cluster)
    bsp = sum(s for s, p in zip(plan.phase_samples(), plan.phases) if p.protocol == BSP)
    horizon = (bsp / (n * B)) * slowest if bsp else (W / (n * B)) * slowest
    duration = min(100.0, horizon / (2 * freq))
    rng = np.random.default_rng(seed)
    chosen = sorted(int(w) for w in rng.choice([p.worker_id for p in cluster], n_strag, replace=False))
    out = []
    for s_idx, w in enumerate(chosen):
        for j in range(freq):
            onset = overhead.cluster_init + horizon * (j + 0.1 * s_idx) / freq
            out.append(StragglerInjection(w, round(onset, 6), round(duration, 6), latency))
    return out


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(raw: dict) -> str:
    return hashlib.sha256(canonical_json(raw).encode()).hexdigest()[:16]


def parse_config(user: dict) -> Experiment:
    raw = _merge(DEFAULTS, user, "")
    wl, ds, mdl = raw["workload"], raw["workload"]["dataset"], raw["workload"]["model"]

    def fail(key, exc):
        if isinstance(exc, ConfigError):
            raise exc
        raise ConfigError(key, str(exc)) from exc

    kernel = KernelConfig(
        dataset_seed=_num(ds, "seed", "workload.dataset", int),
        n_train=_num(ds, "n_train", "workload.dataset", int, 1),
        n_test=_num(ds, "n_test", "workload.dataset", int, 1),
        d=_num(ds, "d", "workload.dataset", int, 1),
        C=_num(ds, "C", "workload.dataset", int, 1),
        separation=_num(ds, "separation", "workload.dataset", float, 0),
        hidden=_num(mdl, "hidden", "workload.model", int, 1),
        linear=bool(mdl["linear"]),
        eval_every=_num(wl, "eval_every", "workload", int, 1, allow_none=True),
    )
    if kernel.C > kernel.n_train or kernel.C > kernel.n_test:
        raise ConfigError("workload.dataset.C", "more classes than samples in a split")
    for key in ("lr_boundaries", "lr_factors"):
        if not isinstance(wl[key], list):
            raise ConfigError(f"workload.{key}", "expected a list")
    try:
        user = Hyperparams(
            batch_size=_num(wl, "batch_size", "workload", int, 1),
            learning_rate=_num(wl, "learning_rate", "workload", float),
            momentum=_num(wl, "momentum", "workload", float),
            weight_decay=_num(wl, "weight_decay", "workload", float),
            total_workload=_num(wl, "total_workload", "workload", int, 1),
            lr_boundaries=tuple(wl["lr_boundaries"]),
            lr_factors=tuple(wl["lr_factors"]),
            momentum_variant=raw["plan"]["momentum_variant"],
        )
    except ValueError as exc:
        fail("workload", exc)
    if user.total_workload % user.batch_size:
        raise ConfigError("workload.total_workload", "must be a multiple of batch_size")
    tta_threshold = _num(wl, "tta_threshold", "workload", float)
    if not 0 < tta_threshold < 1:
        raise ConfigError("workload.tta_threshold", "must lie in (0, 1)")

    cl = raw["cluster"]
    n = _num(cl, "n_workers", "cluster", int, 1)
    steps = cl["base_step_time"]
    if isinstance(steps, list):
        if len(steps) != n:
            raise ConfigError("cluster.base_step_time", f"expected {n} values")
    else:
        steps = [steps] * n
    try:
        cluster = [
            WorkerProfile(i, float(t), _num(cl, "jitter", "cluster", float, 0), _num(cl, "base_net_latency", "cluster", float, 0))
            for i, t in enumerate(steps)
        ]
    except (TypeError, ValueError) as exc:
        fail("cluster.base_step_time", exc)

    ov = raw["overhead"]
    default_ov = SwitchOverheadModel.for_cluster(n)
    overhead = SwitchOverheadModel(
        default_ov.checkpoint_plus_restart if ov["checkpoint_plus_restart"] is None
        else _num(ov, "checkpoint_plus_restart", "overhead", float, 0),
        default_ov.cluster_init if ov["cluster_init"] is None else _num(ov, "cluster_init", "overhead", float, 0),
    )

    p = raw["plan"]
    try:
        detector = StragglerDetectorConfig(**p["detector"])
        dyn = DynamicCriterionConfig(**p["dynamic_criterion"]) if p["dynamic_criterion"] else None
    except (TypeError, ValueError) as exc:
        fail("plan", exc)

    search = stub = None
    if p["search"] is not None:
        s = p["search"]
        try:
            search = TimingSearchConfig(
                beta=float(s["beta"]), M=int(s["M"]), R=int(s["R"]), A=s["target_accuracy"],
                bsp_runs=s["bsp_runs"], integer_percent=bool(s["integer_percent"]),
            )
        except (TypeError, ValueError) as exc:
            fail("plan.search", exc)
        stub = s["stub_curve"]
        if stub is not None and stub["units"] not in ("percent", "fraction"):
            raise ConfigError("plan.search.stub_curve.units", "expected 'percent' or 'fraction'")

    plan = None
    if p["phases"] and search is None:
        phases = []
        for i, ph in enumerate(p["phases"]):
            if ph["protocol"] not in (BSP, ASP):
                raise ConfigError(f"plan.phases[{i}].protocol", f"unknown protocol {ph['protocol']!r}")
            try:
                hp = config_policy(user, n, ph["protocol"], asp_lr_scaling=p["asp_lr_scaling"])
            except ValueError as exc:
                fail("plan.asp_lr_scaling", exc)
            phases.append(Phase(ph["protocol"], _num(ph, "fraction", f"plan.phases[{i}]", float, 0), hp))
        plan = SwitchPlan(tuple(phases), user, n, p["straggler_policy"], dyn, detector, p["asp_lr_scaling"])
        try:
            plan.validate()
        except ValueError as exc:
            fail("plan", exc)
    elif search is None:
        raise ConfigError("plan.phases", "either phases or a search section is required")

    st = raw["stragglers"]
    if st["preset"] not in PRESETS:
        raise ConfigError("stragglers.preset", f"expected one of {sorted(PRESETS)}")
    try:
        injections = [StragglerInjection(**inj) for inj in st["injections"]]
    except (TypeError, ValueError) as exc:
        fail("stragglers.injections", exc)
    bad = [i.worker_id for i in injections if not 0 <= i.worker_id < n]
    if bad:
        raise ConfigError("stragglers.injections", f"unknown workers {bad}")

    return Experiment(
        raw=raw,
        kernel=kernel,
        user=user,
        cluster=cluster,
        plan=plan,
        search=search,
        stub_curve=stub,
        overhead=overhead,
        preset=st["preset"],
        injections=injections,
        seed=_num(raw, "seed", "", int),
        repeats=_num(raw, "repeats", "", int, 1),
        tta_threshold=tta_threshold,
    )


def load_config(path: str | Path) -> Experiment:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path} is not valid JSON: {exc}") from exc
    return parse_config(data)
