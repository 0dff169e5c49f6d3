"""Command-line front-end: ``syncswitch {simulate,search,sweep,analyze}``.

Outputs are byte-deterministic for a given config and seed. Each command
writes into a temporary directory first and moves files into ``--out``
only once everything succeeded.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ConfigError, Experiment, canonical_json, load_config
from .metrics import (
    CoverageError,
    SearchSetting,
    SessionPool,
    converged_accuracy,
    final_accuracy,
    monte_carlo_search,
    tta,
)
from .policies import ASP, BSP, SearchSession, WorkloadError, binary_search_timing, remap_lr_schedule
from .simulator import PlanError, RunTrace, Simulation

logger = logging.getLogger("syncswitch")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_COVERAGE = 4

TRACE_COLUMNS = (
    "sim_time_s",
    "global_step",
    "protocol",
    "train_loss",
    "test_accuracy",
    "throughput_total",
    "active_workers",
    "event",
)
SESSION_COLUMNS = ("setting", "fraction", "run", "accuracy", "cost", "kind")


def fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


class AtomicOutput:
    """Stage files in a temp dir and rename them into place on success."""

    def __init__(self, out: str | Path):
        self.out = Path(out)

    def __enter__(self) -> "AtomicOutput":
        self.out.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.out))
        self.files: list[Path] = []
        return self

    def write(self, relpath: str, text: str) -> None:
        path = self.tmp / relpath
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        self.files.append(Path(relpath))

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                for rel in self.files:
                    dest = self.out / rel
                    dest.parent.mkdir(parents=True, exist_ok=True)
                    os.replace(self.tmp / rel, dest)
        finally:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


# --------------------------------------------------------------------------
# Runs and summaries
# --------------------------------------------------------------------------


def trace_csv(trace: RunTrace) -> str:
    rows = (
        (r.sim_time, r.global_step, r.protocol, _finite(r.train_loss), _finite(r.test_accuracy),
         r.throughput_total, r.active_workers, r.event)
        for r in trace.records
    )
    return csv_text(TRACE_COLUMNS, rows)


def _finite(x: float):
    return x if np.isfinite(x) else "nan"


def summary_record(trace: RunTrace, exp: Experiment, seed: int, plan) -> dict:
    conv = converged_accuracy(trace)
    reached = None if trace.diverged else tta(trace, exp.tta_threshold)
    summary = {
        "converged_accuracy": conv[0] if conv else None,
        "converged_step": conv[1] if conv else None,
        "final_accuracy": final_accuracy(trace),
        "total_time_s": trace.total_time,
        "tta_s": reached,
        "tta_threshold": exp.tta_threshold,
        "num_switches": trace.num_switches,
        "switch_overhead_total_s": trace.switch_overhead_total,
        "status": trace.status,
        "seed": seed,
        "config_digest": exp.digest,
        "bsp_samples": trace.samples[BSP],
        "asp_samples": trace.samples[ASP],
        "max_staleness": trace.staleness[ASP].max,
        "remapped_lr_steps": _remapped_steps(plan),
    }
    return summary


def _remapped_steps(plan):
    protos = [p.protocol for p in plan.phases]
    if protos != [BSP, ASP] or plan.straggler_policy != "none" or plan.dynamic_criterion is not None:
        return None
    try:
        bsp, asp, bounds = remap_lr_schedule(
            plan.base.total_workload, plan.base.lr_boundaries, plan.base.batch_size,
            plan.n_workers, plan.phases[0].fraction,
        )
    except WorkloadError:
        return None
    return {"bsp_steps": bsp, "asp_steps": asp, "boundaries": bounds}


def simulate_once(exp: Experiment, plan, seed: int) -> RunTrace:
    sim = Simulation(
        exp.cluster, plan, exp.kernel, exp.injections_for(plan, seed), seed, exp.overhead,
    )
    return sim.run()


def _seeds(exp: Experiment, repeats: int | None) -> list[int]:
    return [exp.seed + i for i in range(repeats or exp.repeats)]


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_simulate(exp: Experiment, out: Path, repeats: int | None = None) -> int:
    if exp.plan is None:
        raise ConfigError("plan.phases", "simulate needs a fixed plan")
    status = EXIT_OK
    seeds = _seeds(exp, repeats)
    with AtomicOutput(out) as o:
        for seed in seeds:
            trace = simulate_once(exp, exp.plan, seed)
            prefix = "" if len(seeds) == 1 else f"seed_{seed}/"
            o.write(prefix + "trace.csv", trace_csv(trace))
            o.write(prefix + "summary.json", json_text(summary_record(trace, exp, seed, exp.plan)))
            if trace.diverged:
                status = EXIT_DIVERGED
    return status


def stub_train_fn(stub: dict):
    """Analytic accuracy curve ``min(cap, intercept + slope * s)``.

    ``s`` is the BSP share in percent or as a fraction, per ``units``.
    Cost is linear between the ASP-only relative cost and 1 (BSP-only).
    """
    def train(fraction: float, run: int):
        s = fraction * 100.0 if stub["units"] == "percent" else fraction
        acc = min(stub["cap"], stub["intercept"] + stub["slope"] * s)
        if stub["noise"]:
            key = [int(stub["seed"]), int(round(fraction * 1e9)), int(run)]
            acc += stub["noise"] * np.random.default_rng(key).standard_normal()
        cost = stub["asp_relative_cost"] + (1.0 - stub["asp_relative_cost"]) * fraction
        return acc, cost
    return train


def simulation_train_fn(exp: Experiment):
    def train(fraction: float, run: int):
        plan = exp.plan_for_fraction(fraction)
        trace = simulate_once(exp, plan, exp.seed + run)
        acc = None if trace.diverged else final_accuracy(trace)
        return acc, trace.total_time
    return train


def _session_rows(sessions: Iterable[SearchSession]):
    return ((s.setting, s.fraction, s.run, s.accuracy, s.cost, s.kind) for s in sessions)


def cmd_search(exp: Experiment, out: Path) -> int:
    if exp.search is None:
        raise ConfigError("plan.search", "search needs a search section")
    train = stub_train_fn(exp.stub_curve) if exp.stub_curve else simulation_train_fn(exp)
    fraction, log = binary_search_timing(train, exp.search)
    chosen = exp.plan_for_fraction(fraction)
    plan_cfg = json.loads(canonical_json(exp.raw))
    plan_cfg["plan"]["search"] = None
    plan_cfg["plan"]["phases"] = [{"protocol": p.protocol, "fraction": p.fraction} for p in chosen.phases]
    with AtomicOutput(out) as o:
        o.write("search_log.csv", csv_text(SESSION_COLUMNS, _session_rows(log)))
        o.write("plan.json", json_text(plan_cfg))
    logger.info("chosen BSP fraction %.4f after %d sessions", fraction, len(log))
    return EXIT_OK


def cmd_sweep(
    exp: Experiment,
    out: Path,
    fractions: Sequence[float],
    repeats: int | None = None,
    compare_order: bool = False,
) -> int:
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise ConfigError("--fractions", f"fraction {f} outside [0, 1]")
    seeds = _seeds(exp, repeats)
    rows, sessions, status = [], [], EXIT_OK

    def sweep_row(order: str, f: float, log_sessions: bool = True):
        nonlocal status
        plan = exp.plan_for_fraction(f, order)
        accs, times = [], []
        for run, seed in enumerate(seeds):
            trace = simulate_once(exp, plan, seed)
            if trace.diverged:
                status = EXIT_DIVERGED
            acc = final_accuracy(trace)
            accs.append(acc)
            times.append(trace.total_time)
            if log_sessions:
                sessions.append((-1 if f == 1.0 else 0, plan.bsp_fraction, run, acc, trace.total_time,
                                 "bsp" if f == 1.0 else "candidate"))
        return plan.bsp_fraction, len(accs), float(np.mean(accs)), float(np.std(accs)), float(np.mean(times))

    for f in fractions:
        rows.append(sweep_row("bsp_asp", f))
    order_rows = []
    if compare_order:
        for order in ("bsp_asp", "asp_bsp"):
            order_rows.append((order,) + sweep_row(order, 0.5, log_sessions=False))
    with AtomicOutput(out) as o:
        o.write("sweep.csv", csv_text(("fraction", "runs", "mean_accuracy", "std_accuracy", "mean_time_s"), rows))
        o.write("sessions.csv", csv_text(SESSION_COLUMNS, sessions))
        if compare_order:
            o.write("order.csv", csv_text(
                ("order", "fraction", "runs", "mean_accuracy", "std_accuracy", "mean_time_s"), order_rows))
    return status


def read_sessions(logs: Path) -> list[tuple[float, float, float]]:
    files = sorted(p for p in logs.rglob("*.csv") if p.name in ("search_log.csv", "sessions.csv"))
    if not files:
        raise CoverageError(f"no search_log.csv or sessions.csv under {logs}")
    out = []
    for path in files:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.append((float(row["fraction"]), float(row["accuracy"]), float(row["cost"])))
    return out


def cmd_analyze(
    logs: Path,
    out: Path,
    settings: Sequence[SearchSetting],
    trials: int,
    beta: float,
    M: int = 4,
    seed: int = 0,
) -> int:
    pool = SessionPool(read_sessions(logs))
    rows = []
    for setting in settings:
        rep = monte_carlo_search(pool, setting, trials, beta, M, seed)
        rows.append((setting.label, rep.search_cost, rep.amortization, rep.effective_training,
                     rep.success_probability))
    with AtomicOutput(out) as o:
        o.write("cost_report.csv", csv_text(
            ("setting", "cost", "amortization", "effective", "success_probability"), rows))
    return EXIT_OK


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="syncswitch", description="Simulated BSP/ASP switching experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_config=True):
        if with_config:
            p.add_argument("--config", required=True, type=Path)
            p.add_argument("--seed", type=int)
            p.add_argument("--preset", choices=("none", "mild", "moderate"))
        p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("simulate", help="run a fixed plan")
    common(p)
    p.add_argument("--repeats", type=int)

    p = sub.add_parser("search", help="binary-search the switch point")
    common(p)
    p.add_argument("--threshold", type=float, help="accuracy margin beta")

    p = sub.add_parser("sweep", help="run a list of BSP fractions")
    common(p)
    p.add_argument("--fractions", type=_floats, required=True)
    p.add_argument("--repeats", type=int)
    p.add_argument("--compare-order", action="store_true", help="also compare BSP->ASP with ASP->BSP at 50%%")

    p = sub.add_parser("analyze", help="Monte-Carlo search-cost analysis over recorded sessions")
    common(p, with_config=False)
    p.add_argument("--logs", required=True, type=Path)
    p.add_argument("--settings", action="append", default=None,
                   help='search setting "Recurring,BSP runs,candidate runs", e.g. "No,5,5"; repeatable')
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--threshold", type=float, default=0.01)
    p.add_argument("--max-settings", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "analyze":
            settings = [SearchSetting.parse(s) for s in (args.settings or ["No,5,5", "No,3,3", "Yes,0,3"])]
            return cmd_analyze(args.logs, args.out, settings, args.trials, args.threshold, args.max_settings, args.seed)
        exp = load_config(args.config).with_overrides(seed=args.seed, preset=args.preset)
        if args.command == "simulate":
            return cmd_simulate(exp, args.out, args.repeats)
        if args.command == "search":
            if args.threshold is not None:
                if exp.search is None:
                    raise ConfigError("plan.search", "search needs a search section")
                raw = exp.raw
                raw["plan"]["search"]["beta"] = args.threshold
                exp = exp.with_overrides(plan=raw["plan"])
            return cmd_search(exp, args.out)
        if args.command == "sweep":
            return cmd_sweep(exp, args.out, args.fractions, args.repeats, args.compare_order)
    except (ConfigError, PlanError, WorkloadError) as exc:
        print(f"syncswitch: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CoverageError as exc:
        print(f"syncswitch: coverage error: {exc}", file=sys.stderr)
        return EXIT_COVERAGE
    except (ValueError, OSError) as exc:
        print(f"syncswitch: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
