import csv
import json

import pytest

from syncswitch.cli import EXIT_CONFIG, EXIT_COVERAGE, EXIT_DIVERGED, EXIT_OK, TRACE_COLUMNS, main
from syncswitch.config import ConfigError, PRESETS, config_digest, expand_preset, load_config, parse_config

TINY = {
    "workload": {"dataset": {"n_train": 400, "n_test": 100}, "total_workload": 8 * 32 * 20,
                 "lr_boundaries": [], "lr_factors": [], "eval_every": 8 * 32 * 4},
    "overhead": {"checkpoint_plus_restart": 1, "cluster_init": 2},
}


def write(tmp_path, cfg, name="c.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def merged(**sections):
    cfg = json.loads(json.dumps(TINY))
    for key, value in sections.items():
        cfg.setdefault(key, {}).update(value) if isinstance(value, dict) else cfg.__setitem__(key, value)
    return cfg


def test_defaults_parse():
    exp = parse_config({})
    assert len(exp.cluster) == 8 and exp.plan.bsp_fraction == 0.25
    assert (exp.overhead.checkpoint_plus_restart, exp.overhead.cluster_init) == (36.0, 90.0)
    assert exp.user.batch_size == 32 and exp.preset == "none"
    assert exp.digest == config_digest(exp.raw) and len(exp.digest) == 16
    assert parse_config({"seed": 1}).digest != exp.digest


@pytest.mark.parametrize(
    "cfg, key",
    [
        ({"plan": {"detector": {"windw": 1}}}, "plan.detector.windw"),
        ({"bogus": 1}, "bogus"),
        ({"workload": {"batch_size": "x"}}, "workload.batch_size"),
        ({"workload": {"batch_size": 2.5}}, "workload.batch_size"),
        ({"workload": {"total_workload": 1000}}, "workload.total_workload"),
        ({"workload": {"tta_threshold": 1.2}}, "workload.tta_threshold"),
        ({"workload": {"dataset": {"C": 2000}}}, "workload.dataset.C"),
        ({"cluster": {"base_step_time": [0.1, 0.2]}}, "cluster.base_step_time"),
        ({"plan": {"phases": [{"protocol": "bsp"}]}}, "plan.phases[0].fraction"),
        ({"plan": {"phases": [{"protocol": "ssp", "fraction": 1.0}]}}, "plan.phases[0].protocol"),
        ({"plan": {"phases": [{"protocol": "bsp", "fraction": 0.5}]}}, "plan"),
        ({"plan": {"phases": []}}, "plan.phases"),
        ({"plan": {"search": {"stub_curve": {"units": "furlongs"}}}}, "plan.search.stub_curve.units"),
        ({"stragglers": {"preset": "severe"}}, "stragglers.preset"),
        ({"stragglers": {"injections": [{"worker_id": 99, "onset": 1, "duration": 1}]}}, "stragglers.injections"),
        ({"stragglers": {"injections": [{"worker_id": 0, "onset": 1}]}}, "stragglers.injections[0].duration"),
        ({"plan": {"detector": 3}}, "plan.detector"),
    ],
)
def test_config_errors_name_the_key(cfg, key):
    with pytest.raises(ConfigError) as info:
        parse_config(cfg)
    assert info.value.key == key


def test_per_worker_step_times():
    exp = parse_config({"cluster": {"n_workers": 2, "base_step_time": [0.1, 0.3]}})
    assert [p.base_step_time for p in exp.cluster] == [0.1, 0.3]


def test_plan_for_fraction_snaps_to_batches():
    exp = parse_config(TINY)
    plan = exp.plan_for_fraction(0.3)
    assert plan.phase_samples()[0] % 32 == 0
    assert plan.bsp_fraction == pytest.approx(48 / 160)
    assert [p.protocol for p in exp.plan_for_fraction(0.5, "asp_bsp").phases] == ["asp", "bsp"]


def test_preset_expansion():
    exp = parse_config(merged(stragglers={"preset": "moderate"}))
    inj = exp.injections_for(exp.plan, seed=3)
    n_strag, freq, latency = PRESETS["moderate"]
    assert len(inj) == n_strag * freq and len({i.worker_id for i in inj}) == n_strag
    assert all(i.added_latency == latency and i.duration <= 100 for i in inj)
    assert inj == exp.injections_for(exp.plan, seed=3)
    assert expand_preset("none", exp.cluster, exp.plan, exp.overhead, 0) == []
    mild = exp.with_overrides(preset="mild").injections_for(exp.plan, 0)
    assert len(mild) == 1 and mild[0].added_latency == 0.010


def test_load_config_rejects_bad_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(path)
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_simulate_writes_trace_and_summary(tmp_path):
    out = tmp_path / "out"
    assert main(["simulate", "--config", write(tmp_path, TINY), "--out", str(out), "--seed", "4"]) == EXIT_OK
    header = (out / "trace.csv").read_text().splitlines()[0]
    assert header == ",".join(TRACE_COLUMNS)
    rows = read_csv(out / "trace.csv")
    assert rows[0]["event"] == "start" and rows[-1]["event"] == "end"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed"] == 4 and summary["status"] == "completed"
    assert summary["num_switches"] == 1 and summary["switch_overhead_total_s"] == 1.0
    assert summary["bsp_samples"] + summary["asp_samples"] == 8 * 32 * 20
    assert summary["config_digest"] == parse_config(TINY).with_overrides(seed=4).digest
    assert summary["remapped_lr_steps"]["bsp_steps"] == 5
    assert not [p for p in out.iterdir() if p.name.startswith(".staging")]


def test_simulate_repeats_use_consecutive_seeds(tmp_path):
    out = tmp_path / "out"
    assert main(["simulate", "--config", write(tmp_path, TINY), "--out", str(out), "--repeats", "3"]) == EXIT_OK
    seeds = [json.loads((out / f"seed_{s}" / "summary.json").read_text())["seed"] for s in range(3)]
    assert seeds == [0, 1, 2]


def test_simulate_divergence_exit_code(tmp_path):
    cfg = merged(workload={"learning_rate": 1e307})
    out = tmp_path / "out"
    assert main(["simulate", "--config", write(tmp_path, cfg), "--out", str(out)]) == EXIT_DIVERGED
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "diverged" and summary["final_accuracy"] == 0.0


def test_search_stub_mode_and_plan_roundtrip(tmp_path):
    cfg = merged(plan={"search": {"stub_curve": {}}})
    out = tmp_path / "s"
    assert main(["search", "--config", write(tmp_path, cfg), "--out", str(out)]) == EXIT_OK
    log = read_csv(out / "search_log.csv")
    assert [float(r["fraction"]) for r in log] == [1.0, 0.5, 0.25, 0.125, 0.0625]
    plan_cfg = json.loads((out / "plan.json").read_text())
    assert plan_cfg["plan"]["phases"][0] == {"protocol": "bsp", "fraction": 0.0625}
    # the chosen plan feeds straight back into simulate
    assert main(["simulate", "--config", str(out / "plan.json"), "--out", str(tmp_path / "sim")]) == EXIT_OK


def test_search_threshold_override(tmp_path):
    cfg = merged(plan={"search": {"stub_curve": {"units": "fraction"}}})
    path = write(tmp_path, cfg)
    main(["search", "--config", path, "--out", str(tmp_path / "a")])
    main(["search", "--config", path, "--out", str(tmp_path / "b"), "--threshold", "0.05"])
    chosen = [json.loads((tmp_path / d / "plan.json").read_text())["plan"]["phases"][0]["fraction"] for d in "ab"]
    assert chosen == [0.25, 0.0625]


def test_search_without_section_is_a_config_error(tmp_path):
    assert main(["search", "--config", write(tmp_path, TINY), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_search_real_mode(tmp_path):
    cfg = merged(plan={"search": {"M": 2, "beta": 0.05}})
    out = tmp_path / "s"
    assert main(["search", "--config", write(tmp_path, cfg), "--out", str(out)]) == EXIT_OK
    log = read_csv(out / "search_log.csv")
    assert len(log) == 3 and all(float(r["cost"]) > 0 for r in log)


def test_sweep_and_analyze(tmp_path):
    path = write(tmp_path, TINY)
    sweep = tmp_path / "sweep"
    fractions = "1," + ",".join(str(k / 16) for k in range(1, 16))
    assert main(["sweep", "--config", path, "--out", str(sweep), "--fractions", fractions,
                 "--compare-order"]) == EXIT_OK
    rows = read_csv(sweep / "sweep.csv")
    assert len(rows) == 16 and rows[0]["fraction"] == "1.0"
    order = read_csv(sweep / "order.csv")
    assert [r["order"] for r in order] == ["bsp_asp", "asp_bsp"]
    assert len(read_csv(sweep / "sessions.csv")) == 16

    report = tmp_path / "report"
    assert main(["analyze", "--logs", str(tmp_path), "--out", str(report), "--trials", "20",
                 "--settings", "No,1,1", "--settings", "Yes,0,2"]) == EXIT_OK
    rows = read_csv(report / "cost_report.csv")
    assert [r["setting"] for r in rows] == ["(No, 1, 1)", "(Yes, 0, 2)"]
    assert all(0.0 <= float(r["success_probability"]) <= 1.0 for r in rows)


def test_sweep_rejects_bad_fraction_without_output(tmp_path):
    out = tmp_path / "o"
    assert main(["sweep", "--config", write(tmp_path, TINY), "--out", str(out), "--fractions", "0.5,1.5"]) == EXIT_CONFIG
    assert not (out / "sweep.csv").exists()


def test_analyze_coverage_errors(tmp_path):
    assert main(["analyze", "--logs", str(tmp_path), "--out", str(tmp_path / "r")]) == EXIT_COVERAGE
    sweep = tmp_path / "sw"
    main(["sweep", "--config", write(tmp_path, TINY), "--out", str(sweep), "--fractions", "1,0.5"])
    assert main(["analyze", "--logs", str(sweep), "--out", str(tmp_path / "r"), "--trials", "5"]) == EXIT_COVERAGE
    assert not (tmp_path / "r" / "cost_report.csv").exists()


@pytest.mark.parametrize("name", ["switch.json", "search_stub.json"])
def test_shipped_configs_parse(name):
    from pathlib import Path

    exp = load_config(Path(__file__).parents[1] / "configs" / name)
    assert exp.plan is not None or exp.search is not None
