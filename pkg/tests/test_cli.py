from __future__ import annotations

import csv
import io
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from braess_sim import cli, metrics as M
from braess_sim.config import (
    ConfigError,
    SweepSpec,
    config_from_dict,
    config_hash,
    config_to_dict,
    load_config,
    sweep_from_dict,
)
from braess_sim.records import read_run, write_run
from braess_sim.simulation import DemandSpec, SimConfig, run

SHORT = {"horizon_s": 240.0, "warmup_s": 60.0}


def write_yaml(path: Path, data) -> Path:
    path.write_text(yaml.safe_dump(data))
    return path


# ------------------------------------------------------------------ config


def test_config_defaults_and_units():
    cfg = config_from_dict({"variant": "added_path", "edge_length_m": 200, "demand_veh_per_hr": 600})
    assert cfg.variant == "added_path" and cfg.edge_length == 200
    assert cfg.demand.rates == {"A": 600.0}
    assert cfg.service_time == SimConfig().service_time


def test_config_multi_inflow_forms():
    a = config_from_dict({"demand_veh_per_hr": 300, "inflow_nodes": ["A", "C"]})
    b = config_from_dict({"demand_veh_per_hr": {"A": 300, "C": 300}})
    assert a == b


@pytest.mark.parametrize(
    "data, field",
    [
        ({"edge_length_m": "long"}, "edge_length_m"),
        ({"edge_lenght_m": 50}, "edge_lenght_m"),
        ({"dt_s": 2.0}, "dt_s"),
        ({"idm_s0_m": -1}, "idm_s0_m"),
        ({"seed": 1.5}, "seed"),
        ({"arrival_process": "burst"}, "arrival_process"),
        ({"variant": "ring"}, "variant"),
        ({"inflow_nodes": []}, "inflow_nodes"),
    ],
)
def test_config_errors_name_the_field(data, field):
    with pytest.raises(ConfigError) as info:
        config_from_dict(data)
    assert info.value.field == field
    assert str(info.value).startswith(field)


def test_config_round_trip():
    cfg = config_from_dict({"variant": "added_path", "edge_length_m": 300, "demand_veh_per_hr": 450.5,
                            "idm_s0_m": 2.5, "service_time_s": 3.0, "seed": 7})
    assert config_from_dict(config_to_dict(cfg)) == cfg


field_values = st.sampled_from([
    ("edge_length_m", 51.0), ("base_speed_limit_mps", 14.0), ("added_path_speed_limit_mps", 30.0),
    ("dt_s", 0.05), ("horizon_s", 3000.0), ("warmup_s", 500.0), ("service_time_s", 2.5),
    ("reroute_enabled", True), ("connector_length_m", 12.0), ("through_speed_cap", False),
    ("arrival_process", "poisson"), ("seed", 9), ("idm_s0_m", 2.1), ("idm_time_headway_s", 1.1),
    ("idm_max_accel_mps2", 2.0), ("idm_comfort_decel_mps2", 4.0), ("idm_delta", 3.0),
    ("idm_vehicle_length_m", 4.5), ("est_accel_mps2", 2.5), ("est_end_speed_mps", 1.5),
    ("est_small_accel_threshold_mps2", 0.2), ("est_min_speed_mps", 0.2), ("demand_veh_per_hr", 401.0),
    ("variant", "added_path"),
])


@given(field_values)
def test_hash_changes_iff_a_field_changes(change):
    base = config_from_dict({})
    key, value = change
    changed = config_from_dict({key: value})
    assert config_hash(changed) != config_hash(base)
    assert config_hash(config_from_dict({})) == config_hash(base)
    assert config_hash(config_from_dict(config_to_dict(changed))) == config_hash(changed)


def test_load_config_errors(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("edge_length_m: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_default_sweep_matrix():
    spec = SweepSpec()
    assert spec.size == 144
    cells = spec.cells()
    assert len(cells) == 144
    assert len({config_hash(config_from_dict(c)) for c in cells}) == 144


def test_sweep_spec_errors():
    with pytest.raises(ConfigError) as info:
        sweep_from_dict({"demands_veh_per_hr": []})
    assert info.value.field == "demands"
    with pytest.raises(ConfigError):
        sweep_from_dict({"base": {"edge_length_m": 50}})
    with pytest.raises(ConfigError):
        sweep_from_dict({"colours": ["red"]})


# --------------------------------------------------------------------- run


def test_cmd_run_writes_csvs_deterministically(tmp_path):
    cfg = write_yaml(tmp_path / "cfg.yaml", {"variant": "added_path", "demand_veh_per_hr": 400, **SHORT})
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    for name in ("trips.csv", "samples.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a" / "trips.csv").read_text().splitlines()[0]
    assert header == "vehicle_id,route_id,origin,entry_time,exit_time,travel_time"
    assert (tmp_path / "a" / "samples.csv").read_text().startswith("clock,active_count,")


def test_cmd_run_malformed_config(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "cfg.yaml", {"edge_length_m": "fifty"})
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "edge_length_m" in capsys.readouterr().err


def test_cmd_run_collision_exit(tmp_path, monkeypatch):
    from braess_sim import dynamics

    def boom(*a, **k):
        raise dynamics.CollisionError("non-positive gap", {"vehicle": 1})

    monkeypatch.setattr(cli.World, "run", boom)
    cfg = write_yaml(tmp_path / "cfg.yaml", SHORT)
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    diag = json.loads((tmp_path / "o" / "diagnostics.json").read_text())
    assert diag["vehicle"] == 1


def test_usage_errors():
    assert cli.main([]) == 2
    assert cli.main(["fly"]) == 2


def test_run_files_round_trip(tmp_path):
    cfg = SimConfig("added_path", demand=DemandSpec({"A": 500, "C": 100}), horizon=300, warmup=60)
    log = run(cfg)
    write_run(log, cfg, tmp_path)
    cfg2, log2 = read_run(tmp_path)
    assert cfg2 == cfg
    assert log2.trips == log.trips
    assert np.array_equal(log2.sample_clock, log.sample_clock)
    assert np.array_equal(log2.sample_occupancy, log.sample_occupancy)
    assert M.output_flow(log2) == M.output_flow(log)
    assert M.flow_density_curve(log2) == M.flow_density_curve(log)


# ------------------------------------------------------------------- sweep


def small_spec(tmp_path, **over):
    data = {
        "variants": ["baseline", "added_path"],
        "demands_veh_per_hr": [50, 400, 800],
        "edge_lengths_m": [50, 200, 300],
        "base_speed_limits_mps": [15],
        "seeds": [0],
        "base": SHORT,
    }
    data.update(over)
    return write_yaml(tmp_path / "spec.yaml", data)


def test_sweep_empty_demands(tmp_path):
    spec = small_spec(tmp_path, demands_veh_per_hr=[])
    assert cli.main(["sweep", "--spec", str(spec), "--out", str(tmp_path / "s")]) == 2


@pytest.fixture(scope="module")
def swept(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sweep")
    spec = small_spec(tmp)
    out = tmp / "s"
    assert cli.main(["sweep", "--spec", str(spec), "--out", str(out)]) == 0
    return spec, out


def test_sweep_manifest(swept):
    _, out = swept
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["size"] == 18
    assert all(r["status"] == "complete" for r in manifest["runs"])
    assert len({r["config_hash"] for r in manifest["runs"]}) == 18


def test_sweep_resumes_only_missing(swept, tmp_path):
    spec, out = swept
    manifest = json.loads((out / "manifest.json").read_text())
    victim = out / manifest["runs"][3]["path"]
    (victim / "DONE").unlink()
    before = (out / manifest["runs"][0]["path"] / "trips.csv").stat().st_mtime_ns
    assert cli.main(["sweep", "--spec", str(spec), "--out", str(out)]) == 0
    again = json.loads((out / "manifest.json").read_text())["runs"]
    assert [r.get("skipped", False) for r in again].count(False) == 1
    assert not again[3].get("skipped", False)
    assert (out / manifest["runs"][0]["path"] / "trips.csv").stat().st_mtime_ns == before


def test_parallel_sweep_identical_bytes(swept, tmp_path):
    spec, out = swept
    out2 = tmp_path / "p"
    assert cli.main(["sweep", "--spec", str(spec), "--out", str(out2), "--parallelism", "2"]) == 0
    for r in json.loads((out / "manifest.json").read_text())["runs"]:
        for name in ("trips.csv", "samples.csv"):
            assert (out / r["path"] / name).read_bytes() == (out2 / r["path"] / name).read_bytes()


def parse(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.mark.parametrize("analysis", ["flow_vs_demand", "tt_vs_demand", "route_shares", "flow_density"])
def test_analyses_round_trip(swept, capsys, analysis):
    _, out = swept
    assert cli.main(["analyze", str(out), "--analysis", analysis]) == 0
    rows = parse(capsys.readouterr().out)
    root, runs = cli.load_manifest(out)
    header, expected = cli.analysis_rows(analysis, root, runs)
    assert list(rows[0].keys()) == list(header)
    assert len(rows) == len(expected)
    for got, want in zip(rows, expected):
        assert float(got["value"]) == want[-1] or (np.isnan(want[-1]) and got["value"] == "nan")
        assert got["variant"] == want[0]


def test_flow_vs_demand_rows(swept, capsys):
    _, out = swept
    cli.main(["analyze", str(out / "manifest.json"), "--analysis", "flow_vs_demand"])
    rows = parse(capsys.readouterr().out)
    keys = {(r["variant"], float(r["edge_length_m"]), float(r["base_speed_limit_mps"]), float(r["demand_veh_per_hr"])) for r in rows}
    assert len(keys) == 18
    assert {r["statistic"] for r in rows} == {"output_flow_veh_per_hr"}


def test_critical_points_analysis(swept, capsys):
    _, out = swept
    assert cli.main(["analyze", str(out), "--analysis", "critical_points", "--limit", "15"]) == 0
    rows = parse(capsys.readouterr().out)
    assert [r["kind"] for r in rows] == ["point", "point", "point", "fit"]
    assert [float(r["edge_length_m"]) for r in rows[:3]] == [50.0, 200.0, 300.0]


def test_unknown_analysis(swept):
    _, out = swept
    assert cli.main(["analyze", str(out), "--analysis", "vibes"]) == 2


def test_analyze_reports_missing_runs(swept, tmp_path, capsys):
    _, out = swept
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["runs"][0]["status"] = "failed"
    broken = tmp_path / "manifest.json"
    broken.write_text(json.dumps(manifest))
    # point the copied manifest at the real run directories
    for r in manifest["runs"]:
        r["path"] = str(out / r["path"])
    broken.write_text(json.dumps(manifest))
    assert cli.main(["analyze", str(broken), "--analysis", "flow_vs_demand"]) == 1
    assert manifest["runs"][0]["config_hash"] in capsys.readouterr().err


# ---------------------------------------------------------------- ue-solve


def ue(capsys, *args):
    assert cli.main(["ue-solve", *args]) == 0
    return parse(capsys.readouterr().out)


def value(rows, quantity, path=""):
    return next(float(r["value"]) for r in rows if r["quantity"] == quantity and r["path"] == path)


def test_ue_solve_bundled(capsys):
    rows = ue(capsys, "four_edge_diamond", "five_edge_diamond")
    assert value(rows, "path_flow", "ACB") == 3.0
    assert value(rows, "braess_delta") == 9.0
    assert [float(r["value"]) for r in rows if r["problem"] == "five_edge_diamond" and r["quantity"] == "path_flow"] == [2.0, 2.0, 2.0]


def test_ue_solve_file_and_zero_demand(tmp_path, capsys):
    from braess_sim.equilibrium import diamond, problem_to_dict

    p = write_yaml(tmp_path / "zero.yaml", {**problem_to_dict(diamond(True)), "demand_veh": 0})
    rows = ue(capsys, str(p))
    assert all(float(r["value"]) == 0 for r in rows if r["quantity"] == "path_flow")


def test_ue_solve_errors(tmp_path):
    assert cli.main(["ue-solve", str(tmp_path / "nope.yaml")]) == 2
    bad = write_yaml(tmp_path / "bad.yaml", {"edges": [{"from": "A", "to": "B", "slope": -1}], "demand_veh": 1})
    assert cli.main(["ue-solve", str(bad)]) == 2
