"""Command-line front end: single runs, sweeps, analyses and static UE solves."""

from __future__ import annotations

import argparse
import json
import sys
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import equilibrium as eq
from . import metrics as M
from .config import (
    ConfigError,
    SweepSpec,
    config_from_dict,
    config_hash,
    load_config,
    load_sweep,
)
from .dynamics import CollisionError
from .records import CONFIG_FILE, SAMPLES_FILE, SUMMARY_FILE, TRIPS_FILE, csv_text, read_run, write_run
from .simulation import IntegrityError, SimConfig, World

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_ABORT = 3

MANIFEST = "manifest.json"
ANALYSES = ("flow_vs_demand", "tt_vs_demand", "route_shares", "flow_density", "critical_points")
DEFAULT_SPEC = "default"


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


# ------------------------------------------------------------------- run


def _with_seed(cfg: SimConfig, seed: int | None) -> SimConfig:
    if seed is None:
        return cfg
    from dataclasses import replace

    return replace(cfg, demand=replace(cfg.demand, seed=seed))


def cmd_run(args) -> int:
    try:
        cfg = _with_seed(load_config(args.config), args.seed)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_USAGE
    out = Path(args.out)
    try:
        log = World(cfg).run()
    except (CollisionError, IntegrityError) as exc:
        out.mkdir(parents=True, exist_ok=True)
        diag = getattr(exc, "diagnostics", {}) or {}
        (out / "diagnostics.json").write_text(json.dumps({"error": str(exc), **diag}, indent=2, default=str))
        _err(f"simulation aborted: {exc}")
        return EXIT_ABORT
    write_run(log, cfg, out)
    return EXIT_OK


# ----------------------------------------------------------------- sweep


def _run_cell(cell: dict, run_dir: str) -> dict:
    cfg = config_from_dict(cell)
    t0 = time.perf_counter()
    try:
        log = World(cfg).run()
    except (CollisionError, IntegrityError) as exc:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        diag = getattr(exc, "diagnostics", {}) or {}
        (Path(run_dir) / "diagnostics.json").write_text(json.dumps({"error": str(exc), **diag}, default=str))
        return {"status": "aborted", "error": str(exc), "wall_time_s": time.perf_counter() - t0}
    write_run(log, cfg, run_dir)
    (Path(run_dir) / "DONE").write_text(config_hash(cfg) + "\n")
    return {"status": "complete", "wall_time_s": time.perf_counter() - t0}


def _cell_done(run_dir: Path, digest: str) -> bool:
    marker = run_dir / "DONE"
    if not marker.exists() or marker.read_text().strip() != digest:
        return False
    return all((run_dir / f).exists() for f in (CONFIG_FILE, TRIPS_FILE, SAMPLES_FILE, SUMMARY_FILE))


def run_sweep(spec: SweepSpec, out: str | Path, parallelism: int = 1, log=print) -> dict:
    """Run every cell not already complete; returns the manifest written to ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cells = spec.cells()
    log(f"sweep: {len(cells)} runs")
    entries: list[dict[str, Any]] = []
    todo = []
    for cell in cells:
        cfg = config_from_dict(cell)
        digest = config_hash(cfg)
        rel = f"runs/{digest[:16]}"
        entry = {
            "config_hash": digest,
            "path": rel,
            "variant": cfg.variant,
            "edge_length_m": cfg.edge_length,
            "base_speed_limit_mps": cfg.base_speed_limit,
            "demand_veh_per_hr": float(cell["demand_veh_per_hr"]),
            "inflow_nodes": list(cfg.inflow_nodes),
            "seed": cfg.demand.seed,
            "status": "pending",
            "wall_time_s": None,
        }
        entries.append(entry)
        if _cell_done(out / rel, digest):
            entry["status"] = "complete"
            entry["skipped"] = True
        else:
            todo.append((entry, cell))
    log(f"sweep: {len(cells) - len(todo)} already complete, {len(todo)} to run")
    if parallelism <= 1:
        results = [_run_cell(cell, str(out / e["path"])) for e, cell in todo]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            futures = [pool.submit(_run_cell, cell, str(out / e["path"])) for e, cell in todo]
            results = []
            for f in futures:
                try:
                    results.append(f.result())
                except Exception as exc:  # worker crashed outright
                    results.append({"status": "failed", "error": repr(exc), "wall_time_s": None})
    for (entry, _), res in zip(todo, results):
        entry.update(res)
    manifest = {"runs": entries, "size": len(entries)}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def cmd_sweep(args) -> int:
    try:
        spec = SweepSpec() if args.spec == DEFAULT_SPEC else load_sweep(args.spec)
        if args.seed is not None:
            spec = SweepSpec(**{**spec.__dict__, "seeds": (args.seed,)})
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_USAGE
    if args.parallelism < 1:
        _err("--parallelism must be at least 1")
        return EXIT_USAGE
    manifest = run_sweep(spec, args.out, args.parallelism, log=lambda m: print(m, file=sys.stderr))
    bad = [e for e in manifest["runs"] if e["status"] != "complete"]
    for e in bad:
        _err(f"run {e['config_hash']} {e['status']}: {e.get('error', '')}")
    return EXIT_FAILED if bad else EXIT_OK


# --------------------------------------------------------------- analyze

KEY_COLUMNS = ("variant", "edge_length_m", "base_speed_limit_mps", "inflow_nodes", "demand_veh_per_hr", "seed")
TIDY_HEADER = (*KEY_COLUMNS, "statistic", "key", "value")
CRITICAL_HEADER = (
    "kind", "base_speed_limit_mps", "inflow_nodes", "seed", "edge_length_m",
    "demand_at_crossing", "travel_time_at_crossing", "slope", "intercept", "r2",
)


class MissingRuns(Exception):
    def __init__(self, hashes: list[str]):
        super().__init__(f"{len(hashes)} run(s) missing or incomplete")
        self.hashes = hashes


def load_manifest(path: str | Path) -> tuple[Path, list[dict]]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    data = json.loads(path.read_text())
    return path.parent, data["runs"]


def _selected(runs, limit):
    return [r for r in runs if limit is None or r["base_speed_limit_mps"] == limit]


def _logs(root: Path, runs: list[dict]) -> list[tuple[dict, M.MetricsLog]]:
    missing = [r["config_hash"] for r in runs if r["status"] != "complete" or not _cell_done(root / r["path"], r["config_hash"])]
    if missing:
        raise MissingRuns(missing)
    return [(r, read_run(root / r["path"])[1]) for r in runs]


def _key(r: dict) -> tuple:
    return (r["variant"], r["edge_length_m"], r["base_speed_limit_mps"], "+".join(r["inflow_nodes"]),
            r["demand_veh_per_hr"], r["seed"])


def analysis_rows(name: str, root: Path, runs: list[dict]) -> tuple[tuple[str, ...], list[tuple]]:
    """Rows and header of one analysis over the runs of a manifest."""
    if name not in ANALYSES:
        raise UsageError(f"unknown analysis {name!r}; choose from {', '.join(ANALYSES)}")
    if name == "critical_points":
        return CRITICAL_HEADER, _critical_rows(root, runs)
    rows = []
    for r, log in _logs(root, runs):
        k = _key(r)
        if name == "flow_vs_demand":
            rows.append((*k, "output_flow_veh_per_hr", "", M.output_flow(log)))
        elif name == "tt_vs_demand":
            try:
                tt = M.mean_travel_time(log)
            except M.UndefinedMetric:
                tt = float("nan")
            rows.append((*k, "mean_travel_time_s", "", tt))
        elif name == "route_shares":
            flows, shares = M.route_flows(log)
            for route in sorted(flows):
                rows.append((*k, "route_flow_veh_per_hr", route, flows[route]))
                rows.append((*k, "route_share", route, shares[route]))
        else:
            for i, (density, flow) in enumerate(M.flow_density_curve(log)):
                rows.append((*k, "density_veh_per_km", str(i), density))
                rows.append((*k, "flow_veh_per_hr", str(i), flow))
    return TIDY_HEADER, sorted(rows, key=lambda row: tuple(str(x) for x in row[:-1]))


def critical_points_by_condition(logs: list[tuple[dict, M.MetricsLog]]):
    """Crossings per (limit, inflow set, seed, edge length) and the fitted line per group."""
    curves: dict = defaultdict(dict)
    for r, log in logs:
        group = (r["base_speed_limit_mps"], "+".join(r["inflow_nodes"]), r["seed"], r["edge_length_m"])
        try:
            tt = M.mean_travel_time(log)
        except M.UndefinedMetric:
            tt = float("nan")
        curves[group].setdefault(r["variant"], []).append((r["demand_veh_per_hr"], tt))
    points: dict = defaultdict(list)
    for (limit, inflow, seed, length), by_variant in sorted(curves.items()):
        if set(by_variant) != {"baseline", "added_path"}:
            continue
        cp = M.find_critical_point(sorted(by_variant["baseline"]), sorted(by_variant["added_path"]), length, limit)
        points[(limit, inflow, seed)].append((length, cp))
    return points


def _critical_rows(root: Path, runs: list[dict]) -> list[tuple]:
    nan = float("nan")
    rows = []
    for (limit, inflow, seed), pts in sorted(critical_points_by_condition(_logs(root, runs)).items()):
        found = []
        for length, cp in pts:
            if cp is None:
                rows.append(("point", limit, inflow, seed, length, nan, nan, nan, nan, nan))
            else:
                found.append(cp)
                rows.append(("point", limit, inflow, seed, length, cp.demand_at_crossing, cp.travel_time_at_crossing, nan, nan, nan))
        if len({p.edge_length for p in found}) >= 3:
            slope, intercept, r2 = M.fit_critical_line(found)
        else:
            slope = intercept = r2 = nan
        rows.append(("fit", limit, inflow, seed, nan, nan, nan, slope, intercept, r2))
    return rows


def cmd_analyze(args) -> int:
    try:
        root, runs = load_manifest(args.manifest)
    except (OSError, ValueError, KeyError) as exc:
        _err(f"cannot read manifest: {exc}")
        return EXIT_USAGE
    try:
        header, rows = analysis_rows(args.analysis, root, _selected(runs, args.limit))
    except UsageError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except MissingRuns as exc:
        _err(str(exc))
        for h in exc.hashes:
            print(f"missing {h}", file=sys.stderr)
        return EXIT_FAILED
    sys.stdout.write(csv_text(rows, header))
    return EXIT_OK


# -------------------------------------------------------------- ue-solve

UE_HEADER = ("problem", "quantity", "path", "value")


def ue_rows(problems: Sequence[eq.UEProblem], method: str = "auto") -> list[tuple]:
    rows = []
    results = []
    for p in problems:
        res = eq.solve(p, method)
        results.append(res)
        for path in p.path_ids:
            rows.append((p.name, "path_flow", path, res.path_flows[path]))
        for path in p.path_ids:
            rows.append((p.name, "path_cost", path, res.path_costs[path]))
        rows.append((p.name, "min_cost", "", res.min_cost))
        rows.append((p.name, "wardrop_violation", "", res.violation))
    if len(problems) == 2:
        small, big = sorted(zip(problems, results), key=lambda pr: len(pr[0].paths))
        if len(small[0].paths) < len(big[0].paths):
            eq.braess_delta(small[0], big[0], method)  # validates the pair
            rows.append((f"{big[0].name}-{small[0].name}", "braess_delta", "", big[1].min_cost - small[1].min_cost))
    return rows


def cmd_ue_solve(args) -> int:
    try:
        problems = [eq.load_problem(p) for p in args.problems]
        if args.demand is not None:
            problems = [p.with_demand(args.demand) for p in problems]
        rows = ue_rows(problems, args.method)
    except FileNotFoundError as exc:
        _err(f"no such problem file: {exc}")
        return EXIT_USAGE
    except eq.EquilibriumError as exc:
        _err(str(exc))
        return EXIT_USAGE
    sys.stdout.write(csv_text(rows, UE_HEADER))
    return EXIT_OK


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="braess-sim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one simulation and write trips/samples CSVs")
    p.add_argument("--config", required=True, help="YAML run config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a cartesian sweep of configs")
    p.add_argument("--spec", default=DEFAULT_SPEC, help="YAML sweep spec, or 'default' for the standard matrix")
    p.add_argument("--out", required=True, help="output directory (manifest.json and runs/)")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="replace the spec's seed list with one seed")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="tidy CSV analysis of a completed sweep")
    p.add_argument("manifest", help="manifest.json or the sweep directory")
    p.add_argument("--analysis", required=True, help=", ".join(ANALYSES))
    p.add_argument("--limit", type=float, default=None, help="only runs with this base speed limit (m/s)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ue-solve", help="static user equilibrium of linear-cost problems")
    p.add_argument("problems", nargs="+", help="problem YAML files or bundled names (four_edge_diamond, five_edge_diamond)")
    p.add_argument("--method", choices=("auto", "integer", "continuous"), default="auto")
    p.add_argument("--demand", type=float, default=None, help="override the demand of every problem")
    p.set_defaults(func=cmd_ue_solve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
