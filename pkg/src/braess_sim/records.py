"""CSV serialisation of run logs.

Floats are written with ``repr`` so that reading a file back reproduces the
in-memory values bit for bit.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .config import config_from_dict, dump_config
from .metrics import MetricsLog, TripRecord
from .simulation import SimConfig

TRIPS_FILE = "trips.csv"
SAMPLES_FILE = "samples.csv"
CONFIG_FILE = "config.yaml"
SUMMARY_FILE = "summary.yaml"

TRIP_COLUMNS = ("vehicle_id", "route_id", "origin", "entry_time", "exit_time", "travel_time")


def fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(rows: Iterable[Sequence], header: Sequence[str], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])


def csv_text(rows: Iterable[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    write_csv(rows, header, buf)
    return buf.getvalue()


def trips_csv(log: MetricsLog) -> str:
    rows = ((t.vehicle_id, t.route_id, t.origin, t.entry_time, t.exit_time, t.travel_time) for t in log.trips)
    return csv_text(rows, TRIP_COLUMNS)


def samples_csv(log: MetricsLog) -> str:
    header = ["clock", "active_count", *log.element_ids]
    occ = log.sample_occupancy.tolist()
    rows = ([c, int(a), *o] for c, a, o in zip(log.sample_clock.tolist(), log.sample_active.tolist(), occ))
    return csv_text(rows, header)


def summary(log: MetricsLog) -> dict:
    return {
        "arrivals_scheduled": log.arrivals_scheduled,
        "arrivals_due": log.arrivals_due,
        "deferred_arrivals": log.deferred_arrivals,
        "deferral_events": log.deferral_events,
        "pending_at_end": log.pending_at_end,
        "completed_trips": len(log.trips),
        "element_lengths_m": dict(zip(log.element_ids, map(float, log.element_lengths))),
    }


def write_run(log: MetricsLog, config: SimConfig, out: str | Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(dump_config(config))
    (out / TRIPS_FILE).write_text(trips_csv(log))
    (out / SAMPLES_FILE).write_text(samples_csv(log))
    (out / SUMMARY_FILE).write_text(yaml.safe_dump(summary(log), sort_keys=True))


def read_trips(path: str | Path) -> list[TripRecord]:
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        return [
            TripRecord(int(row["vehicle_id"]), row["route_id"], row["origin"],
                       float(row["entry_time"]), float(row["exit_time"]), float(row["travel_time"]))
            for row in r
        ]


def read_run(path: str | Path) -> tuple[SimConfig, MetricsLog]:
    """Rebuild the config and log of a run directory written by :func:`write_run`."""
    path = Path(path)
    config = config_from_dict(yaml.safe_load((path / CONFIG_FILE).read_text()))
    info = yaml.safe_load((path / SUMMARY_FILE).read_text())
    with open(path / SAMPLES_FILE, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        data = [row for row in r]
    element_ids = tuple(header[2:])
    clock = np.array([float(row[0]) for row in data])
    active = np.array([int(row[1]) for row in data], dtype=np.int32)
    occ = np.array([[int(x) for x in row[2:]] for row in data], dtype=np.int16).reshape(len(data), len(element_ids))
    lengths = tuple(float(info["element_lengths_m"][e]) for e in element_ids)
    log = MetricsLog(
        trips=read_trips(path / TRIPS_FILE),
        sample_clock=clock,
        sample_active=active,
        sample_occupancy=occ,
        element_ids=element_ids,
        element_lengths=lengths,
        warmup=config.warmup,
        horizon=config.horizon,
        dt=config.dt,
        arrivals_scheduled=info["arrivals_scheduled"],
        arrivals_due=info["arrivals_due"],
        deferred_arrivals=info["deferred_arrivals"],
        deferral_events=info["deferral_events"],
        pending_at_end=info["pending_at_end"],
        config=config.to_dict(),
    )
    return config, log
