"""Trip logs and the network-level analyses built on them."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

FLOW_BIN = 60.0


class UndefinedMetric(ValueError):
    """A statistic was requested over an empty population."""


@dataclass(frozen=True)
class TripRecord:
    vehicle_id: int
    route_id: str
    origin: str
    entry_time: float
    exit_time: float
    travel_time: float


@dataclass
class MetricsLog:
    trips: list[TripRecord]
    sample_clock: np.ndarray
    sample_active: np.ndarray
    sample_occupancy: np.ndarray
    element_ids: tuple[str, ...]
    element_lengths: tuple[float, ...]
    warmup: float
    horizon: float
    dt: float
    arrivals_scheduled: int = 0
    arrivals_due: int = 0
    deferred_arrivals: int = 0
    deferral_events: int = 0
    pending_at_end: int = 0
    config: dict = field(default_factory=dict)

    @property
    def window(self) -> float:
        return self.horizon - self.warmup

    @property
    def total_lane_length(self) -> float:
        return float(sum(self.element_lengths))

    def measured_trips(self) -> list[TripRecord]:
        """Trips that finished inside the measurement window."""
        lo, hi = self.warmup, self.horizon + 1e-9
        return [t for t in self.trips if lo <= t.exit_time <= hi]

    @property
    def scheduled_inflow(self) -> float:
        """Scheduled arrival rate over the whole horizon, veh/hr."""
        return self.arrivals_scheduled * 3600.0 / self.horizon


@dataclass(frozen=True)
class CriticalPoint:
    edge_length: float | None
    speed_limit: float | None
    demand_at_crossing: float
    travel_time_at_crossing: float


def output_flow(log: MetricsLog) -> float:
    """Completions per hour inside the measurement window."""
    if log.window <= 0:
        raise ValueError("empty measurement window")
    return len(log.measured_trips()) * 3600.0 / log.window


def route_flows(log: MetricsLog) -> tuple[dict[str, float], dict[str, float]]:
    """Per-route output flow (veh/hr) and share of measured trips."""
    trips = log.measured_trips()
    counts = Counter(t.route_id for t in trips)
    flows = {r: n * 3600.0 / log.window for r, n in sorted(counts.items())}
    total = sum(counts.values())
    shares = {r: n / total for r, n in sorted(counts.items())} if total else {}
    return flows, shares


def mean_travel_time(log: MetricsLog) -> float:
    trips = log.measured_trips()
    if not trips:
        raise UndefinedMetric("no trips completed after warmup")
    return math.fsum(t.travel_time for t in trips) / len(trips)


def find_critical_point(
    baseline_curve: Sequence[tuple[float, float]],
    added_curve: Sequence[tuple[float, float]],
    edge_length: float | None = None,
    speed_limit: float | None = None,
) -> CriticalPoint | None:
    """Lowest demand where the added-path travel time rises above the baseline.

    Curves are ``(demand, travel_time)`` points on a shared demand grid; the
    difference is interpolated linearly between grid points.
    """
    if len(baseline_curve) != len(added_curve):
        raise ValueError("curves must share the demand grid")
    if len(baseline_curve) < 3:
        raise ValueError("need at least three demand levels")
    xs = [float(d) for d, _ in baseline_curve]
    if xs != [float(d) for d, _ in added_curve]:
        raise ValueError("curves must share the demand grid")
    if any(b <= a for a, b in zip(xs, xs[1:])):
        raise ValueError("demand grid must be strictly increasing")
    base = [float(t) for _, t in baseline_curve]
    added = [float(t) for _, t in added_curve]
    diff = [a - b for a, b in zip(added, base)]

    for i in range(len(diff) - 1):
        if diff[i] >= 0:
            continue
        j = i + 1
        while j < len(diff) and diff[j] == 0:
            j += 1
        if j == len(diff) or diff[j] < 0:
            continue
        if j > i + 1:
            x = xs[i + 1]
            tt = base[i + 1]
        else:
            frac = -diff[i] / (diff[j] - diff[i])
            x = xs[i] + frac * (xs[j] - xs[i])
            tt = base[i] + frac * (base[j] - base[i])
        return CriticalPoint(edge_length, speed_limit, x, tt)
    return None


def fit_critical_line(points: Sequence[CriticalPoint]) -> tuple[float, float, float]:
    """Least-squares line of crossing demand against edge length: (slope, intercept, R^2)."""
    if len(points) < 3:
        raise ValueError("need at least three critical points")
    x = np.array([p.edge_length for p in points], dtype=float)
    y = np.array([p.demand_at_crossing for p in points], dtype=float)
    if np.ptp(x) == 0:
        raise ValueError("degenerate fit: all edge lengths are equal")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def flow_density_curve(log: MetricsLog, bin_s: float = FLOW_BIN) -> list[tuple[float, float]]:
    """(density veh/km, flow veh/hr) per time bin over the measurement window."""
    length_km = log.total_lane_length / 1000.0
    clock = log.sample_clock
    exits = np.array([t.exit_time for t in log.trips], dtype=float)
    n_bins = int(math.floor(log.window / bin_s + 1e-9))
    points = []
    for b in range(n_bins):
        lo = log.warmup + b * bin_s
        hi = lo + bin_s
        mask = (clock > lo + 1e-9) & (clock <= hi + 1e-9)
        density = float(log.sample_active[mask].mean()) / length_km if mask.any() else 0.0
        done = int(np.count_nonzero((exits > lo + 1e-9) & (exits <= hi + 1e-9)))
        points.append((density, done * 3600.0 / bin_s))
    return points


def capacity(log_or_points) -> float:
    """Highest binned flow of a flow-density curve."""
    points = flow_density_curve(log_or_points) if isinstance(log_or_points, MetricsLog) else log_or_points
    return max((q for _, q in points), default=0.0)


def jam_density(vehicle_length: float, s0: float) -> float:
    return 1000.0 / (vehicle_length + s0)


def mean_and_range(values: Sequence[float]) -> tuple[float, float, float]:
    if not values:
        raise UndefinedMetric("no values")
    return math.fsum(values) / len(values), min(values), max(values)


def summarize_routes(logs: Sequence[MetricsLog]) -> Mapping[str, float]:
    """Route flows averaged over several logs (missing routes count as zero)."""
    totals: Counter = Counter()
    for log in logs:
        flows, _ = route_flows(log)
        totals.update(flows)
    return {r: totals[r] / len(logs) for r in sorted(totals)}
