"""World state and main loop of the grid microsimulation."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .dynamics import (
    STOP_ZONE,
    STOPPED_SPEED,
    CollisionError,
    IDMParams,
    IntersectionQueue,
    VehicleState,
    arbitrate_stop,
    integrate,
)
from .metrics import MetricsLog, TripRecord
from .network import (
    DESTINATION,
    Control,
    NetworkGraph,
    Route,
    Variant,
    build_grid,
)
from .routing import EdgeSnapshot, EstimatorParams, VehicleSample, argmin_route, estimate_edge_cost

LOOKAHEAD = 250.0
"""Distance beyond which leaders and stop lines are ignored (m)."""

MAX_INSERT_SPEED = 10.0


class IntegrityError(RuntimeError):
    """A simulation invariant (conservation, stop compliance) was broken."""


@dataclass(frozen=True)
class DemandSpec:
    """Arrival rates in veh/hr per inflow node."""

    rates: Mapping[str, float]
    process: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.process not in ("uniform", "poisson"):
            raise ValueError(f"unknown arrival process {self.process!r}")
        for node, rate in self.rates.items():
            if rate < 0:
                raise ValueError(f"negative demand at node {node}")


@dataclass(frozen=True)
class SimConfig:
    variant: str = Variant.BASELINE.value
    edge_length: float = 50.0
    base_speed_limit: float = 15.0
    added_path_speed_limit: float = 35.0
    demand: DemandSpec = field(default_factory=lambda: DemandSpec({"A": 400.0}))
    dt: float = 0.1
    horizon: float = 3600.0
    warmup: float = 600.0
    idm: IDMParams = field(default_factory=IDMParams)
    estimator: EstimatorParams = field(default_factory=EstimatorParams)
    service_time: float = 4.0
    reroute_enabled: bool = False
    connector_length: float = 10.0
    through_speed_cap: bool = True

    def __post_init__(self):
        if not 0 < self.dt <= 0.5:
            raise ValueError("dt must lie in (0, 0.5] s")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if not 0 <= self.warmup < self.horizon:
            raise ValueError("warmup must lie in [0, horizon)")
        if self.service_time < 0:
            raise ValueError("service_time must be non-negative")
        Variant(self.variant)

    @property
    def inflow_nodes(self) -> tuple[str, ...]:
        return tuple(sorted(self.demand.rates))

    def build_network(self) -> NetworkGraph:
        return build_grid(
            self.variant,
            self.edge_length,
            self.base_speed_limit,
            self.added_path_speed_limit,
            self.inflow_nodes,
            connector_length=self.connector_length,
            estimator_accel=self.estimator.a_const,
            cap_through=self.through_speed_cap,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["demand"] = {"rates": dict(sorted(self.demand.rates.items())), "process": self.demand.process, "seed": self.demand.seed}
        return d


def schedule_arrivals(spec: DemandSpec, horizon: float) -> list[tuple[float, str]]:
    """Arrival times per inflow node, merged and sorted by (time, node).

    Uniform arrivals use the exact headway ``3600 / rate`` with a seeded phase
    in ``[0, headway)``; Poisson arrivals draw seeded exponential headways.
    """
    out: list[tuple[float, str]] = []
    for k, node in enumerate(sorted(spec.rates)):
        rate = spec.rates[node]
        if rate <= 0:
            continue
        headway = 3600.0 / rate
        rng = np.random.default_rng([spec.seed, k])
        if spec.process == "uniform":
            phase = headway * rng.random()
            n = int(math.ceil((horizon - phase) / headway))
            times = [phase + i * headway for i in range(max(n, 0))]
        else:
            times = []
            t = rng.exponential(headway)
            while t < horizon:
                times.append(float(t))
                t += rng.exponential(headway)
        out.extend((t, node) for t in times if t < horizon)
    out.sort()
    return out


class Vehicle:
    __slots__ = (
        "id", "route", "path", "idx", "elem", "offset", "speed", "accel",
        "entry_time", "exit_time", "granted", "queued", "stopped", "origin",
    )

    def __init__(self, vid: int, route: Route, path: tuple[int, ...], origin: str, clock: float, speed: float):
        self.id = vid
        self.route = route
        self.path = path
        self.idx = 0
        self.elem = path[0]
        self.offset = 0.0
        self.speed = speed
        self.accel = 0.0
        self.entry_time = clock
        self.exit_time: float | None = None
        self.granted = False
        self.queued = False
        self.stopped = False
        self.origin = origin

    def state(self) -> VehicleState:
        return VehicleState(
            id=self.id,
            route=self.route.id,
            element_index=self.idx,
            offset=self.offset,
            speed=self.speed,
            accel=self.accel,
            entry_time=self.entry_time,
            exit_time=self.exit_time,
        )


class World:
    """Mutable simulation state for one run.

    Elements (edges then connectors, sorted by id) are addressed by index;
    ``occupancy[i]`` lists the vehicles whose front is on element ``i``,
    front first.
    """

    def __init__(self, config: SimConfig, network: NetworkGraph | None = None):
        self.config = config
        self.network = network or config.build_network()
        net = self.network
        self.dt = config.dt
        self.idm = config.idm
        self.est = config.estimator

        self.element_ids = net.element_ids()
        self.index = {eid: i for i, eid in enumerate(self.element_ids)}
        n = len(self.element_ids)
        self.lengths = [net.element(e).length for e in self.element_ids]
        self.vmax = [net.element(e).max_speed for e in self.element_ids]
        self.is_edge = [e in net.edges for e in self.element_ids]

        self.queues: dict[str, IntersectionQueue] = {
            nid: IntersectionQueue(nid) for nid, node in net.nodes.items() if node.control is Control.ALL_WAY_STOP
        }
        # stop_queue[i]: queue at the downstream stop line of edge i
        self.stop_queue: list[IntersectionQueue | None] = [None] * n
        # box_queue[i]: queue owning the intersection that connector i crosses
        self.box_queue: list[IntersectionQueue | None] = [None] * n
        for i, eid in enumerate(self.element_ids):
            if self.is_edge[i]:
                self.stop_queue[i] = self.queues.get(net.edges[eid].to_node)
            else:
                self.box_queue[i] = self.queues.get(net.connectors[eid].at_node)
        self.stop_edges = [i for i in range(n) if self.stop_queue[i] is not None]

        self.route_paths: dict[str, tuple[int, ...]] = {}
        for routes in (net.routes, *net.origin_routes.values()):
            for r in routes:
                self.route_paths[r.id] = tuple(self.index[e] for e in r.elements)

        self.occupancy: list[list[Vehicle]] = [[] for _ in range(n)]
        self.last_exited: list[Vehicle | None] = [None] * n
        self.vehicles: dict[int, Vehicle] = {}
        self.clearing: list[tuple[Vehicle, IntersectionQueue, int]] = []
        self.step_index = 0
        self.clock = 0.0
        self.next_id = 0

        self.schedule = schedule_arrivals(config.demand, config.horizon)
        self._next_arrival = 0
        self.waiting: dict[str, deque[float]] = {node: deque() for node in config.inflow_nodes}
        self.arrivals_due = 0
        self.completed = 0
        self.deferral_events = 0
        self.deferred_arrivals = 0
        # how many of the oldest pending arrivals per node were already counted as deferred
        self._deferred: dict[str, int] = {node: 0 for node in config.inflow_nodes}

        self.trips: list[TripRecord] = []
        self.snapshot_count = 0
        self.max_closure_error = 0.0
        self.stop_crossings = 0
        self._cost_cache: dict[str, float] = {}
        self._cache_step = -1

        n_steps = int(round(config.horizon / config.dt))
        self.n_steps = n_steps
        self.sample_clock = np.zeros(n_steps + 1)
        self.sample_active = np.zeros(n_steps + 1, dtype=np.int32)
        self.sample_occupancy = np.zeros((n_steps + 1, n), dtype=np.int16)

    # ------------------------------------------------------------------ views

    def snapshot(self, element_id: str) -> EdgeSnapshot:
        i = self.index[element_id]
        samples = [VehicleSample(v.offset, v.speed, v.accel) for v in self.occupancy[i]]
        snap = EdgeSnapshot.from_vehicles(element_id, self.lengths[i], self.vmax[i], samples)
        self.snapshot_count += 1
        err = snap.closure_error
        if err > self.max_closure_error:
            self.max_closure_error = err
        return snap

    def element_cost(self, element_id: str) -> float:
        if self._cache_step != self.step_index:
            self._cost_cache = {}
            self._cache_step = self.step_index
        cost = self._cost_cache.get(element_id)
        if cost is None:
            cost = estimate_edge_cost(self.snapshot(element_id), self.est)
            self._cost_cache[element_id] = cost
        return cost

    def route_costs(self, routes) -> dict[str, float]:
        return {r.id: sum(self.element_cost(e) for e in r.elements) for r in routes}

    def choose_route(self, routes) -> tuple[Route, float]:
        costs = self.route_costs(routes)
        chosen = argmin_route(costs)
        return next(r for r in routes if r.id == chosen), costs[chosen]

    @property
    def active_count(self) -> int:
        return len(self.vehicles)

    @property
    def waiting_count(self) -> int:
        return sum(len(q) for q in self.waiting.values())

    # ------------------------------------------------------------- geometry

    def _leader(self, v: Vehicle, pos: int, lst: list[Vehicle]) -> tuple[float, float]:
        """Net gap and speed of whatever binds vehicle ``v`` from ahead."""
        vlen = self.idm.vehicle_length
        if pos > 0:
            ahead = lst[pos - 1]
            return ahead.offset - vlen - v.offset, ahead.speed
        e = v.elem
        dist = self.lengths[e] - v.offset
        gap, lead_v = math.inf, 0.0
        if self.stop_queue[e] is not None and not v.granted:
            gap = dist
        prev = self.last_exited[e]
        if prev is not None and prev.exit_time is None and prev.idx > 0 and prev.path[prev.idx - 1] == e:
            g = dist + prev.offset - vlen
            if g < gap:
                gap, lead_v = g, prev.speed
        path, occ, lengths = v.path, self.occupancy, self.lengths
        j = v.idx + 1
        while j < len(path) and dist < LOOKAHEAD and dist < gap:
            el = path[j]
            ahead_list = occ[el]
            if ahead_list:
                last = ahead_list[-1]
                g = dist + last.offset - vlen
                if g < gap:
                    gap, lead_v = g, last.speed
                break
            if self.stop_queue[el] is not None:
                g = dist + lengths[el]
                if g < gap:
                    gap, lead_v = g, 0.0
                break
            dist += lengths[el]
            j += 1
        return gap, lead_v

    def _free_entry_gap(self, path: tuple[int, ...]) -> float:
        here = self.occupancy[path[0]]
        if here:
            return here[-1].offset - self.idm.vehicle_length
        probe = Vehicle(-1, None, path, "", self.clock, 0.0)  # type: ignore[arg-type]
        return self._leader(probe, 0, [])[0]

    # ---------------------------------------------------------------- phases

    def _spawn_due(self) -> None:
        t = self.clock
        sched = self.schedule
        while self._next_arrival < len(sched) and sched[self._next_arrival][0] <= t + 1e-9:
            at, node = sched[self._next_arrival]
            self.waiting[node].append(at)
            self.arrivals_due += 1
            self._next_arrival += 1
        for node in sorted(self.waiting):
            pending = self.waiting[node]
            if not pending:
                continue
            if self._try_insert(node, pending[0]):
                pending.popleft()
                self._deferred[node] = max(self._deferred[node] - 1, 0)
            # whatever is still queued at this node waits at least one more step
            self.deferral_events += len(pending)
            if len(pending) > self._deferred[node]:
                self.deferred_arrivals += len(pending) - self._deferred[node]
                self._deferred[node] = len(pending)

    def _try_insert(self, node: str, due: float) -> bool:
        t = self.clock
        box = self.queues.get(node)
        if box is not None:
            if box.occupant is not None or t + 1e-9 < box.release_time:
                return False
            if box.waiting and box.waiting[0][1] <= due:
                return False
        routes = self.network.origin_routes[node]
        route, _ = self.choose_route(routes)
        path = self.route_paths[route.id]
        p = self.idm
        if self._free_entry_gap(path) < p.s0 + p.vehicle_length:
            return False
        first = path[0]
        speed = min(self.vmax[first], MAX_INSERT_SPEED)
        v = Vehicle(self.next_id, route, path, node, t, speed)
        self.next_id += 1
        self.vehicles[v.id] = v
        self.occupancy[first].append(v)
        if box is not None:
            box.occupant = v.id
            box.release_time = t + self.config.service_time
            self.clearing.append((v, box, 0))
        return True

    def _arbitrate(self) -> None:
        t = self.clock
        occ, lengths = self.occupancy, self.lengths
        for e in self.stop_edges:
            lst = occ[e]
            if not lst:
                continue
            v = lst[0]
            if v.granted or v.queued:
                continue
            if lengths[e] - v.offset <= STOP_ZONE and v.speed <= STOPPED_SPEED:
                v.stopped = True
                v.queued = True
                self.stop_queue[e].join(v.id, t)
        vehicles = self.vehicles
        speed_of = lambda vid: vehicles[vid].speed  # noqa: E731
        for node in sorted(self.queues):
            vid = arbitrate_stop(self.queues[node], t, self.config.service_time, speed_of)
            if vid is not None:
                vehicles[vid].granted = True

    def _advance(self) -> None:
        dt, p = self.dt, self.idm
        vmax, lengths, occ = self.vmax, self.lengths, self.occupancy
        for e, lst in enumerate(occ):
            if not lst:
                continue
            v_desired = vmax[e]
            for pos, v in enumerate(lst):
                gap, lead_v = self._leader(v, pos, lst)
                cap = None
                if v.idx + 1 < len(v.path):
                    nxt = vmax[v.path[v.idx + 1]]
                    if v.speed > nxt:
                        cap = (lengths[e] - v.offset, nxt)
                try:
                    acc, new_v, dist = integrate(v.speed, gap, lead_v, v_desired, dt, p, cap)
                except CollisionError as exc:
                    raise CollisionError(str(exc), self._diagnostics(v, gap)) from None
                v.accel = acc
                v.speed = new_v
                v.offset += dist

    def _transfer(self) -> None:
        t_end = (self.step_index + 1) * self.dt
        occ, lengths = self.occupancy, self.lengths
        for e in range(len(occ)):
            lst = occ[e]
            while lst and lst[0].offset > lengths[e]:
                v = lst.pop(0)
                self._cross(v, e, t_end)
        if self.clearing:
            vlen = self.idm.vehicle_length
            still = []
            for v, q, at in self.clearing:
                # the box is free once the rear has left it
                if v.exit_time is not None or v.idx > at or v.offset >= vlen:
                    q.release(v.id)
                else:
                    still.append((v, q, at))
            self.clearing = still

    def _cross(self, v: Vehicle, e: int, t_end: float) -> None:
        while True:
            sq = self.stop_queue[e]
            if sq is not None:
                if not v.granted:
                    raise IntegrityError(f"vehicle {v.id} ran the stop line of {self.element_ids[e]}")
                if not v.stopped:
                    raise IntegrityError(f"vehicle {v.id} crossed {self.element_ids[e]} without stopping")
                self.stop_crossings += 1
            v.offset -= self.lengths[e]
            v.idx += 1
            self.last_exited[e] = v
            box = self.box_queue[e]
            if v.idx >= len(v.path):
                v.exit_time = t_end
                if box is not None:
                    box.release(v.id)
                self._complete(v)
                return
            nxt = v.path[v.idx]
            v.elem = nxt
            if box is not None:
                self.clearing.append((v, box, v.idx))
            if self.is_edge[nxt]:
                v.granted = False
                v.queued = False
                v.stopped = False
                if self.config.reroute_enabled:
                    self._reroute(v)
            if v.offset > self.lengths[nxt]:
                e = nxt
                continue
            self.occupancy[nxt].append(v)
            return

    def _reroute(self, v: Vehicle) -> None:
        net = self.network
        edge_id = self.element_ids[v.elem]
        done = v.route.elements[: v.idx]
        candidates = [
            r for routes in (net.routes, *net.origin_routes.values()) for r in routes
            if r.elements[: v.idx] == done and r.elements[v.idx] == edge_id
        ]
        if len(candidates) < 2:
            return
        costs = {r.id: sum(self.element_cost(e) for e in r.elements[v.idx:]) for r in candidates}
        best = argmin_route(costs)
        if best != v.route.id:
            v.route = next(r for r in candidates if r.id == best)
            v.path = self.route_paths[best]

    def _complete(self, v: Vehicle) -> None:
        del self.vehicles[v.id]
        self.completed += 1
        self.trips.append(
            TripRecord(v.id, v.route.id, v.origin, v.entry_time, v.exit_time, v.exit_time - v.entry_time)
        )

    def _diagnostics(self, v: Vehicle, gap: float) -> dict:
        return {
            "clock": self.clock,
            "vehicle": v.id,
            "route": v.route.id,
            "element": self.element_ids[v.elem],
            "offset": v.offset,
            "speed": v.speed,
            "gap": gap,
            "occupancy": {
                self.element_ids[i]: [(u.id, round(u.offset, 3), round(u.speed, 3)) for u in lst]
                for i, lst in enumerate(self.occupancy)
                if lst
            },
        }

    def _record(self) -> None:
        k = self.step_index
        self.sample_clock[k] = self.clock
        self.sample_active[k] = len(self.vehicles)
        self.sample_occupancy[k] = [len(lst) for lst in self.occupancy]

    def check_conservation(self) -> None:
        if self.arrivals_due != self.active_count + self.completed + self.waiting_count:
            raise IntegrityError(
                f"conservation broken at t={self.clock}: due={self.arrivals_due} "
                f"active={self.active_count} completed={self.completed} waiting={self.waiting_count}"
            )

    # ------------------------------------------------------------------ loop

    def step(self) -> None:
        self._spawn_due()
        self._arbitrate()
        self._advance()
        self._transfer()
        self.step_index += 1
        self.clock = self.step_index * self.dt
        self._record()
        self.check_conservation()

    def run(self) -> MetricsLog:
        self._record()
        while self.step_index < self.n_steps:
            self.step()
        return self.to_log()

    def to_log(self) -> MetricsLog:
        k = self.step_index + 1
        return MetricsLog(
            trips=list(self.trips),
            sample_clock=self.sample_clock[:k].copy(),
            sample_active=self.sample_active[:k].copy(),
            sample_occupancy=self.sample_occupancy[:k].copy(),
            element_ids=tuple(self.element_ids),
            element_lengths=tuple(self.lengths),
            warmup=self.config.warmup,
            horizon=self.config.horizon,
            dt=self.dt,
            arrivals_scheduled=len(self.schedule),
            arrivals_due=self.arrivals_due,
            deferred_arrivals=self.deferred_arrivals,
            deferral_events=self.deferral_events,
            pending_at_end=self.waiting_count,
            config=self.config.to_dict(),
        )


def run(config: SimConfig) -> MetricsLog:
    return World(config).run()
