"""Real-time travel-time estimation and route choice.

Edge costs come from the positions, speeds and accelerations of vehicles
currently on the edge: the edge is cut into gaps between consecutive vehicles
and each gap is costed with :func:`est_tt`, a constant-acceleration kinematic
estimate. Route costs add up edge and connector costs, and an arriving
vehicle picks the cheapest route.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

from .network import Route

CLOSURE_TOL = 1e-6


@dataclass(frozen=True)
class EstimatorParams:
    a_const: float = 3.0
    v_end: float = 1.0
    small_accel_threshold: float = 0.1
    min_speed: float = 0.1

    def __post_init__(self):
        if self.a_const <= 0:
            raise ValueError("a_const must be positive")
        if self.v_end <= 0:
            raise ValueError("v_end must be positive")
        if self.small_accel_threshold < 0:
            raise ValueError("small_accel_threshold must be non-negative")
        if self.min_speed <= 0:
            raise ValueError("min_speed must be positive")


@dataclass(frozen=True)
class VehicleSample:
    offset: float
    speed: float
    accel: float


@dataclass(frozen=True)
class EdgeSnapshot:
    """Vehicles on one element ordered rear to front, with the gaps between them.

    ``gaps[0]`` runs from the element start to the rearmost vehicle,
    ``gaps[-1]`` from the front vehicle to the element end.
    """

    edge_id: str
    length: float
    v_max: float
    vehicles: tuple[VehicleSample, ...]
    gaps: tuple[float, ...]

    def __post_init__(self):
        if len(self.gaps) != len(self.vehicles) + 1:
            raise ValueError("need exactly one more gap than vehicles")
        if any(g < 0 for g in self.gaps):
            raise ValueError(f"negative gap on {self.edge_id}: {self.gaps}")
        if abs(math.fsum(self.gaps) - self.length) > CLOSURE_TOL:
            raise ValueError(f"gaps on {self.edge_id} do not add up to the element length")

    @classmethod
    def from_vehicles(
        cls, edge_id: str, length: float, v_max: float, vehicles: Sequence[VehicleSample]
    ) -> "EdgeSnapshot":
        ordered = sorted(vehicles, key=lambda s: s.offset)
        positions = [min(max(s.offset, 0.0), length) for s in ordered]
        edges = [0.0, *positions, length]
        gaps = tuple(b - a for a, b in zip(edges, edges[1:]))
        return cls(edge_id, length, v_max, tuple(ordered), gaps)

    @property
    def closure_error(self) -> float:
        return abs(math.fsum(self.gaps) - self.length)

    @property
    def is_empty(self) -> bool:
        return not self.vehicles


def est_tt(
    v_ego: float,
    a_ego: float,
    v_target: float,
    v_max: float,
    a: float,
    d: float,
    params: EstimatorParams | None = None,
) -> float:
    """Estimated time to cover ``d`` metres from speed ``v_ego`` to ``v_target``.

    With a near-zero current acceleration the vehicle cruises at ``v_ego`` and
    ramps to the realised final speed at the end. Otherwise it ramps towards an
    intermediate speed and back down; that branch charges the full ramps to and
    from ``v_max`` in its time terms while the ramp distance uses the
    intermediate speed.
    """
    params = params or EstimatorParams()
    if d < 0 or v_max <= 0 or a <= 0 or v_ego < 0:
        raise ValueError("est_tt needs d >= 0, v_max > 0, a > 0, v_ego >= 0")
    if abs(a_ego) < params.small_accel_threshold:
        v_ego = max(v_ego, params.min_speed)
        v_final = min(math.sqrt(v_ego * v_ego + 2.0 * a * d), v_target)
        d_accel = abs(v_ego * v_ego - v_final * v_final) / (2.0 * a)
        return max(d - d_accel, 0.0) / v_ego + 2.0 * d_accel / (v_ego + v_final)
    v_i = min(math.sqrt(0.5 * (2.0 * a * d + v_ego * v_ego + v_target * v_target)), v_max)
    d_accel = abs(v_ego * v_ego - v_i * v_i) / (2.0 * a) + abs(v_i * v_i - v_target * v_target) / (2.0 * a)
    return abs(v_max - v_ego) / a + abs(v_max - v_target) / a + max(d - d_accel, 0.0) / v_max


def estimate_edge_cost(snapshot: EdgeSnapshot, params: EstimatorParams | None = None) -> float:
    params = params or EstimatorParams()
    if snapshot.is_empty:
        return snapshot.length / snapshot.v_max
    vmax, a = snapshot.v_max, params.a_const
    veh, gaps = snapshot.vehicles, snapshot.gaps
    n = len(veh)
    # the virtual vehicle entering at the start runs at the limit, a = 0
    total = est_tt(vmax, 0.0, veh[0].speed, vmax, a, gaps[0], params)
    for i in range(n - 1):
        total += est_tt(veh[i].speed, veh[i].accel, veh[i + 1].speed, vmax, a, gaps[i + 1], params)
    total += est_tt(veh[-1].speed, veh[-1].accel, params.v_end, vmax, a, gaps[n], params)
    return total


class WorldView(Protocol):
    def snapshot(self, element_id: str) -> EdgeSnapshot: ...


def route_cost(
    route: Route,
    world: WorldView,
    params: EstimatorParams | None = None,
    cache: dict[str, float] | None = None,
) -> float:
    """Sum of estimated element costs (road edges and connectors) along a route."""
    params = params or EstimatorParams()
    total = 0.0
    for eid in route.elements:
        if cache is not None and eid in cache:
            total += cache[eid]
            continue
        cost = estimate_edge_cost(world.snapshot(eid), params)
        if cache is not None:
            cache[eid] = cost
        total += cost
    return total


def argmin_route(costs: Mapping[str, float], rel_tol: float = 1e-9) -> str:
    """Cheapest route id; near-ties go to the lexicographically smallest id."""
    if not costs:
        raise ValueError("no candidate routes")
    best = min(costs.values())
    tied = [rid for rid, c in costs.items() if c <= best + rel_tol * abs(best)]
    return min(tied)


def select_route(
    candidates: Sequence[Route],
    world: WorldView,
    params: EstimatorParams | None = None,
    cache: dict[str, float] | None = None,
) -> tuple[Route, float]:
    if not candidates:
        raise ValueError("no candidate routes")
    cache = {} if cache is None else cache
    costs = {r.id: route_cost(r, world, params, cache) for r in candidates}
    chosen = argmin_route(costs)
    return next(r for r in candidates if r.id == chosen), costs[chosen]
