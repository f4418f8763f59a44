"""IDM car-following and all-way-stop arbitration."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

STOPPED_SPEED = 1.0
"""A vehicle at or below this speed counts as stopped at a stop line (m/s)."""

STOP_ZONE = 3.0
"""Distance before the stop line within which a stopped vehicle joins the queue (m)."""


class CollisionError(RuntimeError):
    """Raised when a vehicle's net gap to its leader is no longer positive."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class IDMParams:
    s0: float = 2.0
    T: float = 1.0
    a_max: float = 2.6
    b_comf: float = 4.5
    delta: float = 4.0
    vehicle_length: float = 5.0

    def __post_init__(self):
        for name in ("s0", "T", "a_max", "b_comf", "delta", "vehicle_length"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IDM parameter {name} must be positive")
        if self.delta < 1:
            raise ValueError("IDM parameter delta must be >= 1")


@dataclass(frozen=True)
class VehicleState:
    id: int
    route: str
    element_index: int = 0
    offset: float = 0.0
    speed: float = 0.0
    accel: float = 0.0
    entry_time: float = 0.0
    exit_time: float | None = None


def idm_desired_gap(v: float, dv: float, params: IDMParams) -> float:
    """Desired dynamic gap s*(v, dv) where dv is the approach rate v - v_leader."""
    return params.s0 + max(0.0, v * params.T + v * dv / (2.0 * math.sqrt(params.a_max * params.b_comf)))


def idm_acceleration(
    v: float, gap: float, leader_speed: float, v_desired: float, params: IDMParams
) -> float:
    """IDM acceleration, clamped to ``[-2 b_comf, a_max]``.

    ``gap`` is the bumper-to-bumper distance to the leader; pass ``math.inf``
    on a free road.
    """
    if gap <= 0:
        raise CollisionError(f"non-positive gap {gap:.4f} m")
    if v_desired <= 0:
        raise ValueError("v_desired must be positive")
    s_star = idm_desired_gap(v, v - leader_speed, params)
    acc = params.a_max * (1.0 - (v / v_desired) ** params.delta - (s_star / gap) ** 2)
    return min(params.a_max, max(-2.0 * params.b_comf, acc))


def integrate(
    v: float,
    gap: float,
    leader_speed: float,
    v_desired: float,
    dt: float,
    params: IDMParams,
    speed_cap: tuple[float, float] | None = None,
) -> tuple[float, float, float]:
    """One semi-implicit Euler step; returns ``(accel, new_speed, distance)``.

    ``speed_cap`` is ``(distance_to_cap, cap_speed)`` for a lower maximum speed
    starting further ahead (e.g. a slow connector). When reaching the cap with
    comfortable braking is no longer possible otherwise, the vehicle brakes
    kinematically to meet it.
    """
    acc = idm_acceleration(v, gap, leader_speed, v_desired, params)
    if speed_cap is not None:
        dist, cap = speed_cap
        if v > cap:
            need = (v * v - cap * cap) / (2.0 * max(dist, 0.1))
            if need >= 0.5 * params.b_comf:
                acc = min(acc, max(-2.0 * params.b_comf, -need))
    new_v = v + acc * dt
    if new_v < 0.0:
        new_v = 0.0
    return acc, new_v, new_v * dt


def carry_over(element_index: int, offset: float, element_lengths: Sequence[float]) -> tuple[int, float, bool]:
    """Move ``offset`` across element boundaries; the flag marks leaving the route."""
    while element_index < len(element_lengths) and offset > element_lengths[element_index]:
        offset -= element_lengths[element_index]
        element_index += 1
    return element_index, offset, element_index >= len(element_lengths)


def step_vehicle(
    vehicle: VehicleState,
    dt: float,
    v_max: float,
    params: IDMParams,
    *,
    leader_gap: float = math.inf,
    leader_speed: float = 0.0,
    stop_distance: float | None = None,
    granted: bool = False,
    speed_cap: tuple[float, float] | None = None,
    element_lengths: Sequence[float] | None = None,
    clock: float = 0.0,
) -> VehicleState:
    """Pure single-vehicle update.

    The binding constraint is the nearer of the real leader and, unless the
    vehicle holds a grant, a standing virtual leader at the stop line
    ``stop_distance`` metres ahead. Crossing an element end carries the
    remainder into the next element when ``element_lengths`` is given; a
    vehicle running off the end gets ``exit_time = clock + dt``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    gap, lead_v = leader_gap, leader_speed
    if stop_distance is not None and not granted and stop_distance < gap:
        gap, lead_v = stop_distance, 0.0
    acc, new_v, dist = integrate(vehicle.speed, gap, lead_v, v_max, dt, params, speed_cap)
    idx, offset, exited = vehicle.element_index, vehicle.offset + dist, False
    if element_lengths is not None:
        idx, offset, exited = carry_over(idx, offset, element_lengths)
    return replace(
        vehicle,
        element_index=idx,
        offset=offset,
        speed=new_v,
        accel=acc,
        exit_time=clock + dt if exited else vehicle.exit_time,
    )


@dataclass
class IntersectionQueue:
    """FIFO all-way-stop service state for one node."""

    node: str
    waiting: deque = field(default_factory=deque)
    occupant: int | None = None
    release_time: float = 0.0

    def join(self, vehicle_id: int, arrival_time: float) -> None:
        if self.waiting and arrival_time < self.waiting[-1][1]:
            raise ValueError("stop-line arrivals must be appended in time order")
        self.waiting.append((vehicle_id, arrival_time))

    def release(self, vehicle_id: int) -> None:
        if self.occupant == vehicle_id:
            self.occupant = None

    def __contains__(self, vehicle_id: int) -> bool:
        return any(vid == vehicle_id for vid, _ in self.waiting)


def arbitrate_stop(
    queue: IntersectionQueue,
    clock: float,
    service_time: float,
    speed_of: Callable[[int], float] | None = None,
) -> int | None:
    """Grant the head of the queue entry into the intersection if allowed.

    The head must have stopped (``speed_of(id) <= 1 m/s`` when a lookup is
    given), the box must be empty and the previous grant at least
    ``service_time`` old.
    """
    if not queue.waiting or queue.occupant is not None or clock + 1e-9 < queue.release_time:
        return None
    vid, _ = queue.waiting[0]
    if speed_of is not None and speed_of(vid) > STOPPED_SPEED:
        return None
    queue.waiting.popleft()
    queue.occupant = vid
    queue.release_time = clock + service_time
    return vid
