from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from braess_sim.network import build_grid
from braess_sim.routing import (
    EdgeSnapshot,
    EstimatorParams,
    VehicleSample,
    argmin_route,
    est_tt,
    estimate_edge_cost,
    route_cost,
    select_route,
)

from oracles import oracle_time, sample_cruise_branch, sample_trapezoid_branch


class EmptyWorld:
    """Every element empty; an optional override supplies occupied snapshots."""

    def __init__(self, net, occupied=None):
        self.net = net
        self.occupied = occupied or {}

    def snapshot(self, eid):
        if eid in self.occupied:
            return self.occupied[eid]
        el = self.net.element(eid)
        vmax = el.max_speed
        return EdgeSnapshot.from_vehicles(eid, el.length, vmax, [])


def test_constant_speed_traversal():
    assert est_tt(10, 0, 10, 15, 3, 100) == pytest.approx(10.0)


def test_cruise_then_accelerate_example():
    assert est_tt(5, 0, 10, 15, 3, 50) == pytest.approx(37.5 / 5 + 25 / 15)
    assert est_tt(5, 0, 10, 15, 3, 50) == pytest.approx(oracle_time(5, 0, 10, 15, 3, 50), rel=1e-3)


def test_else_branch_arithmetic_verbatim():
    # v_i = sqrt(163) < v_max, so the ramps consume the whole 50 m and only the
    # v_max ramp times remain
    v_max = 17.32
    v_i = math.sqrt(0.5 * (300 + 25 + 1))
    d_accel = (v_i**2 - 25) / 6 + (v_i**2 - 1) / 6
    assert d_accel == pytest.approx(50)
    want = (v_max - 5) / 3 + (v_max - 1) / 3 + max(50 - d_accel, 0) / v_max
    assert est_tt(5, 1, 1, v_max, 3, 50) == pytest.approx(want)


def test_zero_speed_is_guarded():
    t = est_tt(0, 0, 1, 15, 3, 10)
    assert math.isfinite(t) and t > 0
    assert t == est_tt(0.1, 0, 1, 15, 3, 10)


@pytest.mark.parametrize("bad", [(-1, 0, 1, 15, 3, 10), (1, 0, 1, 0, 3, 10), (1, 0, 1, 15, 0, 10), (1, 0, 1, 15, 3, -1)])
def test_est_tt_rejects_bad_inputs(bad):
    with pytest.raises(ValueError):
        est_tt(*bad)


@pytest.mark.parametrize("sampler", [sample_cruise_branch, sample_trapezoid_branch])
def test_est_tt_against_trajectory_oracle(sampler):
    rng = np.random.default_rng(11)
    for args in sampler(rng, 100):
        assert est_tt(*args) == pytest.approx(oracle_time(*args), rel=0.01)


@given(st.floats(0.1, 35), st.floats(-0.09, 0.09), st.floats(0.1, 35), st.floats(0.1, 40), st.floats(0.5, 5), st.floats(0, 500))
def test_cruise_branch_never_beats_flat_out(v, a_ego, vt, vmax, a, d):
    vt = min(vt, vmax)
    v = min(v, vmax)
    assert est_tt(v, a_ego, vt, vmax, a, d) >= d / vmax - 1e-9


def test_empty_edge_cost():
    snap = EdgeSnapshot.from_vehicles("C-D", 400, 35, [])
    assert estimate_edge_cost(snap) == pytest.approx(400 / 35)
    assert estimate_edge_cost(snap) == pytest.approx(11.43, abs=0.01)


def test_one_stopped_vehicle_mid_edge():
    snap = EdgeSnapshot.from_vehicles("A-C", 100, 15, [VehicleSample(50, 0.0, 0.0)])
    assert snap.gaps == (50, 50)
    want = est_tt(15, 0, 0, 15, 3, 50) + est_tt(0.1, 0, 1, 15, 3, 50)
    assert estimate_edge_cost(snap) == pytest.approx(want)


def test_free_vehicle_at_start_close_to_empty_cost():
    snap = EdgeSnapshot.from_vehicles("A-C", 400, 15, [VehicleSample(0, 15.0, 0.0)])
    empty = 400 / 15
    assert abs(estimate_edge_cost(snap) - empty) / empty < 0.2


def test_snapshot_closure_and_validation():
    vs = [VehicleSample(o, 3.0, 0.0) for o in (12.5, 40.0, 77.7)]
    snap = EdgeSnapshot.from_vehicles("e", 100, 15, vs)
    assert snap.closure_error <= 1e-9
    with pytest.raises(ValueError):
        EdgeSnapshot("e", 100, 15, (), (60.0,))
    with pytest.raises(ValueError):
        EdgeSnapshot("e", 100, 15, (VehicleSample(1, 0, 0),), (-1.0, 101.0))


@given(st.lists(st.floats(0, 500), max_size=30), st.floats(1, 500))
def test_closure_property(offsets, length):
    vs = [VehicleSample(o, 1.0, 0.0) for o in offsets]
    snap = EdgeSnapshot.from_vehicles("e", length, 15, vs)
    assert abs(math.fsum(snap.gaps) - length) <= 1e-6
    assert all(g >= 0 for g in snap.gaps)


@given(st.lists(st.floats(0.0, 200.0), min_size=0, max_size=10), st.floats(0.0, 200.0))
def test_cost_monotone_in_stopped_vehicles(offsets, extra):
    vs = [VehicleSample(o, 0.0, 0.0) for o in offsets]
    before = estimate_edge_cost(EdgeSnapshot.from_vehicles("e", 200, 15, vs))
    after = estimate_edge_cost(EdgeSnapshot.from_vehicles("e", 200, 15, vs + [VehicleSample(extra, 0.0, 0.0)]))
    assert after >= before - 1e-9


def test_empty_route_cost_is_sum_of_free_times():
    net = build_grid("baseline", 50, 15, 35)
    world = EmptyWorld(net)
    r = net.route("A-C-M-B")
    want = sum(net.element(e).length / net.element(e).max_speed for e in r.elements)
    assert route_cost(r, world) == pytest.approx(want)
    assert want > 0


def test_attractive_shortcut_is_cheaper_and_chosen():
    net = build_grid("added_path", 50, 10, 35)
    world = EmptyWorld(net)
    assert route_cost(net.route("A-C-D-B"), world) < route_cost(net.route("A-C-M-B"), world)
    chosen, cost = select_route(list(net.routes), world)
    assert chosen.id == "A-C-D-B"
    assert cost == pytest.approx(route_cost(chosen, world))


def test_congested_edge_raises_route_cost():
    net = build_grid("baseline", 50, 15, 35)
    r = net.route("A-C-M-B")
    empty = route_cost(r, EmptyWorld(net))
    jam = {"C-M": EdgeSnapshot.from_vehicles("C-M", 50, 15, [VehicleSample(25, 0.0, 0.0)])}
    assert route_cost(r, EmptyWorld(net, jam)) > empty


def test_select_route_single_and_ties():
    net = build_grid("baseline", 50, 15, 35)
    world = EmptyWorld(net)
    one = [net.route("A-N-D-B")]
    assert select_route(one, world)[0].id == "A-N-D-B"
    # the two baseline routes are mirror images with equal empty costs
    assert select_route(list(reversed(net.routes)), world)[0].id == "A-C-M-B"
    with pytest.raises(ValueError):
        select_route([], world)


@given(st.dictionaries(st.sampled_from(["A-C-D-B", "A-C-M-B", "A-N-D-B"]), st.floats(0.1, 1e4), min_size=1),
       st.floats(1e-3, 1e3))
def test_argmin_invariant_under_rescaling(costs, scale):
    assert argmin_route(costs) == argmin_route({k: v * scale for k, v in costs.items()})


def test_params_validated():
    with pytest.raises(ValueError):
        EstimatorParams(a_const=0)
    with pytest.raises(ValueError):
        EstimatorParams(v_end=0)
