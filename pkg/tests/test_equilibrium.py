from __future__ import annotations

import itertools
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from braess_sim import equilibrium as eq


FOUR = eq.diamond(False, 6)
FIVE = eq.diamond(True, 6)


def test_path_cost_examples():
    assert eq.path_cost(FOUR, {"ACB": 3, "ADB": 3}, "ACB") == 83
    assert eq.path_cost(FIVE, {"ACB": 2, "ACDB": 2, "ADB": 2}, "ACDB") == 92
    assert eq.path_cost(FOUR, {"ACB": 0, "ADB": 0}, "ACB") == 50


def test_path_cost_unknown_path():
    with pytest.raises(eq.EquilibriumError):
        eq.path_cost(FOUR, {"ACB": 3, "ADB": 3}, "AXB")
    with pytest.raises(eq.EquilibriumError):
        eq.path_cost(FOUR, {"ACB": 3, "ZZZ": 3}, "ACB")


def test_integer_diamonds():
    r4 = eq.solve_ue_integer(FOUR)
    assert r4.path_flows == {"ACB": 3.0, "ADB": 3.0}
    assert r4.min_cost == 83 and r4.violation == 0
    r5 = eq.solve_ue_integer(FIVE)
    assert r5.path_flows == {"ACB": 2.0, "ACDB": 2.0, "ADB": 2.0}
    assert r5.min_cost == 92 and r5.violation == 0


def test_integer_zero_demand():
    r = eq.solve_ue_integer(FIVE.with_demand(0))
    assert all(x == 0 for x in r.path_flows.values())
    assert r.min_cost == 0 + 10 + 0  # A-C-D-B intercepts
    assert eq.solve_ue_integer(FOUR.with_demand(0)).min_cost == 50


def test_integer_limits():
    with pytest.raises(eq.EquilibriumError):
        eq.solve_ue_integer(FOUR.with_demand(201))
    with pytest.raises(eq.EquilibriumError):
        eq.solve_ue_integer(FOUR.with_demand(2.5))


def test_continuous_diamonds():
    r4 = eq.solve_ue_continuous(FOUR, 1e-6)
    assert list(r4.path_flows.values()) == pytest.approx([3.0, 3.0], abs=1e-4)
    r5 = eq.solve_ue_continuous(FIVE, 1e-6)
    assert list(r5.path_flows.values()) == pytest.approx([2.0, 2.0, 2.0], abs=1e-4)
    assert r5.min_cost == pytest.approx(92, abs=1e-3)
    assert r5.violation <= 1e-6 and r5.converged


def test_continuous_rejects_bad_tolerance():
    with pytest.raises(eq.EquilibriumError):
        eq.solve_ue_continuous(FOUR, 0)


def test_braess_delta():
    assert eq.braess_delta(FOUR, FIVE) == 9
    assert eq.braess_delta(FIVE, FIVE) == 0
    # a single car is better off with the shortcut: 10 + 11 + 10 = 31 against 61
    assert eq.braess_delta(FOUR.with_demand(1), FIVE.with_demand(1)) == 31 - 61


def test_braess_delta_mismatch():
    with pytest.raises(eq.EquilibriumError):
        eq.braess_delta(FOUR, FIVE.with_demand(5))
    with pytest.raises(eq.EquilibriumError):
        eq.braess_delta(FIVE, FOUR)


def test_problem_validation():
    e = eq.LinearCostEdge("AC", "A", "C", 1, 0)
    with pytest.raises(eq.EquilibriumError):
        eq.UEProblem((e,), {"AC": ("AC",)}, 1)  # ends at C, not B
    with pytest.raises(eq.EquilibriumError):
        eq.UEProblem((e,), {"AC": ("AC",)}, -1, "A", "C")
    with pytest.raises(eq.EquilibriumError):
        eq.LinearCostEdge("X", "A", "B", -1, 0)


def test_bundled_files_match_builders():
    assert eq.load_problem("four_edge_diamond").paths == FOUR.paths
    five = eq.load_problem("five_edge_diamond")
    assert five.paths == FIVE.paths and five.demand == 6


def test_problem_dict_round_trip():
    again = eq.problem_from_dict(eq.problem_to_dict(FIVE))
    assert again == FIVE


def brute_force_ue(problem):
    """Independent oracle: exact integer splits with zero Wardrop violation."""
    d = int(problem.demand)
    names = problem.path_ids
    by_id = {e.id: e for e in problem.edges}
    exact = []
    for split in itertools.product(range(d + 1), repeat=len(names)):
        if sum(split) != d:
            continue
        flow = {e: 0 for e in by_id}
        for x, p in zip(split, names):
            for e in problem.paths[p]:
                flow[e] += x
        cost = [sum(by_id[e].slope * flow[e] + by_id[e].intercept for e in problem.paths[p]) for p in names]
        used = [c for c, x in zip(cost, split) if x > 0]
        if max(used) - min(cost) == 0:
            exact.append((split, min(used)))
    return exact


small_diamonds = st.tuples(
    st.integers(0, 12), st.integers(0, 60), st.integers(0, 12), st.integers(0, 60),
    st.integers(0, 12), st.integers(0, 20), st.integers(1, 12),
)


def make_diamond(slope_a, icpt_a, slope_b, icpt_b, slope_c, icpt_c, demand):
    edges = (
        eq.LinearCostEdge("AC", "A", "C", slope_a, 0),
        eq.LinearCostEdge("AD", "A", "D", slope_b, icpt_a),
        eq.LinearCostEdge("CB", "C", "B", slope_b, icpt_b),
        eq.LinearCostEdge("CD", "C", "D", slope_c, icpt_c),
        eq.LinearCostEdge("DB", "D", "B", slope_a, 0),
    )
    return eq.UEProblem(edges, eq.enumerate_paths(edges, "A", "B"), demand)


@settings(max_examples=50, deadline=None)
@given(small_diamonds)
def test_solvers_agree_with_brute_force(params):
    problem = make_diamond(*params)
    exact = brute_force_ue(problem)
    integer = eq.solve_ue_integer(problem)
    if exact:
        assert integer.violation == 0
        assert integer.min_cost in {lam for _, lam in exact}
        cont = eq.solve_ue_continuous(problem, 1e-6)
        assert cont.violation <= 1e-6
        # the equilibrium cost is unique even when path flows are not
        assert cont.min_cost == pytest.approx(integer.min_cost, abs=1e-4)
        if len(exact) == 1:
            want = exact[0][0]
            assert list(cont.path_flows.values()) == pytest.approx(want, abs=0.5)


@settings(max_examples=60, deadline=None)
@given(small_diamonds)
def test_conservation_and_wardrop(params):
    problem = make_diamond(*params)
    inc = problem.incidence()
    for res in (eq.solve_ue_integer(problem), eq.solve_ue_continuous(problem, 1e-6)):
        x = np.array(list(res.path_flows.values()))
        assert abs(x.sum() - problem.demand) <= 1e-9
        f = inc @ x
        assert np.allclose(f, list(res.edge_flows.values()), atol=1e-9)
        costs = np.array(list(res.path_costs.values()))
        used = x > 1e-9 * max(problem.demand, 1)
        assert res.violation == pytest.approx(costs[used].max() - costs.min(), abs=1e-12)
    assert eq.braess_delta(problem, problem) == 0


def test_continuous_is_fast():
    t0 = time.perf_counter()
    eq.solve_ue_continuous(FOUR, 1e-6)
    eq.solve_ue_continuous(FIVE, 1e-6)
    assert time.perf_counter() - t0 < 1.0
