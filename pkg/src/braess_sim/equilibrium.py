"""Static user equilibrium on linear-cost networks.

Edge cost is ``slope * flow + intercept``. Two solvers are provided: an
exhaustive search over integer path splits, and a continuous solver based on
the method of successive averages that minimises the Beckmann potential.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

MAX_INTEGER_DEMAND = 200
MAX_INTEGER_PATHS = 5
MSA_MAX_ITER = 100_000

BUNDLED_DIR = Path(__file__).parent / "data"


class EquilibriumError(ValueError):
    pass


@dataclass(frozen=True)
class LinearCostEdge:
    id: str
    from_node: str
    to_node: str
    slope: float
    intercept: float

    def __post_init__(self):
        if self.slope < 0 or self.intercept < 0:
            raise EquilibriumError(f"edge {self.id}: slope and intercept must be non-negative")

    def cost(self, flow: float) -> float:
        return self.slope * flow + self.intercept


@dataclass(frozen=True)
class UEProblem:
    edges: tuple[LinearCostEdge, ...]
    paths: Mapping[str, tuple[str, ...]]
    demand: float
    origin: str = "A"
    destination: str = "B"
    name: str = ""

    def __post_init__(self):
        if self.demand < 0:
            raise EquilibriumError("demand must be non-negative")
        if not self.paths:
            raise EquilibriumError("problem has no paths")
        by_id = {e.id: e for e in self.edges}
        if len(by_id) != len(self.edges):
            raise EquilibriumError("duplicate edge ids")
        for pid, seq in self.paths.items():
            if not seq:
                raise EquilibriumError(f"path {pid} is empty")
            unknown = [e for e in seq if e not in by_id]
            if unknown:
                raise EquilibriumError(f"path {pid} uses unknown edges {unknown}")
            chain = [by_id[e] for e in seq]
            if chain[0].from_node != self.origin or chain[-1].to_node != self.destination:
                raise EquilibriumError(f"path {pid} does not connect {self.origin} to {self.destination}")
            if any(a.to_node != b.from_node for a, b in zip(chain, chain[1:])):
                raise EquilibriumError(f"path {pid} is not contiguous")

    @property
    def path_ids(self) -> list[str]:
        return list(self.paths)

    @property
    def edge_ids(self) -> list[str]:
        return [e.id for e in self.edges]

    def incidence(self) -> np.ndarray:
        """Edge-by-path 0/1 matrix."""
        col = {e.id: i for i, e in enumerate(self.edges)}
        m = np.zeros((len(self.edges), len(self.paths)))
        for j, seq in enumerate(self.paths.values()):
            for e in seq:
                m[col[e], j] = 1.0
        return m

    def with_demand(self, demand: float) -> "UEProblem":
        return UEProblem(self.edges, self.paths, demand, self.origin, self.destination, self.name)


@dataclass(frozen=True)
class UEResult:
    path_flows: Mapping[str, float]
    edge_flows: Mapping[str, float]
    path_costs: Mapping[str, float]
    min_cost: float
    violation: float
    iterations: int = 0
    converged: bool = True
    method: str = ""
    extra: dict = field(default_factory=dict)


def _arrays(problem: UEProblem):
    inc = problem.incidence()
    slopes = np.array([e.slope for e in problem.edges])
    intercepts = np.array([e.intercept for e in problem.edges])
    return inc, slopes, intercepts


def edge_flows(problem: UEProblem, flows: Mapping[str, float] | Sequence[float]) -> dict[str, float]:
    x = _as_vector(problem, flows)
    f = problem.incidence() @ x
    return dict(zip(problem.edge_ids, f.tolist()))


def _as_vector(problem: UEProblem, flows) -> np.ndarray:
    if isinstance(flows, Mapping):
        unknown = set(flows) - set(problem.paths)
        if unknown:
            raise EquilibriumError(f"unknown path(s) {sorted(unknown)}")
        return np.array([float(flows.get(p, 0.0)) for p in problem.paths])
    x = np.asarray(flows, dtype=float)
    if x.shape != (len(problem.paths),):
        raise EquilibriumError("flow vector does not match the path set")
    return x


def all_path_costs(problem: UEProblem, flows) -> dict[str, float]:
    inc, slopes, intercepts = _arrays(problem)
    f = inc @ _as_vector(problem, flows)
    c = inc.T @ (slopes * f + intercepts)
    return dict(zip(problem.path_ids, c.tolist()))


def path_cost(problem: UEProblem, flows, path: str) -> float:
    """Cost of one path: sum of its edge costs at the edge flows induced by ``flows``."""
    if path not in problem.paths:
        raise EquilibriumError(f"unknown path {path!r}")
    return all_path_costs(problem, flows)[path]


def wardrop_violation(costs: Sequence[float], flows: Sequence[float], used_tol: float = 0.0) -> tuple[float, float]:
    """(violation, lambda): largest excess of a used path over the cheapest path.

    ``lambda`` is the cheapest used path cost, or the cheapest path overall
    when nothing is used.
    """
    costs = np.asarray(costs, dtype=float)
    flows = np.asarray(flows, dtype=float)
    used = flows > used_tol
    cheapest = float(costs.min())
    if not used.any():
        return 0.0, cheapest
    return float(costs[used].max() - cheapest), float(costs[used].min())


def _result(problem: UEProblem, x: np.ndarray, method: str, iterations=0, converged=True, used_tol=0.0) -> UEResult:
    inc, slopes, intercepts = _arrays(problem)
    f = inc @ x
    c = inc.T @ (slopes * f + intercepts)
    violation, lam = wardrop_violation(c, x, used_tol)
    return UEResult(
        path_flows=dict(zip(problem.path_ids, x.tolist())),
        edge_flows=dict(zip(problem.edge_ids, f.tolist())),
        path_costs=dict(zip(problem.path_ids, c.tolist())),
        min_cost=lam,
        violation=violation,
        iterations=iterations,
        converged=converged,
        method=method,
    )


def _compositions(total: int, parts: int) -> np.ndarray:
    """All non-negative integer vectors of length ``parts`` summing to ``total``."""
    if parts == 1:
        return np.array([[total]], dtype=np.int64)
    # stars and bars: choose parts-1 bar positions among total+parts-1 slots
    rows = []
    for bars in itertools.combinations(range(total + parts - 1), parts - 1):
        prev, row = -1, []
        for b in bars:
            row.append(b - prev - 1)
            prev = b
        row.append(total + parts - 2 - prev)
        rows.append(row)
    return np.array(rows, dtype=np.int64)


def _composition_chunks(total: int, parts: int):
    """Compositions in lexicographic order, chunked on the first coordinate."""
    if parts == 1:
        yield np.array([[total]], dtype=np.int64)
        return
    for first in range(total, -1, -1):
        rest = _compositions(total - first, parts - 1)
        yield np.column_stack([np.full(len(rest), first, dtype=np.int64), rest])


def solve_ue_integer(problem: UEProblem) -> UEResult:
    """Exhaustive search over integer path splits for the least Wardrop violation."""
    d = problem.demand
    if d != int(d):
        raise EquilibriumError("integer solver needs an integer demand")
    d = int(d)
    if d > MAX_INTEGER_DEMAND or len(problem.paths) > MAX_INTEGER_PATHS:
        raise EquilibriumError(
            f"demand {d} with {len(problem.paths)} paths is too large to enumerate "
            f"(limits: demand <= {MAX_INTEGER_DEMAND}, paths <= {MAX_INTEGER_PATHS})"
        )
    inc, slopes, intercepts = _arrays(problem)
    best_x, best_v = None, math.inf
    for chunk in _composition_chunks(d, len(problem.paths)):
        x = chunk.astype(float)
        f = x @ inc.T
        c = (slopes * f + intercepts) @ inc
        cheapest = c.min(axis=1)
        used_max = np.where(x > 0, c, -np.inf).max(axis=1)
        viol = np.where(np.isfinite(used_max), used_max - cheapest, 0.0)
        k = int(np.argmin(viol))
        if viol[k] < best_v - 1e-12:
            best_v, best_x = float(viol[k]), x[k]
            if best_v == 0.0:
                break
    assert best_x is not None
    return _result(problem, best_x, "integer")


MAX_SUPPORT_SEARCH = 8


def _equalise(problem: UEProblem, x: np.ndarray, support: np.ndarray, lam0: float) -> np.ndarray | None:
    """Flows on ``support`` with exactly equal path costs, closest to ``x``.

    Costs are linear in flow, so this is a linear system; when it is singular
    (zero-slope edges) the least-change solution is taken.
    """
    inc, slopes, intercepts = _arrays(problem)
    k = support.size
    hess = inc.T @ (slopes[:, None] * inc)
    base = inc.T @ intercepts
    # rows: C_p(x) - lambda = 0 on the support, plus flow conservation
    a = np.zeros((k + 1, k + 1))
    a[:k, :k] = hess[np.ix_(support, support)]
    a[:k, k] = -1.0
    a[k, :k] = 1.0
    rhs = np.concatenate([-base[support], [problem.demand]])
    v0 = np.concatenate([x[support], [lam0]])
    sol = v0 + np.linalg.pinv(a) @ (rhs - a @ v0)
    if np.abs(a @ sol - rhs).max() > 1e-9 * max(1.0, problem.demand):
        return None
    y = np.zeros_like(x)
    y[support] = sol[:k]
    if (y < -1e-9 * max(1.0, problem.demand)).any():
        return None
    y = np.clip(y, 0.0, None)
    return y * (problem.demand / y.sum()) if y.sum() > 0 else None


def _polish(problem: UEProblem, x: np.ndarray, support_tol: float, costs, tolerance: float) -> np.ndarray | None:
    """Exact equilibrium near ``x``: the current support first, then (small problems) every support."""
    n = x.size
    current = np.flatnonzero(x > support_tol)
    candidates = [current] if current.size else []
    if n <= MAX_SUPPORT_SEARCH:
        others = [np.array(s) for r in range(1, n + 1) for s in itertools.combinations(range(n), r)]
        # try supports that differ least from the current one first
        others.sort(key=lambda s: len(set(s.tolist()) ^ set(current.tolist())))
        candidates += others
    lam0 = float(costs(x).min())
    for support in candidates:
        y = _equalise(problem, x, support, lam0)
        if y is None:
            continue
        cy = costs(y)
        v, _ = wardrop_violation(cy, y, support_tol)
        if v <= tolerance:
            return y
    return None


def solve_ue_continuous(
    problem: UEProblem, tolerance: float = 1e-6, max_iter: int = MSA_MAX_ITER, polish_every: int = 50
) -> UEResult:
    """Method of successive averages with all-or-nothing loading, step 1/k.

    Every ``polish_every`` iterations the flows are projected onto exact cost
    equality over the currently used paths; the first iterate whose Wardrop
    violation drops to ``tolerance`` is returned.
    """
    if tolerance <= 0:
        raise EquilibriumError("tolerance must be positive")
    inc, slopes, intercepts = _arrays(problem)
    n = len(problem.paths)
    d = float(problem.demand)
    if d == 0:
        return _result(problem, np.zeros(n), "msa")

    def costs(x):
        return inc.T @ (slopes * (inc @ x) + intercepts)

    x = np.zeros(n)
    x[int(np.argmin(costs(x)))] = d
    support_tol = 1e-9 * d
    for k in range(1, max_iter + 1):
        c = costs(x)
        violation, _ = wardrop_violation(c, x, support_tol)
        if violation <= tolerance:
            return _result(problem, x, "msa", k, True, support_tol)
        if k % polish_every == 0:
            y = _polish(problem, x, max(support_tol, d / (10.0 * k)), costs, tolerance)
            if y is not None:
                return _result(problem, y, "msa+polish", k, True, support_tol)
        target = np.zeros(n)
        target[int(np.argmin(c))] = d
        x = x + (target - x) / (k + 1)
    return _result(problem, x, "msa", max_iter, False, support_tol)


def solve(problem: UEProblem, method: str = "auto", tolerance: float = 1e-6) -> UEResult:
    if method == "auto":
        small = problem.demand == int(problem.demand) and problem.demand <= MAX_INTEGER_DEMAND
        method = "integer" if small and len(problem.paths) <= MAX_INTEGER_PATHS else "continuous"
    if method == "integer":
        return solve_ue_integer(problem)
    if method == "continuous":
        return solve_ue_continuous(problem, tolerance)
    raise EquilibriumError(f"unknown method {method!r}")


def braess_delta(problem_without: UEProblem, problem_with: UEProblem, method: str = "auto") -> float:
    """Equilibrium cost with the extra link minus the cost without it."""
    if (problem_without.origin, problem_without.destination) != (problem_with.origin, problem_with.destination):
        raise EquilibriumError("problems must share the OD pair")
    if problem_without.demand != problem_with.demand:
        raise EquilibriumError("problems must share the demand")
    without_paths = {tuple(p) for p in problem_without.paths.values()}
    with_paths = {tuple(p) for p in problem_with.paths.values()}
    if not without_paths <= with_paths:
        raise EquilibriumError("the path set with the extra link must contain the original paths")
    return solve(problem_with, method).min_cost - solve(problem_without, method).min_cost


def enumerate_paths(edges: Sequence[LinearCostEdge], origin: str, destination: str) -> dict[str, tuple[str, ...]]:
    """Simple paths named by their node sequence (``ACDB``), in lexicographic order."""
    out: dict[tuple[str, ...], tuple[str, ...]] = {}

    def walk(node, nodes, used):
        if node == destination:
            out[tuple(nodes)] = tuple(used)
            return
        for e in sorted(edges, key=lambda e: e.id):
            if e.from_node == node and e.to_node not in nodes:
                walk(e.to_node, nodes + [e.to_node], used + [e.id])

    walk(origin, [origin], [])
    return {"".join(k): v for k, v in sorted(out.items())}


def problem_from_dict(data: Mapping, name: str = "") -> UEProblem:
    try:
        origin = str(data.get("origin", "A"))
        destination = str(data.get("destination", "B"))
        edges = tuple(
            LinearCostEdge(
                id=str(e.get("id", f"{e['from']}{e['to']}")),
                from_node=str(e["from"]),
                to_node=str(e["to"]),
                slope=float(e.get("slope", 0.0)),
                intercept=float(e.get("intercept", 0.0)),
            )
            for e in data["edges"]
        )
        demand = float(data["demand_veh"])
    except KeyError as exc:
        raise EquilibriumError(f"problem is missing field {exc.args[0]!r}") from None
    if "paths" in data and data["paths"]:
        paths = {str(k): tuple(str(e) for e in v) for k, v in data["paths"].items()}
    else:
        paths = enumerate_paths(edges, origin, destination)
    return UEProblem(edges, paths, demand, origin, destination, name or str(data.get("name", "")))


def problem_to_dict(problem: UEProblem) -> dict:
    return {
        "name": problem.name,
        "origin": problem.origin,
        "destination": problem.destination,
        "demand_veh": problem.demand,
        "edges": [
            {"id": e.id, "from": e.from_node, "to": e.to_node, "slope": e.slope, "intercept": e.intercept}
            for e in problem.edges
        ],
        "paths": {k: list(v) for k, v in problem.paths.items()},
    }


def load_problem(path: str | Path) -> UEProblem:
    """Load a problem file, or a bundled problem by name (``four_edge_diamond``)."""
    p = Path(path)
    if not p.exists():
        bundled = BUNDLED_DIR / f"{p.stem}.yaml"
        if not bundled.exists():
            raise FileNotFoundError(path)
        p = bundled
    with open(p) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, Mapping):
        raise EquilibriumError(f"{p}: expected a mapping at the top level")
    return problem_from_dict(data, name=str(data.get("name", p.stem)))


def diamond(with_shortcut: bool, demand: float = 6) -> UEProblem:
    """The textbook diamond: A-C 10N, C-B N+50, A-D N+50, D-B 10N, optional C-D N+10."""
    edges = [
        LinearCostEdge("AC", "A", "C", 10.0, 0.0),
        LinearCostEdge("AD", "A", "D", 1.0, 50.0),
        LinearCostEdge("CB", "C", "B", 1.0, 50.0),
        LinearCostEdge("DB", "D", "B", 10.0, 0.0),
    ]
    if with_shortcut:
        edges.append(LinearCostEdge("CD", "C", "D", 1.0, 10.0))
    edges_t = tuple(edges)
    name = "five_edge_diamond" if with_shortcut else "four_edge_diamond"
    return UEProblem(edges_t, enumerate_paths(edges_t, "A", "B"), float(demand), "A", "B", name)
