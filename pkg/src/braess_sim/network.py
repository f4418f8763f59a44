"""Graph model and builders for the 2x3 stop-controlled grid.

Layout (row, column)::

    A(0,0) -> C(0,1) -> M(0,2)
      |         :         |
      v         v         v
    N(1,0) -> D(1,1) -> B(1,2)

Traffic enters at A from the west and leaves B to the east. The dotted
edge C->D only exists in the ``added_path`` variant. Every intersection
except A is an all-way stop.

Each movement through an intersection is a short *connector* element
(left turn, right turn or through).  Vehicles entering at the uncontrolled
node A start on an entry connector; routes terminate with an exit
connector at B.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

ORIGIN = "A"
DESTINATION = "B"

GRID_LAYOUT: dict[str, tuple[int, int]] = {
    "A": (0, 0),
    "C": (0, 1),
    "M": (0, 2),
    "N": (1, 0),
    "D": (1, 1),
    "B": (1, 2),
}

# (from, to, length class); classes follow the route cost composition of the
# three grid routes: shared legs of the shortcut route are "a", the rest "b".
BASE_EDGES: tuple[tuple[str, str, str], ...] = (
    ("A", "C", "a"),
    ("C", "M", "b"),
    ("M", "B", "b"),
    ("A", "N", "b"),
    ("N", "D", "b"),
    ("D", "B", "a"),
)
ADDED_EDGE: tuple[str, str, str] = ("C", "D", "c")

# Virtual approach/departure heading at the network boundary: east.
BOUNDARY_HEADING = (0, 1)

LEFT_TURN_SPEED = 10.0
RIGHT_TURN_SPEED = 8.0
DEFAULT_CONNECTOR_LENGTH = 10.0

ENTRY = "in"
EXIT = "out"


class NetworkError(ValueError):
    """Invalid network construction request or query."""


class Control(str, Enum):
    ALL_WAY_STOP = "all_way_stop"
    UNCONTROLLED = "uncontrolled"


class Variant(str, Enum):
    BASELINE = "baseline"
    ADDED_PATH = "added_path"


class Movement(str, Enum):
    LT = "LT"
    RT = "RT"
    TH = "TH"


@dataclass(frozen=True)
class Node:
    id: str
    grid_position: tuple[int, int]
    control: Control
    is_inflow: bool = False
    is_outflow: bool = False


@dataclass(frozen=True)
class Edge:
    id: str
    from_node: str
    to_node: str
    length: float
    speed_limit: float
    length_class: str
    lanes: int = 1

    @property
    def max_speed(self) -> float:
        return self.speed_limit


@dataclass(frozen=True)
class Connector:
    """Movement through an intersection.

    ``from_edge`` is ``None`` for a network entry and ``to_edge`` is ``None``
    for a network exit.
    """

    id: str
    at_node: str
    from_edge: str | None
    to_edge: str | None
    kind: Movement
    length: float
    max_speed: float


@dataclass(frozen=True)
class Route:
    id: str
    nodes: tuple[str, ...]
    elements: tuple[str, ...]
    incidence: Mapping[str, int] = field(compare=False, repr=False)

    @property
    def edges(self) -> tuple[str, ...]:
        return tuple(e for e, flag in self.incidence.items() if flag)

    @property
    def origin(self) -> str:
        return self.nodes[0]

    @property
    def destination(self) -> str:
        return self.nodes[-1]


def edge_id(from_node: str, to_node: str) -> str:
    return f"{from_node}-{to_node}"


def connector_id(node: str, from_edge: str | None, to_edge: str | None) -> str:
    return f"{node}:{from_edge or ENTRY}>{to_edge or EXIT}"


def heading(from_pos: tuple[int, int], to_pos: tuple[int, int]) -> tuple[int, int]:
    dr, dc = to_pos[0] - from_pos[0], to_pos[1] - from_pos[1]
    return (int(math.copysign(1, dr)) if dr else 0, int(math.copysign(1, dc)) if dc else 0)


def classify_turn(h_in: tuple[int, int], h_out: tuple[int, int]) -> Movement:
    """Classify a heading change on a grid whose rows grow southwards."""
    if h_in == h_out:
        return Movement.TH
    # 2-D cross product in (row, col) coordinates: positive means a clockwise
    # (rightward) rotation when rows point south.
    cross = h_in[1] * h_out[0] - h_in[0] * h_out[1]
    if cross > 0:
        return Movement.RT
    if cross < 0:
        return Movement.LT
    raise NetworkError(f"U-turn between headings {h_in} and {h_out}")


def connector_max_speed(
    kind: Movement | str,
    a: float,
    approach_edge_length: float,
    approach_speed_limit: float,
    cap_through: bool = True,
) -> float:
    """Maximum possible speed for a movement through an intersection.

    Turns use fixed empirical speeds; through movements allow the speed reached
    by accelerating at ``a`` over the approach edge, optionally capped by the
    approach speed limit.
    """
    kind = Movement(kind)
    if kind is Movement.LT:
        return LEFT_TURN_SPEED
    if kind is Movement.RT:
        return RIGHT_TURN_SPEED
    if a <= 0 or approach_edge_length <= 0:
        raise NetworkError("through speed needs a > 0 and a positive approach length")
    v = math.sqrt(2.0 * a * approach_edge_length)
    return min(v, approach_speed_limit) if cap_through else v


@dataclass(frozen=True)
class NetworkGraph:
    nodes: Mapping[str, Node]
    edges: Mapping[str, Edge]
    connectors: Mapping[str, Connector]
    routes: tuple[Route, ...]
    variant: Variant
    origin_routes: Mapping[str, tuple[Route, ...]] = field(default_factory=dict)
    connector_length: float = DEFAULT_CONNECTOR_LENGTH
    estimator_accel: float = 3.0
    cap_through: bool = True

    @property
    def inflow_nodes(self) -> tuple[str, ...]:
        return tuple(n.id for n in self.nodes.values() if n.is_inflow)

    @property
    def outflow_node(self) -> str:
        return next(n.id for n in self.nodes.values() if n.is_outflow)

    def element(self, element_id: str) -> Edge | Connector:
        if element_id in self.edges:
            return self.edges[element_id]
        return self.connectors[element_id]

    def element_ids(self) -> list[str]:
        """Stable element order used by the simulator: edges, then connectors."""
        return sorted(self.edges) + sorted(self.connectors)

    def total_lane_length(self) -> float:
        return sum(e.length * e.lanes for e in self.edges.values()) + sum(
            c.length for c in self.connectors.values()
        )

    def successors(self, node: str) -> list[Edge]:
        return sorted((e for e in self.edges.values() if e.from_node == node), key=lambda e: e.id)

    def route(self, route_id: str) -> Route:
        for routes in (self.routes, *self.origin_routes.values()):
            for r in routes:
                if r.id == route_id:
                    return r
        raise KeyError(route_id)

    def incidence_matrix(self, routes: Sequence[Route] | None = None) -> tuple[list[str], list[str], list[list[int]]]:
        """Edge-by-route 0/1 matrix rebuilt from the route element lists."""
        routes = self.routes if routes is None else routes
        edge_ids = sorted(self.edges)
        matrix = [[1 if eid in r.elements else 0 for r in routes] for eid in edge_ids]
        return edge_ids, [r.id for r in routes], matrix

    def without_edge(self, removed: str) -> "NetworkGraph":
        """Copy of the graph with one road edge (and its connectors) removed."""
        if removed not in self.edges:
            raise NetworkError(f"unknown edge {removed!r}")
        edges = {k: v for k, v in self.edges.items() if k != removed}
        connectors = {
            k: c for k, c in self.connectors.items() if removed not in (c.from_edge, c.to_edge)
        }
        stub = NetworkGraph(
            nodes=self.nodes,
            edges=edges,
            connectors=connectors,
            routes=(),
            variant=self.variant,
            connector_length=self.connector_length,
            estimator_accel=self.estimator_accel,
            cap_through=self.cap_through,
        )
        routes = tuple(routes_between(stub, ORIGIN, DESTINATION))
        origin_routes = {n: tuple(routes_between(stub, n, DESTINATION)) for n in stub.inflow_nodes}
        return NetworkGraph(
            nodes=self.nodes,
            edges=edges,
            connectors=connectors,
            routes=routes,
            variant=self.variant,
            origin_routes=origin_routes,
            connector_length=self.connector_length,
            estimator_accel=self.estimator_accel,
            cap_through=self.cap_through,
        )

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "nodes": [
                {
                    "id": n.id,
                    "grid_position": list(n.grid_position),
                    "control": n.control.value,
                    "is_inflow": n.is_inflow,
                    "is_outflow": n.is_outflow,
                }
                for n in self.nodes.values()
            ],
            "edges": [
                {
                    "id": e.id,
                    "from": e.from_node,
                    "to": e.to_node,
                    "length": e.length,
                    "speed_limit": e.speed_limit,
                    "length_class": e.length_class,
                    "lanes": e.lanes,
                }
                for e in self.edges.values()
            ],
            "connectors": [
                {
                    "id": c.id,
                    "at_node": c.at_node,
                    "from_edge": c.from_edge,
                    "to_edge": c.to_edge,
                    "kind": c.kind.value,
                    "length": c.length,
                    "max_speed": c.max_speed,
                }
                for c in self.connectors.values()
            ],
            "routes": [
                {"id": r.id, "nodes": list(r.nodes), "elements": list(r.elements)}
                for routes in (self.routes, *self.origin_routes.values())
                for r in routes
            ],
        }


def _make_connector(
    node: Node,
    nodes: Mapping[str, Node],
    in_edge: Edge | None,
    out_edge: Edge | None,
    length: float,
    a: float,
    cap_through: bool,
) -> Connector:
    if in_edge is not None:
        h_in = heading(nodes[in_edge.from_node].grid_position, node.grid_position)
    else:
        h_in = BOUNDARY_HEADING
    if out_edge is not None:
        h_out = heading(node.grid_position, nodes[out_edge.to_node].grid_position)
    else:
        h_out = BOUNDARY_HEADING
    kind = classify_turn(h_in, h_out)
    approach = in_edge if in_edge is not None else out_edge
    assert approach is not None
    vmax = connector_max_speed(kind, a, approach.length, approach.speed_limit, cap_through)
    return Connector(
        id=connector_id(node.id, in_edge.id if in_edge else None, out_edge.id if out_edge else None),
        at_node=node.id,
        from_edge=in_edge.id if in_edge else None,
        to_edge=out_edge.id if out_edge else None,
        kind=kind,
        length=length,
        max_speed=vmax,
    )


def build_grid(
    variant: Variant | str,
    edge_length: float,
    base_speed_limit: float,
    added_path_speed_limit: float,
    inflow_nodes: Iterable[str] = (ORIGIN,),
    *,
    connector_length: float = DEFAULT_CONNECTOR_LENGTH,
    estimator_accel: float = 3.0,
    cap_through: bool = True,
    edge_lengths: Mapping[str, float] | None = None,
) -> NetworkGraph:
    """Build the baseline or added-path grid.

    ``edge_lengths`` optionally overrides the common ``edge_length`` per edge id.
    """
    try:
        variant = Variant(variant)
    except ValueError:
        raise NetworkError(f"invalid variant {variant!r}") from None
    if edge_length <= 0:
        raise NetworkError("edge_length must be positive")
    if base_speed_limit <= 0 or added_path_speed_limit <= 0:
        raise NetworkError("speed limits must be positive")
    if connector_length <= 0:
        raise NetworkError("connector_length must be positive")
    inflow = set(inflow_nodes)
    if not inflow:
        raise NetworkError("at least one inflow node is required")
    unknown = inflow - set(GRID_LAYOUT)
    if unknown:
        raise NetworkError(f"inflow node(s) not in graph: {sorted(unknown)}")
    if DESTINATION in inflow:
        raise NetworkError("the outflow node cannot be an inflow node")

    nodes = {
        nid: Node(
            id=nid,
            grid_position=pos,
            control=Control.UNCONTROLLED if nid == ORIGIN else Control.ALL_WAY_STOP,
            is_inflow=nid in inflow,
            is_outflow=nid == DESTINATION,
        )
        for nid, pos in GRID_LAYOUT.items()
    }

    specs = list(BASE_EDGES)
    if variant is Variant.ADDED_PATH:
        specs.append(ADDED_EDGE)
    edge_lengths = dict(edge_lengths or {})
    edges: dict[str, Edge] = {}
    for u, v, cls in specs:
        eid = edge_id(u, v)
        length = float(edge_lengths.pop(eid, edge_length))
        if length <= 0:
            raise NetworkError(f"edge {eid} must have positive length")
        limit = added_path_speed_limit if cls == "c" else base_speed_limit
        edges[eid] = Edge(eid, u, v, length, float(limit), cls)
    if edge_lengths:
        raise NetworkError(f"length override for unknown edge(s): {sorted(edge_lengths)}")
    edges = dict(sorted(edges.items()))

    connectors: dict[str, Connector] = {}
    for node in nodes.values():
        incoming = [e for e in edges.values() if e.to_node == node.id]
        outgoing = [e for e in edges.values() if e.from_node == node.id]
        pairs: list[tuple[Edge | None, Edge | None]] = [(i, o) for i in incoming for o in outgoing]
        if node.control is Control.UNCONTROLLED:
            pairs += [(None, o) for o in outgoing]
        if node.is_outflow:
            pairs += [(i, None) for i in incoming]
        for in_edge, out_edge in pairs:
            c = _make_connector(node, nodes, in_edge, out_edge, connector_length, estimator_accel, cap_through)
            connectors[c.id] = c
    connectors = dict(sorted(connectors.items()))

    stub = NetworkGraph(
        nodes=nodes,
        edges=edges,
        connectors=connectors,
        routes=(),
        variant=variant,
        connector_length=connector_length,
        estimator_accel=estimator_accel,
        cap_through=cap_through,
    )
    routes = tuple(routes_between(stub, ORIGIN, DESTINATION))
    origin_routes = {n: tuple(routes_between(stub, n, DESTINATION)) for n in sorted(inflow)}
    return NetworkGraph(
        nodes=nodes,
        edges=edges,
        connectors=connectors,
        routes=routes,
        variant=variant,
        origin_routes=origin_routes,
        connector_length=connector_length,
        estimator_accel=estimator_accel,
        cap_through=cap_through,
    )


def _simple_paths(net: NetworkGraph, origin: str, destination: str) -> list[list[str]]:
    paths: list[list[str]] = []
    stack: list[tuple[str, list[str]]] = [(origin, [origin])]
    while stack:
        node, path = stack.pop()
        if node == destination:
            paths.append(path)
            continue
        for e in reversed(net.successors(node)):
            if e.to_node not in path:
                stack.append((e.to_node, path + [e.to_node]))
    return sorted(paths)


def _wrap(net: NetworkGraph, node_path: Sequence[str]) -> Route:
    edge_seq = [edge_id(u, v) for u, v in zip(node_path, node_path[1:])]
    elements: list[str] = []
    first = net.nodes[node_path[0]]
    if first.control is Control.UNCONTROLLED:
        elements.append(connector_id(first.id, None, edge_seq[0]))
    for i, eid in enumerate(edge_seq):
        elements.append(eid)
        nxt = edge_seq[i + 1] if i + 1 < len(edge_seq) else None
        at = node_path[i + 1]
        if nxt is None and not net.nodes[at].is_outflow:
            break
        elements.append(connector_id(at, eid, nxt))
    missing = [el for el in elements if el not in net.edges and el not in net.connectors]
    if missing:
        raise NetworkError(f"route {node_path} uses unknown elements {missing}")
    incidence = {eid: int(eid in edge_seq) for eid in net.edges}
    return Route(id="-".join(node_path), nodes=tuple(node_path), elements=tuple(elements), incidence=incidence)


def routes_between(net: NetworkGraph, origin: str, destination: str) -> list[Route]:
    """All simple directed routes, wrapped with connectors, in lexicographic order."""
    if origin not in net.nodes or destination not in net.nodes:
        raise NetworkError(f"unknown node in query {origin!r} -> {destination!r}")
    if origin == destination:
        raise NetworkError("origin and destination must differ")
    return [_wrap(net, p) for p in _simple_paths(net, origin, destination)]
