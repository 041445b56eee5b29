"""Road networks, traffic flows, their JSON files and synthetic grid scenarios.

File layout follows the public CityFlow roadnet/flow documents:

roadnet::

    {"intersections": [{"id": 0, "point": {"x": 0.0, "y": 0.0}, "virtual": false}, ...],
     "roads": [{"id": "road_9_0", "startIntersection": 9, "endIntersection": 0,
                "length": 300.0, "maxSpeed": 16.67,
                "lanes": [{"width": 3.0, "maxSpeed": 16.67}, ...]}, ...]}

flow::

    [{"vehicle": {...}, "route": ["road_9_0", "road_0_1", ...],
      "interval": 12.0, "startTime": 0, "endTime": 3600}, ...]

Unknown keys are ignored. Road length falls back to the polyline length of
``points`` and the speed to the first lane's ``maxSpeed``. Intersection ids
may be strings (as in CityFlow exports); they are then renumbered in file
order and the original string is kept as ``name``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

APPROACHES = ("E", "S", "W", "N")
MOVEMENTS = ("T", "L", "R")
LANES_PER_INTERSECTION = len(APPROACHES) * len(MOVEMENTS)

# Vehicles arriving from side X and turning left leave through side LEFT_EXIT[X].
_OPPOSITE = {"E": "W", "W": "E", "S": "N", "N": "S"}
_LEFT_EXIT = {"E": "S", "S": "W", "W": "N", "N": "E"}
_RIGHT_EXIT = {k: _OPPOSITE[v] for k, v in _LEFT_EXIT.items()}

DEFAULT_LENGTH = 300.0
DEFAULT_LANES = 3
DEFAULT_SPEED = 16.67
DEFAULT_EPISODE = 3600


class ParseError(ValueError):
    """Malformed or unreadable roadnet/flow document."""


class ValidationError(ValueError):
    """Document parsed but violates a network or flow invariant."""


class InvalidArgument(ValueError):
    pass


def lane_slot(approach: str, movement: str) -> int:
    """Index of an incoming lane in the 12-lane E,S,W,N x T,L,R ordering."""
    return APPROACHES.index(approach) * 3 + MOVEMENTS.index(movement)


@dataclass(frozen=True)
class PhaseDef:
    phase_id: int
    movements: tuple[tuple[str, str], ...]

    def slots(self) -> tuple[int, ...]:
        return tuple(lane_slot(a, m) for a, m in self.movements)


PHASES = (
    PhaseDef(1, (("E", "T"), ("W", "T"))),
    PhaseDef(2, (("E", "L"), ("W", "L"))),
    PhaseDef(3, (("S", "T"), ("N", "T"))),
    PhaseDef(4, (("N", "L"), ("S", "L"))),
)
RIGHT_TURN_SLOTS = tuple(lane_slot(a, "R") for a in APPROACHES)


@dataclass(frozen=True)
class Link:
    id: str
    from_node: int
    to_node: int
    length: float = DEFAULT_LENGTH
    lane_count: int = DEFAULT_LANES
    free_flow_speed: float = DEFAULT_SPEED

    @property
    def travel_ticks(self) -> int:
        """Whole seconds to traverse the link at free-flow speed."""
        return max(1, math.ceil(round(self.length / self.free_flow_speed, 6)))


@dataclass(frozen=True)
class Intersection:
    id: int
    position: tuple[float, float]
    virtual: bool = False
    name: str | None = None
    phase_count: int = 4
    # filled for signalized nodes: approach -> incoming link id, side -> outgoing link id
    incoming: dict[str, str] = field(default_factory=dict, compare=True)
    outgoing: dict[str, str] = field(default_factory=dict, compare=True)

    @property
    def incoming_lanes(self) -> list[tuple[str, str]]:
        """(link id, movement) for the 12 lanes in observation order."""
        if self.virtual:
            return []
        return [(self.incoming[a], m) for a in APPROACHES for m in MOVEMENTS]

    @property
    def outgoing_lanes(self) -> list[tuple[str, str]]:
        if self.virtual:
            return []
        return [(self.outgoing[s], m) for s in APPROACHES for m in MOVEMENTS]

    @property
    def movement_table(self) -> dict[tuple[str, str], str]:
        """(incoming link id, movement) -> outgoing link id."""
        if self.virtual:
            return {}
        table = {}
        for a in APPROACHES:
            link = self.incoming[a]
            table[(link, "T")] = self.outgoing[_OPPOSITE[a]]
            table[(link, "L")] = self.outgoing[_LEFT_EXIT[a]]
            table[(link, "R")] = self.outgoing[_RIGHT_EXIT[a]]
        return table

    def movement_between(self, in_link: str, out_link: str) -> str | None:
        for (link, mv), out in self.movement_table.items():
            if link == in_link and out == out_link:
                return mv
        return None


@dataclass(frozen=True)
class RoadNetwork:
    intersections: tuple[Intersection, ...]
    links: tuple[Link, ...]

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {n.id: n for n in self.intersections})
        object.__setattr__(self, "_links", {lk.id: lk for lk in self.links})

    @property
    def signalized(self) -> list[Intersection]:
        return [n for n in self.intersections if not n.virtual]

    @property
    def n_agents(self) -> int:
        return len(self.signalized)

    def node(self, node_id: int) -> Intersection:
        return self._by_id[node_id]

    def link(self, link_id: str) -> Link:
        return self._links[link_id]

    def has_link(self, link_id: str) -> bool:
        return link_id in self._links

    @property
    def adjacency(self) -> np.ndarray:
        """N x N 0/1 matrix over signalized intersections (agent order)."""
        index = {n.id: i for i, n in enumerate(self.signalized)}
        adj = np.zeros((len(index), len(index)), dtype=np.int64)
        for lk in self.links:
            if lk.from_node in index and lk.to_node in index:
                i, j = index[lk.from_node], index[lk.to_node]
                adj[i, j] = adj[j, i] = 1
        return adj

    def boundary_links(self) -> list[Link]:
        return [lk for lk in self.links if self.node(lk.from_node).virtual or self.node(lk.to_node).virtual]


@dataclass(frozen=True)
class Flow:
    route: tuple[str, ...]
    interval: float
    start_time: float = 0.0
    end_time: float = float(DEFAULT_EPISODE)

    def spawn_times(self, offset: float = 0.0) -> np.ndarray:
        """Spawn instants ``start + offset + k*interval`` strictly before ``end_time``."""
        first = self.start_time + offset
        if first >= self.end_time:
            return np.zeros(0)
        count = math.ceil((self.end_time - first) / self.interval)
        times = first + self.interval * np.arange(count)
        return times[times < self.end_time]


@dataclass(frozen=True)
class FlowSpec:
    flows: tuple[Flow, ...] = ()

    def __len__(self) -> int:
        return len(self.flows)

    def __iter__(self):
        return iter(self.flows)

    def validate(self, network: RoadNetwork) -> None:
        for k, fl in enumerate(self.flows):
            if not fl.route:
                raise ValidationError(f"flow {k}: empty route")
            for lid in fl.route:
                if not network.has_link(lid):
                    raise ValidationError(f"flow {k}: unknown link {lid!r}")
            for a, b in zip(fl.route, fl.route[1:]):
                la, lb = network.link(a), network.link(b)
                if la.to_node != lb.from_node:
                    raise ValidationError(f"flow {k}: route not contiguous at {a!r} -> {b!r}")
                node = network.node(la.to_node)
                if node.virtual:
                    raise ValidationError(f"flow {k}: route passes through boundary node {node.id}")
                if node.movement_between(a, b) is None:
                    raise ValidationError(f"flow {k}: no movement {a!r} -> {b!r} at node {node.id}")


def _check_flow(fl: Flow, k: int) -> None:
    if not fl.interval > 0:
        raise ValidationError(f"flow {k}: interval must be positive")
    if fl.start_time > fl.end_time:
        raise ValidationError(f"flow {k}: start_time after end_time")


# ------------------------------------------------------------------ building


def _side_of(center: tuple[float, float], other: tuple[float, float]) -> str:
    dx, dy = other[0] - center[0], other[1] - center[1]
    if abs(dx) >= abs(dy):
        return "E" if dx > 0 else "W"
    return "N" if dy > 0 else "S"


def build_network(nodes: list[dict], links: list[Link]) -> RoadNetwork:
    """Assemble and validate a network from raw node records and links.

    Each node record carries ``id``, ``position`` and ``virtual``. Approach
    sides of signalized nodes are inferred from the relative position of
    the neighbouring node.
    """
    ids = [n["id"] for n in nodes]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate intersection id")
    pos = {n["id"]: tuple(n["position"]) for n in nodes}
    seen_links = set()
    for lk in links:
        if lk.id in seen_links:
            raise ValidationError(f"duplicate link id {lk.id!r}")
        seen_links.add(lk.id)
        for end in (lk.from_node, lk.to_node):
            if end not in pos:
                raise ValidationError(f"link {lk.id!r} references unknown intersection {end!r}")
        if lk.from_node == lk.to_node:
            raise ValidationError(f"link {lk.id!r} is a self loop")
        if not lk.length > 0:
            raise ValidationError(f"link {lk.id!r}: length must be positive")
        if lk.lane_count < 1:
            raise ValidationError(f"link {lk.id!r}: lane_count must be >= 1")
        if not lk.free_flow_speed > 0:
            raise ValidationError(f"link {lk.id!r}: free_flow_speed must be positive")

    built = []
    for rec in nodes:
        nid = rec["id"]
        if rec.get("virtual", False):
            built.append(Intersection(nid, pos[nid], True, rec.get("name")))
            continue
        incoming: dict[str, str] = {}
        outgoing: dict[str, str] = {}
        for lk in links:
            if lk.to_node == nid:
                side = _side_of(pos[nid], pos[lk.from_node])
                if side in incoming:
                    raise ValidationError(f"intersection {nid}: two incoming links from side {side}")
                incoming[side] = lk.id
            if lk.from_node == nid:
                side = _side_of(pos[nid], pos[lk.to_node])
                if side in outgoing:
                    raise ValidationError(f"intersection {nid}: two outgoing links towards side {side}")
                outgoing[side] = lk.id
        if len(incoming) != 4 or len(outgoing) != 4:
            raise ValidationError(
                f"signalized intersection {nid} needs 4 approaches for the 4-phase plan, "
                f"has {len(incoming)} in / {len(outgoing)} out"
            )
        built.append(Intersection(nid, pos[nid], False, rec.get("name"), 4, incoming, outgoing))
    return RoadNetwork(tuple(built), tuple(links))


# ------------------------------------------------------------------ file I/O


def _read_json(path) -> object:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if not text.strip():
        raise ParseError(f"{path} is empty")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _polyline_length(points: list[dict]) -> float:
    return sum(
        math.hypot(b["x"] - a["x"], b["y"] - a["y"]) for a, b in zip(points, points[1:])
    )


def parse_roadnet(doc: object) -> RoadNetwork:
    if not isinstance(doc, dict) or "intersections" not in doc or "roads" not in doc:
        raise ParseError("roadnet must be an object with 'intersections' and 'roads'")
    try:
        raw_nodes = list(doc["intersections"])
        renumber = any(isinstance(n["id"], str) for n in raw_nodes)
        id_map = {n["id"]: (k if renumber else int(n["id"])) for k, n in enumerate(raw_nodes)}
        nodes = []
        for n in raw_nodes:
            point = n.get("point", {"x": 0.0, "y": 0.0})
            nodes.append(
                {
                    "id": id_map[n["id"]],
                    "position": (float(point["x"]), float(point["y"])),
                    "virtual": bool(n.get("virtual", False)),
                    "name": n.get("name", n["id"] if renumber else None),
                }
            )
        links = []
        for r in doc["roads"]:
            lanes = r.get("lanes", [])
            if "length" in r:
                length = float(r["length"])
            elif "points" in r:
                length = _polyline_length(r["points"])
            else:
                raise ParseError(f"road {r.get('id')!r} has neither length nor points")
            speed = r.get("maxSpeed", lanes[0].get("maxSpeed") if lanes else DEFAULT_SPEED)
            lane_count = int(r.get("laneCount", len(lanes) if lanes else DEFAULT_LANES))
            start, end = r["startIntersection"], r["endIntersection"]
            links.append(
                Link(
                    id=str(r["id"]),
                    from_node=id_map.get(start, start),
                    to_node=id_map.get(end, end),
                    length=length,
                    lane_count=lane_count,
                    free_flow_speed=float(speed),
                )
            )
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"malformed roadnet: {exc!r}") from exc
    return build_network(nodes, links)


def load_roadnet(path) -> RoadNetwork:
    return parse_roadnet(_read_json(path))


def roadnet_document(net: RoadNetwork) -> dict:
    inters = []
    for n in net.intersections:
        rec = {"id": n.id, "point": {"x": n.position[0], "y": n.position[1]}, "virtual": n.virtual}
        if n.name is not None:
            rec["name"] = n.name
        inters.append(rec)
    roads = []
    for lk in net.links:
        a, b = net.node(lk.from_node).position, net.node(lk.to_node).position
        roads.append(
            {
                "id": lk.id,
                "startIntersection": lk.from_node,
                "endIntersection": lk.to_node,
                "points": [{"x": a[0], "y": a[1]}, {"x": b[0], "y": b[1]}],
                "length": lk.length,
                "maxSpeed": lk.free_flow_speed,
                "laneCount": lk.lane_count,
                "lanes": [{"width": 3.0, "maxSpeed": lk.free_flow_speed}] * lk.lane_count,
            }
        )
    return {"intersections": inters, "roads": roads}


def _dump(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def save_roadnet(net: RoadNetwork, path) -> None:
    _dump(roadnet_document(net), path)


def parse_flow(doc: object, network: RoadNetwork | None = None) -> FlowSpec:
    if not isinstance(doc, list):
        raise ParseError("flow file must be a JSON array")
    flows = []
    try:
        for k, rec in enumerate(doc):
            fl = Flow(
                route=tuple(str(x) for x in rec["route"]),
                interval=float(rec["interval"]),
                start_time=float(rec.get("startTime", 0.0)),
                end_time=float(rec.get("endTime", DEFAULT_EPISODE)),
            )
            if fl.end_time < 0:
                # CityFlow writes -1 for "until the simulation stops"
                fl = Flow(fl.route, fl.interval, fl.start_time, float(DEFAULT_EPISODE))
            _check_flow(fl, k)
            flows.append(fl)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ParseError(f"malformed flow entry: {exc!r}") from exc
    spec = FlowSpec(tuple(flows))
    if network is not None:
        spec.validate(network)
    return spec


def load_flow(path, network: RoadNetwork | None = None) -> FlowSpec:
    return parse_flow(_read_json(path), network)


_VEHICLE = {
    "length": 5.0,
    "width": 2.0,
    "maxPosAcc": 2.0,
    "maxNegAcc": 4.5,
    "usualPosAcc": 2.0,
    "usualNegAcc": 4.5,
    "minGap": 2.5,
    "maxSpeed": DEFAULT_SPEED,
    "headwayTime": 2.0,
}


def flow_document(spec: FlowSpec) -> list:
    return [
        {
            "vehicle": dict(_VEHICLE),
            "route": list(fl.route),
            "interval": fl.interval,
            "startTime": fl.start_time,
            "endTime": fl.end_time,
        }
        for fl in spec.flows
    ]


def save_flow(spec: FlowSpec, path) -> None:
    _dump(flow_document(spec), path)


# ------------------------------------------------------------------ grids


def generate_grid(
    rows: int,
    cols: int,
    mode: str = "bidirectional",
    we_rate: float = 300.0,
    sn_rate: float = 90.0,
    spacing: float = DEFAULT_LENGTH,
    lanes: int = DEFAULT_LANES,
    speed: float = DEFAULT_SPEED,
    duration: float = float(DEFAULT_EPISODE),
) -> tuple[RoadNetwork, FlowSpec]:
    """Grid of ``rows x cols`` signalized intersections with straight corridor flows.

    Intersection ``r*cols + c`` sits at row ``r`` (0 = north) and column
    ``c`` (0 = west). Every grid edge end gets a virtual boundary node.
    Rates are vehicles per hour per entry road; ``mode`` is
    ``bidirectional`` (W<->E and S<->N) or ``unidirectional`` (W->E, N->S).
    """
    mode = {"bi": "bidirectional", "uni": "unidirectional"}.get(mode, mode)
    if rows < 1 or cols < 1:
        raise InvalidArgument("rows and cols must be >= 1")
    if mode not in ("bidirectional", "unidirectional"):
        raise InvalidArgument(f"unknown mode {mode!r}")
    if we_rate < 0 or sn_rate < 0:
        raise InvalidArgument("rates must be >= 0")

    def grid_pos(r, c):
        return (c * spacing, (rows - 1 - r) * spacing)

    nodes = [
        {"id": r * cols + c, "position": grid_pos(r, c), "virtual": False}
        for r in range(rows)
        for c in range(cols)
    ]
    nid = rows * cols
    west, east, north, south = {}, {}, {}, {}
    for r in range(rows):
        west[r], east[r] = nid, nid + 1
        nodes.append({"id": nid, "position": grid_pos(r, -1), "virtual": True})
        nodes.append({"id": nid + 1, "position": grid_pos(r, cols), "virtual": True})
        nid += 2
    for c in range(cols):
        north[c], south[c] = nid, nid + 1
        nodes.append({"id": nid, "position": grid_pos(-1, c), "virtual": True})
        nodes.append({"id": nid + 1, "position": grid_pos(rows, c), "virtual": True})
        nid += 2

    links: list[Link] = []

    def road(a, b):
        lid = f"road_{a}_{b}"
        links.append(Link(lid, a, b, spacing, lanes, speed))
        return lid

    def chain(seq):
        return tuple(road(a, b) for a, b in zip(seq, seq[1:]))

    routes = {}
    for r in range(rows):
        row = [r * cols + c for c in range(cols)]
        routes[("WE", r)] = chain([west[r], *row, east[r]])
        routes[("EW", r)] = chain([east[r], *reversed(row), west[r]])
    for c in range(cols):
        col = [r * cols + c for r in range(rows)]
        routes[("NS", c)] = chain([north[c], *col, south[c]])
        routes[("SN", c)] = chain([south[c], *reversed(col), north[c]])

    net = build_network(nodes, links)

    wanted = [("WE", we_rate), ("NS", sn_rate)]
    if mode == "bidirectional":
        wanted += [("EW", we_rate), ("SN", sn_rate)]
    flows = []
    for direction, rate in wanted:
        if rate <= 0:
            continue
        count = rows if direction in ("WE", "EW") else cols
        for k in range(count):
            flows.append(Flow(routes[(direction, k)], 3600.0 / rate, 0.0, duration))
    spec = FlowSpec(tuple(flows))
    spec.validate(net)
    return net, spec
