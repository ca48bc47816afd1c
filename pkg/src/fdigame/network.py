"""Road networks, trip tables, TNTP ingestion and GRE network generation."""
from __future__ import annotations

import io
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, TextIO

import numpy as np


class TntpParseError(ValueError):
    """Malformed TNTP input. ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NetworkValidationError(ValueError):
    pass


@dataclass(frozen=True)
class EdgeAttr:
    free_flow_time: float
    capacity: float
    b: float = 0.15
    p: float = 4.0

    def __post_init__(self):
        if not self.free_flow_time > 0:
            raise ValueError(f"free_flow_time must be > 0, got {self.free_flow_time}")
        if not self.capacity > 0:
            raise ValueError(f"capacity must be > 0, got {self.capacity}")
        if self.b < 0 or self.p < 0:
            raise ValueError("BPR coefficients b and p must be nonnegative")


@dataclass(frozen=True)
class RoadNetwork:
    """Directed road graph with per-edge BPR attributes.

    Edge order is fixed at construction; every per-edge vector used elsewhere
    (travel times, perturbations, features) is indexed the same way.
    """

    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int, EdgeAttr], ...]
    index: dict[int, int] = field(init=False, repr=False, compare=False)
    tail: np.ndarray = field(init=False, repr=False, compare=False)
    head: np.ndarray = field(init=False, repr=False, compare=False)
    free_flow: np.ndarray = field(init=False, repr=False, compare=False)
    capacity: np.ndarray = field(init=False, repr=False, compare=False)
    bpr_b: np.ndarray = field(init=False, repr=False, compare=False)
    bpr_p: np.ndarray = field(init=False, repr=False, compare=False)
    out_edges: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)
    in_edges: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        nodes = tuple(self.nodes)
        edges = tuple((int(u), int(v), attr) for u, v, attr in self.edges)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        index = {n: i for i, n in enumerate(nodes)}
        if len(index) != len(nodes):
            raise NetworkValidationError("duplicate node ids")
        seen = set()
        for u, v, _ in edges:
            if u not in index or v not in index:
                raise NetworkValidationError(f"edge ({u}, {v}) references an unknown node")
            if u == v:
                raise NetworkValidationError(f"self-loop at node {u}")
            if (u, v) in seen:
                raise NetworkValidationError(f"duplicate edge ({u}, {v})")
            seen.add((u, v))

        def frozen(a, dtype=float):
            arr = np.asarray(a, dtype=dtype)
            arr.setflags(write=False)
            return arr

        object.__setattr__(self, "index", index)
        object.__setattr__(self, "tail", frozen([index[u] for u, _, _ in edges], np.int64))
        object.__setattr__(self, "head", frozen([index[v] for _, v, _ in edges], np.int64))
        object.__setattr__(self, "free_flow", frozen([a.free_flow_time for *_, a in edges]))
        object.__setattr__(self, "capacity", frozen([a.capacity for *_, a in edges]))
        object.__setattr__(self, "bpr_b", frozen([a.b for *_, a in edges]))
        object.__setattr__(self, "bpr_p", frozen([a.p for *_, a in edges]))
        out = [[] for _ in nodes]
        inc = [[] for _ in nodes]
        for e, (u, v, _) in enumerate(edges):
            out[index[u]].append(e)
            inc[index[v]].append(e)
        object.__setattr__(self, "out_edges", tuple(tuple(x) for x in out))
        object.__setattr__(self, "in_edges", tuple(tuple(x) for x in inc))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def adjacency(self) -> dict[int, tuple[int, ...]]:
        """Outgoing edge indices keyed by node id."""
        return {n: self.out_edges[i] for i, n in enumerate(self.nodes)}

    def edge_attr(self, e: int) -> EdgeAttr:
        return self.edges[e][2]

    def fingerprint(self) -> str:
        """Short stable hash of the edge ordering, used to match checkpoints to networks."""
        import hashlib

        h = hashlib.sha256()
        for u, v, a in self.edges:
            h.update(f"{u},{v},{a.free_flow_time!r},{a.capacity!r},{a.b!r},{a.p!r};".encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class TripTable:
    trips: tuple[tuple[int, int, float], ...] = ()

    def __post_init__(self):
        trips = tuple((int(o), int(d), float(s)) for o, d, s in self.trips)
        object.__setattr__(self, "trips", trips)

    def __len__(self) -> int:
        return len(self.trips)

    def __iter__(self):
        return iter(self.trips)

    @property
    def demands(self) -> np.ndarray:
        return np.array([s for _, _, s in self.trips], dtype=float)

    @property
    def total_demand(self) -> float:
        return float(sum(s for _, _, s in self.trips))


@dataclass(frozen=True)
class GreParams:
    rows: int
    cols: int
    p: float = 0.6057
    q: float = 0.3162
    seed: int = 0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be positive")
        if self.rows * self.cols < 2:
            raise ValueError("a GRE grid needs at least two nodes")
        if not (0.0 <= self.p <= 1.0 and 0.0 <= self.q <= 1.0):
            raise ValueError("p and q must lie in [0, 1]")


# --------------------------------------------------------------------------- TNTP

_META = re.compile(r"^\s*<([^>]+)>\s*(.*)$")
_STANDARD_LINK_COLUMNS = ["init_node", "term_node", "capacity", "length", "free_flow_time",
                          "b", "power", "speed", "toll", "link_type"]


def _read_metadata(lines: list[str]) -> tuple[dict[str, str], int]:
    meta: dict[str, str] = {}
    for i, raw in enumerate(lines):
        line = raw.strip()
        if not line or line.startswith("~"):
            continue
        m = _META.match(line)
        if m is None:
            raise TntpParseError(f"expected a <KEY> metadata line, got {line!r}", i + 1)
        key = m.group(1).strip().upper()
        if key == "END OF METADATA":
            return meta, i + 1
        meta[key] = m.group(2).strip()
    raise TntpParseError("missing <END OF METADATA>", len(lines))


def _parse_links(text: str) -> tuple[dict[str, str], list[tuple[int, int, EdgeAttr]]]:
    lines = text.splitlines()
    meta, start = _read_metadata(lines)
    if "NUMBER OF NODES" not in meta:
        raise TntpParseError("missing <NUMBER OF NODES> header", 1)
    columns = _STANDARD_LINK_COLUMNS
    links = []
    for i in range(start, len(lines)):
        line = lines[i].strip()
        if not line:
            continue
        if line.startswith("~"):
            names = [c.lower() for c in line[1:].replace(";", " ").split()]
            if "init_node" in names and "term_node" in names:
                columns = names
            continue
        vals = line.rstrip(";").split()
        try:
            row = dict(zip(columns, vals))
            u, v = int(row["init_node"]), int(row["term_node"])
            attr = EdgeAttr(
                free_flow_time=float(row["free_flow_time"]),
                capacity=float(row["capacity"]),
                b=float(row["b"]),
                p=float(row["power"]),
            )
        except (KeyError, ValueError) as exc:
            raise TntpParseError(f"bad link row {line!r} ({exc})", i + 1) from None
        links.append((u, v, attr))
    return meta, links


def _parse_trips(text: str) -> list[tuple[int, int, float]]:
    lines = text.splitlines()
    _, start = _read_metadata(lines)
    trips = []
    origin = None
    for i in range(start, len(lines)):
        line = lines[i].strip()
        if not line or line.startswith("~"):
            continue
        if line.lower().startswith("origin"):
            parts = line.split()
            try:
                origin = int(parts[1])
            except (IndexError, ValueError):
                raise TntpParseError(f"bad Origin line {line!r}", i + 1) from None
            continue
        if origin is None:
            raise TntpParseError("destination entries before any Origin block", i + 1)
        for entry in line.split(";"):
            entry = entry.strip()
            if not entry:
                continue
            try:
                dest, flow = entry.split(":")
                dest, flow = int(dest), float(flow)
            except ValueError:
                raise TntpParseError(f"bad demand entry {entry!r}", i + 1) from None
            if flow > 0 and dest != origin:
                trips.append((origin, dest, flow))
    return trips


def _read(source) -> str:
    if isinstance(source, str):
        return source
    return source.read()


def load_tntp(net_source: TextIO | str, trips_source: TextIO | str | None = None
              ) -> tuple[RoadNetwork, TripTable]:
    """Parse a TNTP network file and (optionally) a TNTP trips file.

    Sources are text streams or strings holding the file contents. Node ids are
    1..N as declared by ``<NUMBER OF NODES>``; zero-flow OD pairs are dropped.
    """
    meta, links = _parse_links(_read(net_source))
    try:
        n_nodes = int(meta["NUMBER OF NODES"])
    except ValueError:
        raise TntpParseError("non-integer <NUMBER OF NODES>", 1) from None
    node_ids = set(range(1, n_nodes + 1))
    for u, v, _ in links:
        if u not in node_ids or v not in node_ids:
            raise NetworkValidationError(f"link ({u}, {v}) outside declared node range 1..{n_nodes}")
    net = RoadNetwork(tuple(range(1, n_nodes + 1)), tuple(links))
    trips: list[tuple[int, int, float]] = []
    if trips_source is not None:
        trips = _parse_trips(_read(trips_source))
        for o, d, _ in trips:
            if o not in net.index or d not in net.index:
                raise NetworkValidationError(f"trip ({o} -> {d}) references an unknown node")
    return net, TripTable(tuple(trips))


def write_tntp(net: RoadNetwork, trips: TripTable | None = None) -> tuple[str, str]:
    """Serialize to TNTP text. Floats use ``repr`` so re-ingestion is exact."""
    if list(net.nodes) != list(range(1, net.n_nodes + 1)):
        raise ValueError("TNTP output requires node ids 1..N")
    out = io.StringIO()
    out.write(f"<NUMBER OF ZONES> {net.n_nodes}\n<NUMBER OF NODES> {net.n_nodes}\n")
    out.write(f"<FIRST THRU NODE> 1\n<NUMBER OF LINKS> {net.n_edges}\n<END OF METADATA>\n\n\n")
    out.write("~\t" + "\t".join(_STANDARD_LINK_COLUMNS) + "\t;\n")
    for u, v, a in net.edges:
        out.write(f"\t{u}\t{v}\t{a.capacity!r}\t{a.free_flow_time!r}\t{a.free_flow_time!r}"
                  f"\t{a.b!r}\t{a.p!r}\t0\t0\t1\t;\n")
    net_text = out.getvalue()

    out = io.StringIO()
    trips = trips if trips is not None else TripTable()
    out.write(f"<NUMBER OF ZONES> {net.n_nodes}\n")
    out.write(f"<TOTAL OD FLOW> {trips.total_demand!r}\n<END OF METADATA>\n\n\n")
    by_origin: dict[int, list[tuple[int, float]]] = {}
    for o, d, s in trips:
        by_origin.setdefault(o, []).append((d, s))
    for o in sorted(by_origin):
        out.write(f"Origin \t{o}\n")
        for d, s in by_origin[o]:
            out.write(f"    {d} : {s!r};\n")
        out.write("\n")
    return net_text, out.getvalue()


def sioux_falls() -> tuple[RoadNetwork, TripTable]:
    """The bundled Sioux Falls, SD network and trip table (TNTP reference data)."""
    data = resources.files("fdigame") / "data"
    return load_tntp((data / "SiouxFalls_net.tntp").read_text(),
                     (data / "SiouxFalls_trips.tntp").read_text())


# --------------------------------------------------------------------------- GRE

def _strongly_connected(n: int, tail: Iterable[int], head: Iterable[int]) -> bool:
    fwd = [[] for _ in range(n)]
    rev = [[] for _ in range(n)]
    for u, v in zip(tail, head):
        fwd[u].append(v)
        rev[v].append(u)

    def reach(adj):
        seen = {0}
        stack = [0]
        while stack:
            for w in adj[stack.pop()]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return len(seen)

    return reach(fwd) == n and reach(rev) == n


def generate_gre(params: GreParams, attribute_source: RoadNetwork, max_tries: int = 100) -> RoadNetwork:
    """Grid model with random edges.

    Grid neighbours (both directions) are kept with probability ``p``. Every
    ordered non-adjacent pair at Manhattan distance ``m`` gets a shortcut with
    probability ``q * 2**(1 - m)``; the number of shortcuts is capped at the
    number of kept grid edges. Edge attributes are whole tuples resampled from
    ``attribute_source``; a shortcut's free-flow time is multiplied by ``m``.
    Draws repeat until the graph is strongly connected.
    """
    if attribute_source.n_edges == 0:
        raise ValueError("attribute_source has no edges")
    rows, cols = params.rows, params.cols
    n = rows * cols
    coords = [(i // cols, i % cols) for i in range(n)]
    pairs = [(u, v) for u in range(n) for v in range(n) if u != v]
    dist = {(u, v): abs(coords[u][0] - coords[v][0]) + abs(coords[u][1] - coords[v][1]) for u, v in pairs}
    grid_pairs = [pr for pr in pairs if dist[pr] == 1]
    far_pairs = [pr for pr in pairs if dist[pr] > 1]
    far_prob = np.array([params.q * 2.0 ** (1 - dist[pr]) for pr in far_pairs])

    rng = np.random.default_rng(params.seed)
    source = [a for *_, a in attribute_source.edges]
    for _ in range(max_tries):
        keep_grid = rng.random(len(grid_pairs)) < params.p
        kept = [pr for pr, k in zip(grid_pairs, keep_grid) if k]
        keep_far = rng.random(len(far_pairs)) < far_prob
        shortcuts = [pr for pr, k in zip(far_pairs, keep_far) if k]
        if len(shortcuts) > len(kept):
            order = rng.permutation(len(shortcuts))[: len(kept)]
            shortcuts = [shortcuts[i] for i in sorted(order)]
        chosen = sorted(kept + shortcuts)
        draws = rng.integers(0, len(source), size=len(chosen))
        if not chosen or not _strongly_connected(n, [u for u, _ in chosen], [v for _, v in chosen]):
            continue
        edges = []
        for (u, v), k in zip(chosen, draws):
            a = source[k]
            m = dist[(u, v)]
            if m > 1:
                a = EdgeAttr(a.free_flow_time * m, a.capacity, a.b, a.p)
            edges.append((u + 1, v + 1, a))
        return RoadNetwork(tuple(range(1, n + 1)), tuple(edges))
    raise RuntimeError(f"no strongly connected GRE draw in {max_tries} tries for {params}")


def generate_trips(net: RoadNetwork, demand_source: TripTable, rng: np.random.Generator,
                   scale: float = 1.0) -> TripTable:
    """One trip per ordered node pair, demands resampled from ``demand_source``."""
    pool = demand_source.demands
    if pool.size == 0:
        raise ValueError("demand_source has no trips")
    pairs = [(u, v) for u in net.nodes for v in net.nodes if u != v]
    draws = pool[rng.integers(0, pool.size, size=len(pairs))] * scale
    return TripTable(tuple((u, v, float(s)) for (u, v), s in zip(pairs, draws)))


def rescale_units(net: RoadNetwork, trips: TripTable, unit: float) -> tuple[RoadNetwork, TripTable]:
    """Express capacities and demands in units of ``unit`` vehicles.

    Dividing both by the same factor leaves every occupancy/capacity ratio and
    hence every BPR travel time unchanged.
    """
    edges = tuple((u, v, EdgeAttr(a.free_flow_time, a.capacity / unit, a.b, a.p)) for u, v, a in net.edges)
    return (RoadNetwork(net.nodes, edges),
            TripTable(tuple((o, d, s / unit) for o, d, s in trips)))


def randomize_demands(trips: TripTable, pct: float = 0.05, rng: np.random.Generator | None = None) -> TripTable:
    """Jitter each demand by a uniform relative amount in [-pct%, +pct%]."""
    if pct < 0:
        raise ValueError("pct must be nonnegative")
    if pct == 0 or len(trips) == 0:
        return trips
    rng = rng if rng is not None else np.random.default_rng()
    delta = rng.uniform(-pct / 100.0, pct / 100.0, size=len(trips))
    return TripTable(tuple((o, d, s * (1.0 + x)) for (o, d, s), x in zip(trips, delta)))


def validate_network(net: RoadNetwork, trips: TripTable) -> list[str]:
    """Human-readable list of problems; empty when the scenario is usable."""
    problems = []
    for e, (u, v, a) in enumerate(net.edges):
        if not (a.free_flow_time > 0 and a.capacity > 0 and a.b >= 0 and a.p >= 0):
            problems.append(f"edge {e} ({u}->{v}) has invalid attributes {a}")
    for i, node in enumerate(net.nodes):
        if not net.out_edges[i] and not net.in_edges[i]:
            problems.append(f"node {node} is dangling (no incident edges)")
    reach_cache: dict[int, set[int]] = {}
    for r, (o, d, s) in enumerate(trips):
        if o not in net.index or d not in net.index:
            problems.append(f"trip {r} ({o}->{d}) references an unknown node")
            continue
        if o == d:
            problems.append(f"trip {r} has origin == destination ({o})")
            continue
        if not s > 0:
            problems.append(f"trip {r} ({o}->{d}) has nonpositive demand {s}")
        if o not in reach_cache:
            seen = {net.index[o]}
            stack = [net.index[o]]
            while stack:
                x = stack.pop()
                for e in net.out_edges[x]:
                    h = int(net.head[e])
                    if h not in seen:
                        seen.add(h)
                        stack.append(h)
            reach_cache[o] = seen
        if net.index[d] not in reach_cache[o]:
            problems.append(f"trip {r}: destination {d} unreachable from origin {o}")
    return problems


# --------------------------------------------------------------------------- scenario files

@dataclass(frozen=True)
class Scenario:
    """A network, its trips and the environment settings an experiment runs with."""

    net: RoadNetwork
    trips: TripTable
    horizon: int = 50
    theta: float = 1.0
    false_alarm_cost: float = 1.0
    history: int = 5
    demand_jitter_pct: float = 0.05
    name: str = "scenario"
    gre: GreParams | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def to_json(self) -> str:
        doc = {
            "format": "fdigame-scenario/1",
            "name": self.name,
            "nodes": list(self.net.nodes),
            "edges": [
                {"tail": u, "head": v, "free_flow_time": a.free_flow_time,
                 "capacity": a.capacity, "b": a.b, "p": a.p}
                for u, v, a in self.net.edges
            ],
            "trips": [{"origin": o, "destination": d, "demand": s} for o, d, s in self.trips],
            "horizon": self.horizon,
            "theta": self.theta,
            "false_alarm_cost": self.false_alarm_cost,
            "history": self.history,
            "demand_jitter_pct": self.demand_jitter_pct,
            "gre": None if self.gre is None else {
                "rows": self.gre.rows, "cols": self.gre.cols, "p": self.gre.p,
                "q": self.gre.q, "seed": self.gre.seed},
            "meta": self.meta,
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        doc = json.loads(text)
        if doc.get("format") != "fdigame-scenario/1":
            raise ValueError(f"unsupported scenario format {doc.get('format')!r}")
        net = RoadNetwork(
            tuple(doc["nodes"]),
            tuple((e["tail"], e["head"], EdgeAttr(e["free_flow_time"], e["capacity"], e["b"], e["p"]))
                  for e in doc["edges"]),
        )
        trips = TripTable(tuple((t["origin"], t["destination"], t["demand"]) for t in doc["trips"]))
        gre = GreParams(**doc["gre"]) if doc.get("gre") else None
        return cls(net, trips, horizon=doc["horizon"], theta=doc["theta"],
                   false_alarm_cost=doc["false_alarm_cost"], history=doc["history"],
                   demand_jitter_pct=doc["demand_jitter_pct"], name=doc.get("name", "scenario"),
                   gre=gre, meta=doc.get("meta", {}))


def gre_scenario(params: GreParams, attribute_source: tuple[RoadNetwork, TripTable] | None = None,
                 demand_scale: float = 2.0, unit: float = 1000.0, name: str | None = None,
                 **settings) -> Scenario:
    """GRE network with all-pairs trips, demands and capacities expressed in ``unit`` vehicles.

    Attributes and demands are resampled from ``attribute_source`` (Sioux Falls
    by default); the trip-table seed is derived from the GRE seed.
    """
    src_net, src_trips = attribute_source if attribute_source is not None else sioux_falls()
    net = generate_gre(params, src_net)
    trips = generate_trips(net, src_trips, np.random.default_rng([params.seed, 1]), scale=demand_scale)
    net, trips = rescale_units(net, trips, unit)
    meta = {"demand_scale": demand_scale, "unit": unit}
    return Scenario(net, trips, name=name or f"gre-{params.rows}x{params.cols}-s{params.seed}",
                    gre=params, meta=meta, **settings)
