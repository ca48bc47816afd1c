"""Discrete-time traffic dynamics with perturbed travel-time observations.

Each trip is one weighted agent: it sits at a node or on an edge with a number
of steps remaining. At a node it picks the next edge with a Boltzmann choice
over cost-to-go computed from the *observed* travel times; the time it then
spends on the edge comes from the *true* travel time.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Sequence, TextIO

import numpy as np

from .network import EdgeAttr, RoadNetwork, TripTable

ACTIVE_EPS = 1e-3


class AtNode(NamedTuple):
    node: int


class OnEdge(NamedTuple):
    edge: int
    remaining: int


def bpr_travel_time(attr: EdgeAttr, n: float) -> float:
    if n < 0:
        raise ValueError("occupancy must be nonnegative")
    return attr.free_flow_time * (1.0 + attr.b * (n / attr.capacity) ** attr.p)


def bpr_times(net: RoadNetwork, occupancy: np.ndarray) -> np.ndarray:
    return net.free_flow * (1.0 + net.bpr_b * (occupancy / net.capacity) ** net.bpr_p)


@dataclass(frozen=True)
class SimState:
    """Trip locations plus attack/detection bookkeeping.

    ``node[r]`` is the node index of trip r or -1 while it is on an edge;
    ``edge[r]``/``remaining[r]`` describe the on-edge position otherwise.
    """

    t: int
    node: np.ndarray
    edge: np.ndarray
    remaining: np.ndarray
    dest: np.ndarray
    weight: np.ndarray
    rng: np.random.Generator = field(compare=False)
    detected: bool = False
    false_alarms: int = 0

    @classmethod
    def initial(cls, net: RoadNetwork, trips: TripTable, rng: np.random.Generator) -> "SimState":
        n = len(trips)
        return cls(
            t=0,
            node=np.array([net.index[o] for o, _, _ in trips], dtype=np.int64).reshape(n),
            edge=np.full(n, -1, dtype=np.int64),
            remaining=np.zeros(n, dtype=np.int64),
            dest=np.array([net.index[d] for _, d, _ in trips], dtype=np.int64).reshape(n),
            weight=np.array([s for _, _, s in trips], dtype=float).reshape(n),
            rng=rng,
        )

    def location(self, r: int) -> AtNode | OnEdge:
        if self.node[r] >= 0:
            return AtNode(int(self.node[r]))
        return OnEdge(int(self.edge[r]), int(self.remaining[r]))

    @property
    def finished(self) -> np.ndarray:
        return self.node == self.dest

    @property
    def traveling_weight(self) -> float:
        return float(self.weight[~self.finished].sum())


@dataclass
class StepMetrics:
    t: int
    traveling_weight: float
    true_times: np.ndarray
    observed_times: np.ndarray
    perturbation: np.ndarray
    attack_active: bool
    alarm: bool
    false_alarm: bool
    detected: bool


@dataclass
class EpisodeResult:
    total_travel_time: float
    false_alarm_count: int
    detection_step: int | None
    per_step: list[StepMetrics]

    def cost(self, false_alarm_cost: float) -> float:
        return self.total_travel_time + false_alarm_cost * self.false_alarm_count


def occupancy(state: SimState, net: RoadNetwork) -> np.ndarray:
    on = state.edge >= 0
    return np.bincount(state.edge[on], weights=state.weight[on], minlength=net.n_edges).astype(float)


def current_travel_times(state: SimState, net: RoadNetwork) -> np.ndarray:
    return bpr_times(net, occupancy(state, net))


def apply_perturbation(w: np.ndarray, a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if np.any(a < 0):
        raise ValueError("perturbations must be nonnegative")
    return np.asarray(w, dtype=float) + a


def shortest_path_costs(net: RoadNetwork, weights: np.ndarray, dest: int) -> np.ndarray:
    """Cost from every node to ``dest`` (a node id): Dijkstra on the reversed graph.

    Returns a vector indexed like ``net.nodes``; unreachable nodes get ``inf``.
    """
    target = net.index[dest]
    dist = np.full(net.n_nodes, np.inf)
    dist[target] = 0.0
    heap = [(0.0, target)]
    while heap:
        d, v = heapq.heappop(heap)
        if d > dist[v]:
            continue
        for e in net.in_edges[v]:
            u = int(net.tail[e])
            nd = d + weights[e]
            if nd < dist[u]:
                dist[u] = nd
                heapq.heappush(heap, (nd, u))
    return dist


def all_pairs_costs(net: RoadNetwork, weights: np.ndarray) -> np.ndarray:
    """``D[u, v]`` = shortest u->v cost, by Floyd-Warshall on a dense matrix."""
    n = net.n_nodes
    D = np.full((n, n), np.inf)
    D[net.tail, net.head] = weights
    np.fill_diagonal(D, 0.0)
    for k in range(n):
        np.minimum(D, D[:, k:k + 1] + D[k:k + 1, :], out=D)
    return D


def _boltzmann(costs: np.ndarray, theta: float) -> np.ndarray:
    """Rows of costs (inf = unavailable) to probabilities; all-inf rows give zeros."""
    finite = np.isfinite(costs)
    safe = np.where(finite, costs, 0.0)
    cmin = np.where(finite, safe, np.inf).min(axis=-1, keepdims=True)
    cmin = np.where(np.isfinite(cmin), cmin, 0.0)
    z = np.where(finite, np.exp(-theta * (safe - cmin)), 0.0)
    tot = z.sum(axis=-1, keepdims=True)
    return np.divide(z, tot, out=np.zeros_like(z), where=tot > 0)


def route_choice_distribution(net: RoadNetwork, observed: np.ndarray, at: int, dest: int,
                              theta: float, costs: np.ndarray | None = None) -> np.ndarray:
    """Choice probabilities over ``net.adjacency[at]`` for a trip heading to ``dest``.

    ``at`` and ``dest`` are node ids. Returns an empty array when no neighbour
    can reach the destination.
    """
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    out = net.adjacency[at]
    if not out:
        raise ValueError(f"node {at} has no outgoing edges")
    if costs is None:
        costs = shortest_path_costs(net, observed, dest)
    c = np.array([observed[e] + costs[net.head[e]] for e in out])
    if not np.isfinite(c).any():
        return np.zeros(0)
    return _boltzmann(c, theta)


class _Layout:
    """Padded outgoing-edge table used for vectorised route sampling."""

    def __init__(self, net: RoadNetwork):
        deg = max((len(o) for o in net.out_edges), default=0)
        self.out = np.full((net.n_nodes, max(deg, 1)), -1, dtype=np.int64)
        for i, es in enumerate(net.out_edges):
            self.out[i, : len(es)] = es
        self.valid = self.out >= 0
        self.heads = np.where(self.valid, net.head[np.maximum(self.out, 0)], 0)


_LAYOUTS: dict[int, tuple[RoadNetwork, _Layout]] = {}


def _layout(net: RoadNetwork) -> _Layout:
    hit = _LAYOUTS.get(id(net))
    if hit is None or hit[0] is not net:
        if len(_LAYOUTS) > 64:
            _LAYOUTS.clear()
        hit = (net, _Layout(net))
        _LAYOUTS[id(net)] = hit
    return hit[1]


def dwell_steps(w: np.ndarray) -> np.ndarray:
    """Steps spent on an edge: round half to even, at least one."""
    return np.maximum(np.rint(w), 1).astype(np.int64)


def step(state: SimState, net: RoadNetwork, trips: TripTable | None, a: np.ndarray | None,
         alarm: bool, theta: float, w: np.ndarray | None = None) -> tuple[SimState, StepMetrics]:
    """Advance one time step.

    A true-positive alarm switches detection on before vehicles move, so the
    routing decisions of this step already see unperturbed travel times.
    """
    if w is None:
        w = current_travel_times(state, net)
    a = np.zeros(net.n_edges) if a is None else np.asarray(a, dtype=float)
    if np.any(a < 0):
        raise ValueError("perturbations must be nonnegative")
    if state.detected:
        a = np.zeros(net.n_edges)
    attack_active = (not state.detected) and a.size > 0 and float(a.max()) > ACTIVE_EPS
    observed = apply_perturbation(w, a)

    detected = state.detected
    false_alarms = state.false_alarms
    false_alarm = False
    if alarm and not detected:
        if attack_active:
            detected = True
        else:
            false_alarms += 1
            false_alarm = True
    routing = w if detected else observed

    finished = state.finished
    traveling = float(state.weight[~finished].sum())
    node = state.node.copy()
    edge = state.edge.copy()
    remaining = state.remaining.copy()

    on = edge >= 0
    arriving = on & (remaining <= 1)
    remaining[on & ~arriving] -= 1

    movers = np.flatnonzero((node >= 0) & ~finished)
    if movers.size:
        lay = _layout(net)
        D = all_pairs_costs(net, routing)
        cand = lay.out[node[movers]]
        ok = lay.valid[node[movers]]
        c = routing[np.maximum(cand, 0)] + D[lay.heads[node[movers]], state.dest[movers][:, None]]
        c = np.where(ok, c, np.inf)
        probs = _boltzmann(c, theta)
        u = state.rng.random(movers.size)
        cum = np.cumsum(probs, axis=1)
        tot = cum[:, -1]
        pick = (cum <= (u * tot)[:, None]).sum(axis=1)
        pick = np.minimum(pick, ok.sum(axis=1) - 1)
        go = tot > 0
        chosen = cand[np.arange(movers.size), np.maximum(pick, 0)]
        r = movers[go]
        e = chosen[go]
        node[r] = -1
        edge[r] = e
        remaining[r] = dwell_steps(w[e])

    if arriving.any():
        idx = np.flatnonzero(arriving)
        node[idx] = net.head[edge[idx]]
        edge[idx] = -1
        remaining[idx] = 0

    new = replace(state, t=state.t + 1, node=node, edge=edge, remaining=remaining,
                  detected=detected, false_alarms=false_alarms)
    metrics = StepMetrics(
        t=state.t, traveling_weight=traveling, true_times=w, observed_times=observed,
        perturbation=a, attack_active=attack_active, alarm=bool(alarm),
        false_alarm=false_alarm, detected=detected,
    )
    return new, metrics


def _no_attack(state):
    return None


def _no_defense(history):
    return False


def run_episode(net: RoadNetwork, trips: TripTable, attacker=None, defender=None, horizon: int = 50,
                theta: float = 1.0, rng: np.random.Generator | int | None = None) -> EpisodeResult:
    """Simulate one episode with the given attacker and defender policies.

    Policies expose ``episode(net, trips, rng)`` returning a per-step callable:
    the attacker's maps the current ``SimState`` to a perturbation vector, the
    defender's maps the list of observed travel-time vectors so far (current
    step last) to an alarm flag. ``None`` stands for no attack / no defense.
    Separate random streams drive the simulator and each policy.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    sim_seq, att_seq, def_seq = np.random.SeedSequence(_entropy(rng)).spawn(3)
    act = attacker.episode(net, trips, np.random.default_rng(att_seq)) if attacker is not None else _no_attack
    det = defender.episode(net, trips, np.random.default_rng(def_seq)) if defender is not None else _no_defense
    state = SimState.initial(net, trips, np.random.default_rng(sim_seq))
    history: list[np.ndarray] = []
    per_step: list[StepMetrics] = []
    detection_step = None
    for _ in range(horizon):
        if state.finished.all():
            break
        w = current_travel_times(state, net)
        a = None if state.detected else act(state)
        if a is not None:
            a = np.asarray(a, dtype=float)
        observed = w if a is None else apply_perturbation(w, a)
        history.append(observed)
        alarm = False if state.detected else bool(det(history))
        state, m = step(state, net, trips, a, alarm, theta, w=w)
        if m.detected and detection_step is None:
            detection_step = m.t
        per_step.append(m)
    return EpisodeResult(
        total_travel_time=float(sum(m.traveling_weight for m in per_step)),
        false_alarm_count=state.false_alarms,
        detection_step=detection_step,
        per_step=per_step,
    )


def _entropy(rng) -> int | Sequence[int] | None:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2**63 - 1))
    return rng


def write_trace(result: EpisodeResult, stream: TextIO) -> None:
    """One JSON object per step."""
    for m in result.per_step:
        stream.write(json.dumps({
            "step": m.t,
            "w": [round(float(x), 10) for x in m.true_times],
            "w_observed": [round(float(x), 10) for x in m.observed_times],
            "a": [round(float(x), 10) for x in m.perturbation],
            "attack_active": m.attack_active,
            "alarm": m.alarm,
            "false_alarm": m.false_alarm,
            "detected": m.detected,
            "traveling_weight": m.traveling_weight,
        }) + "\n")


def read_trace(stream: TextIO) -> list[dict]:
    return [json.loads(line) for line in stream if line.strip()]
