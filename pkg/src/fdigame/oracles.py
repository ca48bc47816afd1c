"""Attack/defense POMDP wrappers and RL best-response training."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import rl
from .network import RoadNetwork, Scenario, TripTable, randomize_demands
from .sim import (SimState, StepMetrics, all_pairs_costs, apply_perturbation, current_travel_times,
                  step, _layout)

ATTACKER_KINDS = ("learned-attacker", "rule-attacker", "no-attack")
DEFENDER_KINDS = ("learned-defender", "rule-defender", "no-defense")
U_CLAMP = 8.0
A_MAX_FACTOR = 10.0
FEATURES_PER_EDGE = 7


# --------------------------------------------------------------------------- observations

def next_edge_table(net: RoadNetwork, w: np.ndarray) -> np.ndarray:
    """``T[u, d]`` = first edge of a shortest u->d path under weights ``w`` (-1 if none)."""
    lay = _layout(net)
    D = all_pairs_costs(net, w)
    c = w[np.maximum(lay.out, 0)][:, :, None] + D[lay.heads][:, :, :]
    c = np.where(lay.valid[:, :, None], c, np.inf)
    best = np.argmin(c, axis=1)
    table = np.take_along_axis(lay.out[:, :, None].repeat(net.n_nodes, 2), best[:, None, :], 1)[:, 0, :]
    reachable = np.isfinite(np.min(c, axis=1))
    return np.where(reachable, table, -1)


def _path_edges(net: RoadNetwork, table: np.ndarray, u: int, d: int) -> list[int]:
    path = []
    while u != d:
        e = int(table[u, d])
        if e < 0 or len(path) > net.n_nodes:
            break
        path.append(e)
        u = int(net.head[e])
    return path


def attacker_observe(state: SimState, net: RoadNetwork, trips: TripTable | None = None,
                     w: np.ndarray | None = None) -> np.ndarray:
    """Per-edge features <s, s_hat, m, s_tilde, n, c, f>, flattened in edge order.

    Shortest paths use the true (unperturbed) travel times.
    """
    E = net.n_edges
    if w is None:
        w = current_travel_times(state, net)
    s = np.zeros(E)
    s_hat = np.zeros(E)
    s_tilde = np.zeros(E)
    finished = state.finished
    at_node = (state.node >= 0) & ~finished
    on_edge = state.edge >= 0
    if at_node.any() or on_edge.any():
        table = next_edge_table(net, w)
        for r in np.flatnonzero(at_node):
            path = _path_edges(net, table, int(state.node[r]), int(state.dest[r]))
            if path:
                s[path] += state.weight[r]
                s_hat[path[0]] += state.weight[r]
        for r in np.flatnonzero(on_edge):
            path = _path_edges(net, table, int(net.head[state.edge[r]]), int(state.dest[r]))
            if path:
                s_tilde[path] += state.weight[r]
    m = np.bincount(state.edge[on_edge], minlength=E).astype(float)
    n = np.bincount(state.edge[on_edge], weights=state.weight[on_edge], minlength=E).astype(float)
    feats = np.stack([s, s_hat, m, s_tilde, n, net.capacity, net.free_flow], axis=1)
    return feats.reshape(-1)


def defender_observe(history: Sequence[StepMetrics | np.ndarray], H: int, n_edges: int | None = None) -> np.ndarray:
    """Last ``H`` observed travel-time vectors, oldest first, zero-padded at episode start."""
    if H < 1:
        raise ValueError("history size must be >= 1")
    vecs = [m.observed_times if isinstance(m, StepMetrics) else np.asarray(m, dtype=float)
            for m in history[-H:]]
    if n_edges is None:
        if not vecs:
            raise ValueError("n_edges is required for an empty history")
        n_edges = vecs[0].size
    pad = [np.zeros(n_edges)] * (H - len(vecs))
    return np.concatenate(pad + vecs) if (pad or vecs) else np.zeros(0)


def attacker_reward(metrics: StepMetrics) -> float:
    return float(metrics.traveling_weight)


def defender_reward(metrics: StepMetrics, false_alarm_cost: float = 1.0) -> float:
    if false_alarm_cost < 0:
        raise ValueError("false_alarm_cost must be nonnegative")
    return -float(metrics.traveling_weight) - (false_alarm_cost if metrics.false_alarm else 0.0)


def perturbation_from_gaussian(u: np.ndarray, a_max: float = math.inf) -> np.ndarray:
    """exp(u) shifted so the lower clamp maps to 0: always >= 0, exactly 0 at the floor."""
    u = np.clip(np.asarray(u, dtype=float), -U_CLAMP, U_CLAMP)
    return np.minimum(np.exp(u) - math.exp(-U_CLAMP), a_max)


# --------------------------------------------------------------------------- policies

def attacker_obs_scale(net: RoadNetwork, trips: TripTable) -> np.ndarray:
    total = max(trips.total_demand, 1e-12)
    return np.array([1 / total, 1 / total, 1 / max(len(trips), 1), 1 / total, 1 / total,
                     1 / float(net.capacity.max()), 1 / float(net.free_flow.max())])


@dataclass
class PolicyHandle:
    """One pure strategy: a learned network, a fixed rule or a null policy.

    ``model`` holds the parameter dict for learned kinds and the rule object
    (anything with ``episode(net, trips, rng)``) for rule kinds.
    """

    kind: str
    label: str
    model: Any = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ATTACKER_KINDS + DEFENDER_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")

    @property
    def player(self) -> str:
        return "attacker" if self.kind in ATTACKER_KINDS else "defender"

    def episode(self, net: RoadNetwork, trips: TripTable, rng: np.random.Generator):
        if self.kind == "no-attack":
            return lambda state: None
        if self.kind == "no-defense":
            return lambda history: False
        if self.kind.startswith("rule"):
            return self.model.episode(net, trips, rng)
        if self.kind == "learned-attacker":
            scale = np.tile(np.asarray(self.meta["obs_scale"]), net.n_edges)
            a_max = self.meta["a_max"]
            params = self.model

            def act(state):
                obs = attacker_observe(state, net, trips) * scale
                return attacker_act(self, obs, rng, params=params, a_max=a_max)

            return act
        H = int(self.meta["history"])
        scale = float(self.meta["obs_scale"])
        params = self.model

        def alarm(history):
            obs = defender_observe(history, H, net.n_edges) * scale
            dist, _ = rl.policy_value_forward(params, obs)
            return bool(rl.sample_action(dist, rng) > 0.5)

        return alarm


def attacker_act(policy: PolicyHandle, obs: np.ndarray, rng: np.random.Generator,
                 params=None, a_max: float | None = None) -> np.ndarray:
    """Perturbation vector for an attacker policy given a (scaled) observation."""
    if policy.kind not in ATTACKER_KINDS:
        raise ValueError(f"{policy.label} ({policy.kind}) is not an attacker")
    n_edges = len(obs) // FEATURES_PER_EDGE
    if policy.kind == "no-attack":
        return np.zeros(n_edges)
    if policy.kind != "learned-attacker":
        raise ValueError("rule attackers act on the simulator state, not on observations")
    params = policy.model if params is None else params
    a_max = policy.meta.get("a_max", math.inf) if a_max is None else a_max
    dist, _ = rl.policy_value_forward(params, obs)
    return perturbation_from_gaussian(rl.sample_action(dist, rng), a_max)


NO_ATTACK = PolicyHandle("no-attack", "No Attack")
NO_DEFENSE = PolicyHandle("no-defense", "No Defense")


@dataclass
class MixedStrategy:
    support: list[tuple[PolicyHandle, float]]

    def __post_init__(self):
        probs = np.array([p for _, p in self.support], dtype=float)
        if len(self.support) == 0:
            raise ValueError("empty mixed strategy")
        if np.any(probs < -1e-12) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"mixture probabilities must be >= 0 and sum to 1, got {probs}")

    @classmethod
    def pure(cls, handle: PolicyHandle) -> "MixedStrategy":
        return cls([(handle, 1.0)])

    @property
    def handles(self) -> list[PolicyHandle]:
        return [h for h, _ in self.support]

    @property
    def probs(self) -> np.ndarray:
        p = np.clip(np.array([p for _, p in self.support], dtype=float), 0, None)
        return p / p.sum()

    def sample(self, rng: np.random.Generator) -> PolicyHandle:
        return self.support[int(rng.choice(len(self.support), p=self.probs))][0]


def with_min_no_attack(mix: MixedStrategy, share: float = 0.2) -> MixedStrategy:
    """Mixture with at least ``share`` of its mass on No Attack."""
    mass = sum(p for h, p in mix.support if h.kind == "no-attack")
    if mass >= share:
        return mix
    rest = [(h, p) for h, p in mix.support if h.kind != "no-attack"]
    tot = sum(p for _, p in rest)
    support = [(NO_ATTACK, share)] + [(h, (1 - share) * p / tot) for h, p in rest]
    return MixedStrategy(support)


# --------------------------------------------------------------------------- environments

class _Episode:
    """One simulator episode with a fixed opponent, stepped from outside."""

    def __init__(self, scenario: Scenario, opponent: PolicyHandle, rng: np.random.Generator):
        seq = np.random.SeedSequence(int(rng.integers(0, 2**63 - 1)))
        s_demand, s_sim, s_opp = seq.spawn(3)
        self.net = scenario.net
        self.trips = randomize_demands(scenario.trips, scenario.demand_jitter_pct, np.random.default_rng(s_demand))
        self.state = SimState.initial(self.net, self.trips, np.random.default_rng(s_sim))
        self.opponent = opponent.episode(self.net, self.trips, np.random.default_rng(s_opp))
        self.history: list[np.ndarray] = []
        self.scenario = scenario

    def done(self) -> bool:
        return self.state.t >= self.scenario.horizon or bool(self.state.finished.all())

    @property
    def truncated(self) -> bool:
        return self.state.t >= self.scenario.horizon and not bool(self.state.finished.all())


class AttackerEnv(rl.VecEnv):
    """Batch of attack POMDPs against defenders drawn per episode from a mixture."""

    def __init__(self, scenario: Scenario, opponent: MixedStrategy, n_envs: int, rng: np.random.Generator):
        self.scenario, self.opponent, self.n_envs, self.rng = scenario, opponent, n_envs, rng
        net = scenario.net
        self.obs_dim = FEATURES_PER_EDGE * net.n_edges
        self.act_dim = net.n_edges
        self.scale = np.tile(attacker_obs_scale(net, scenario.trips), net.n_edges)
        self.reward_scale = 1.0 / scenario.trips.total_demand
        self.a_max = A_MAX_FACTOR * float(net.free_flow.max())
        self.envs: list[_Episode] = []

    def _new(self) -> _Episode:
        return _Episode(self.scenario, self.opponent.sample(self.rng), self.rng)

    def _obs(self, ep: _Episode) -> np.ndarray:
        return attacker_observe(ep.state, ep.net, ep.trips) * self.scale

    def reset(self):
        self.envs = [self._new() for _ in range(self.n_envs)]
        return np.stack([self._obs(ep) for ep in self.envs])

    def step(self, actions):
        obs = np.zeros((self.n_envs, self.obs_dim))
        rewards = np.zeros(self.n_envs)
        dones = np.zeros(self.n_envs, dtype=bool)
        truncated = np.zeros(self.n_envs, dtype=bool)
        final = np.zeros((self.n_envs, self.obs_dim))
        for i, ep in enumerate(self.envs):
            w = current_travel_times(ep.state, ep.net)
            a = None if ep.state.detected else perturbation_from_gaussian(actions[i], self.a_max)
            observed = w if a is None else apply_perturbation(w, a)
            ep.history.append(observed)
            alarm = False if ep.state.detected else bool(ep.opponent(ep.history))
            ep.state, m = step(ep.state, ep.net, ep.trips, a, alarm, self.scenario.theta, w=w)
            rewards[i] = attacker_reward(m) * self.reward_scale
            if ep.done():
                dones[i] = True
                truncated[i] = ep.truncated
                final[i] = self._obs(ep)
                ep = self.envs[i] = self._new()
            obs[i] = self._obs(ep)
        return obs, rewards, dones, truncated, final


class DefenderEnv(rl.VecEnv):
    """Batch of detection POMDPs against attackers drawn per episode from a mixture."""

    def __init__(self, scenario: Scenario, opponent: MixedStrategy, n_envs: int, rng: np.random.Generator):
        self.scenario, self.opponent, self.n_envs, self.rng = scenario, opponent, n_envs, rng
        net = scenario.net
        self.H = scenario.history
        self.obs_dim = self.H * net.n_edges
        self.act_dim = 1
        self.scale = 1.0 / float(net.free_flow.max())
        self.reward_scale = 1.0 / scenario.trips.total_demand
        self.envs: list[_Episode] = []
        self.pending: list[tuple[np.ndarray, np.ndarray | None]] = []

    def _prepare(self, ep: _Episode):
        """Compute this step's travel times and the attacker's move; return the observation."""
        w = current_travel_times(ep.state, ep.net)
        a = None if ep.state.detected else ep.opponent(ep.state)
        a = None if a is None else np.asarray(a, dtype=float)
        ep.history.append(w if a is None else apply_perturbation(w, a))
        return (w, a), defender_observe(ep.history, self.H, ep.net.n_edges) * self.scale

    def _new(self):
        ep = _Episode(self.scenario, self.opponent.sample(self.rng), self.rng)
        pend, obs = self._prepare(ep)
        return ep, pend, obs

    def reset(self):
        self.envs, self.pending, obs = [], [], []
        for _ in range(self.n_envs):
            ep, pend, o = self._new()
            self.envs.append(ep)
            self.pending.append(pend)
            obs.append(o)
        return np.stack(obs)

    def step(self, actions):
        actions = np.asarray(actions).reshape(self.n_envs)
        obs = np.zeros((self.n_envs, self.obs_dim))
        rewards = np.zeros(self.n_envs)
        dones = np.zeros(self.n_envs, dtype=bool)
        truncated = np.zeros(self.n_envs, dtype=bool)
        final = np.zeros((self.n_envs, self.obs_dim))
        for i, ep in enumerate(self.envs):
            w, a = self.pending[i]
            alarm = bool(actions[i] > 0.5) and not ep.state.detected
            ep.state, m = step(ep.state, ep.net, ep.trips, a, alarm, self.scenario.theta, w=w)
            rewards[i] = defender_reward(m, self.scenario.false_alarm_cost) * self.reward_scale
            if ep.done():
                dones[i] = True
                truncated[i] = ep.truncated
                ep.history.append(current_travel_times(ep.state, ep.net))
                final[i] = defender_observe(ep.history, self.H, ep.net.n_edges) * self.scale
                self.envs[i], self.pending[i], obs[i] = self._new()
            else:
                self.pending[i], obs[i] = self._prepare(ep)
        return obs, rewards, dones, truncated, final


# --------------------------------------------------------------------------- training

def new_learned_policy(player: str, scenario: Scenario, rng: np.random.Generator, label: str,
                       hidden: tuple[int, ...] = (64, 64)) -> PolicyHandle:
    net = scenario.net
    if player == "attacker":
        params = rl.init_params(FEATURES_PER_EDGE * net.n_edges, net.n_edges, "gaussian", rng, hidden)
        meta = {"obs_scale": attacker_obs_scale(net, scenario.trips).tolist(),
                "a_max": A_MAX_FACTOR * float(net.free_flow.max())}
        kind = "learned-attacker"
    elif player == "defender":
        params = rl.init_params(scenario.history * net.n_edges, 1, "bernoulli", rng, hidden)
        meta = {"obs_scale": 1.0 / float(net.free_flow.max()), "history": scenario.history}
        kind = "learned-defender"
    else:
        raise ValueError(f"player must be 'attacker' or 'defender', got {player!r}")
    meta.update(n_edges=net.n_edges, network=net.fingerprint(), hidden=list(hidden))
    return PolicyHandle(kind, label, params, meta)


def train_best_response(player: str, opponent: MixedStrategy, scenario: Scenario, hyper: rl.PpoHyper,
                        rng: np.random.Generator, label: str | None = None,
                        min_no_attack_share: float = 0.2, callback=None) -> PolicyHandle:
    """PPO best response of ``player`` to an opponent mixture (one opponent draw per episode)."""
    if opponent is None or not opponent.support:
        raise ValueError("opponent mixture is empty")
    expected = DEFENDER_KINDS if player == "attacker" else ATTACKER_KINDS
    if any(h.kind not in expected for h in opponent.handles):
        raise ValueError(f"opponent mixture for the {player} must contain only {expected}")
    label = label or f"RL {player}"
    handle = new_learned_policy(player, scenario, rng, label)
    if player == "defender" and min_no_attack_share > 0:
        opponent = with_min_no_attack(opponent, min_no_attack_share)
    env_cls = AttackerEnv if player == "attacker" else DefenderEnv
    env = env_cls(scenario, opponent, hyper.n_envs, rng)
    params, log = rl.ppo_train(handle.model, env, hyper, rng, callback=callback)
    handle.model = params
    handle.meta["training"] = {"timesteps": hyper.total_timesteps, "log": log}
    return handle


# --------------------------------------------------------------------------- persistence

def save_policy(handle: PolicyHandle, path: str | Path) -> None:
    path = Path(path)
    if handle.kind.startswith("learned"):
        meta = {k: v for k, v in handle.meta.items() if k != "training"}
        if "training" in handle.meta:
            meta["training_log"] = handle.meta["training"]["log"]
        with open(path, "wb") as fh:
            rl.save_checkpoint(fh, handle.model, {"kind": handle.kind, "label": handle.label, "meta": meta})
    elif handle.kind.startswith("rule"):
        handle.model.save(path, handle.label)
    else:
        path.write_text(json.dumps({"version": 1, "kind": handle.kind, "label": handle.label}))


def load_policy(path: str | Path) -> PolicyHandle:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing policy checkpoint {path}")
    head = path.read_bytes()[:2]
    if head == b"PK":
        try:
            params, rec = rl.load_checkpoint(path)
        except KeyError:
            from .baselines import load_rule
            return load_rule(path)
        return PolicyHandle(rec["kind"], rec["label"], params, rec["meta"])
    doc = json.loads(path.read_text())
    if doc["kind"] in ("no-attack", "no-defense"):
        return NO_ATTACK if doc["kind"] == "no-attack" else NO_DEFENSE
    from .baselines import load_rule
    return load_rule(path)
