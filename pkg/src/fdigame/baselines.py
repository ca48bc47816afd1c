"""Baseline attacks (greedy, Gaussian cluster) and the Gaussian anomaly detector."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .network import RoadNetwork, TripTable
from .oracles import FEATURES_PER_EDGE, PolicyHandle, attacker_observe, defender_observe
from .sim import EpisodeResult, SimState, all_pairs_costs


# --------------------------------------------------------------------------- greedy

def greedy_attack(state: SimState, net: RoadNetwork, trips: TripTable | None, budget: float) -> np.ndarray:
    """Split ``budget`` across edges in proportion to the vehicles whose shortest paths use them."""
    if not budget > 0:
        raise ValueError("budget must be positive")
    s = attacker_observe(state, net, trips).reshape(net.n_edges, FEATURES_PER_EDGE)[:, 0]
    return split_budget(s, budget)


def split_budget(s: np.ndarray, budget: float) -> np.ndarray:
    total = float(np.sum(s))
    if total <= 0:
        return np.zeros(len(s))
    return budget * np.asarray(s, dtype=float) / total


def default_greedy_budget(net: RoadNetwork) -> float:
    return 0.5 * float(net.free_flow.sum())


@dataclass
class GreedyAttack:
    budget: float

    def episode(self, net, trips, rng):
        return lambda state: greedy_attack(state, net, trips, self.budget)

    def to_dict(self):
        return {"rule": "greedy", "budget": self.budget}

    def save(self, path, label):
        Path(path).write_text(json.dumps({"version": 1, "kind": "rule-attacker", "label": label, **self.to_dict()}))


# --------------------------------------------------------------------------- k-means graph partition

@dataclass
class ClusterAssignment:
    node_cluster: np.ndarray
    edge_cluster: np.ndarray
    k: int
    cost_history: tuple[float, ...] = ()

    def edges_in(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.edge_cluster == cluster)


def _embedding(net: RoadNetwork) -> np.ndarray:
    D = all_pairs_costs(net, np.asarray(net.free_flow, dtype=float))
    finite = D[np.isfinite(D)]
    big = 2.0 * (finite.max() if finite.size else 1.0)
    return np.where(np.isfinite(D), D, big)


def _kmeanspp(X, k, rng):
    centers = [X[rng.integers(len(X))]]
    for _ in range(1, k):
        d2 = np.min(((X[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        if d2.sum() <= 0:
            centers.append(X[rng.integers(len(X))])
        else:
            centers.append(X[rng.choice(len(X), p=d2 / d2.sum())])
    return np.array(centers)


def _lloyd(X, centers, max_iter=300):
    costs = []
    labels = None
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None]) ** 2).sum(-1)
        new = np.argmin(d2, axis=1)
        # keep every cluster nonempty: hand the worst-fit point to an empty one
        for c in range(len(centers)):
            if not np.any(new == c):
                fit = d2[np.arange(len(X)), new]
                counts = np.bincount(new, minlength=len(centers))
                cand = np.argsort(-fit)
                for i in cand:
                    if counts[new[i]] > 1:
                        counts[new[i]] -= 1
                        new[i] = c
                        counts[c] += 1
                        break
        costs.append(float(((X - centers[new]) ** 2).sum()))
        centers = np.array([X[new == c].mean(axis=0) for c in range(len(centers))])
        costs.append(float(((X - centers[new]) ** 2).sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
    return labels, centers, costs


def kmeans_partition(net: RoadNetwork, k: int = 4, seed: int = 0, n_restarts: int = 10) -> ClusterAssignment:
    """k-means over rows of the free-flow shortest-path distance matrix."""
    n = net.n_nodes
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    n_restarts = min(max(n_restarts, 1), 50)
    X = _embedding(net)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_restarts):
        labels, _, costs = _lloyd(X, _kmeanspp(X, k, rng))
        if best is None or costs[-1] < best[1][-1] - 1e-12:
            best = (labels, costs)
    labels, costs = best
    # canonical numbering: clusters ordered by their smallest node index
    order = {}
    for lab in labels:
        order.setdefault(int(lab), len(order))
    labels = np.array([order[int(l)] for l in labels])
    same = labels[net.tail] == labels[net.head]
    edge_cluster = np.where(same, labels[net.tail], -1)
    return ClusterAssignment(labels, edge_cluster, k, tuple(costs))


# --------------------------------------------------------------------------- Gaussian cluster attack

def gaussian_attack(net: RoadNetwork, clusters: ClusterAssignment, target: int, budget: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Normal(budget * c_e, c_e / 10) on the target cluster's edges, conditioned on >= 0."""
    edges = clusters.edges_in(target)
    if edges.size == 0:
        raise ValueError(f"cluster {target} contains no edges")
    if not budget > 0:
        raise ValueError("budget must be positive")
    c = net.capacity[edges]
    mu, sd = budget * c, c / 10.0
    a = np.zeros(net.n_edges)
    a[edges] = stats.truncnorm.rvs(-mu / sd, np.inf, loc=mu, scale=sd, random_state=rng)
    return a


@dataclass
class GaussianAttack:
    clusters: ClusterAssignment
    budget: float = 0.5

    def targets(self) -> list[int]:
        return [c for c in range(self.clusters.k) if self.clusters.edges_in(c).size]

    def episode(self, net, trips, rng):
        options = self.targets()
        if not options:
            raise ValueError("no cluster contains an edge")
        target = options[int(rng.integers(len(options)))]
        return lambda state: gaussian_attack(net, self.clusters, target, self.budget, rng)

    def save(self, path, label):
        Path(path).write_text(json.dumps({
            "version": 1, "kind": "rule-attacker", "label": label, "rule": "gaussian", "budget": self.budget,
            "k": self.clusters.k, "node_cluster": self.clusters.node_cluster.tolist(),
            "edge_cluster": self.clusters.edge_cluster.tolist()}))


# --------------------------------------------------------------------------- Bayesian detector

@dataclass
class BayesianDetector:
    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray
    H: int
    log_tau: float = -math.inf
    network: str = ""

    @property
    def dim(self) -> int:
        return self.mean.size

    def log_density(self, windows: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(windows, dtype=float))
        if X.shape[1] != self.dim:
            raise ValueError(f"window has dimension {X.shape[1]}, detector expects {self.dim}")
        z = np.linalg.solve(self.chol, (X - self.mean).T)
        logdet = 2.0 * np.log(np.diag(self.chol)).sum()
        out = -0.5 * (z**2).sum(axis=0) - 0.5 * logdet - 0.5 * self.dim * math.log(2 * math.pi)
        return out if np.ndim(windows) > 1 else out[0]

    def episode(self, net, trips, rng):
        n = net.n_edges
        return lambda history: bool(bayes_decide(self, defender_observe(history, self.H, n)))

    def save(self, path, label):
        with open(path, "wb") as fh:
            np.savez(fh, __rule__=np.array(json.dumps({"version": 1, "kind": "rule-defender", "label": label,
                                                         "rule": "bayesian", "H": self.H,
                                                         "log_tau": self.log_tau, "network": self.network})),
                     mean=self.mean, cov=self.cov, chol=self.chol)


def detector_windows(traces, H: int) -> np.ndarray:
    """Every defender observation window along the given traces (zero-padded at the start)."""
    rows = []
    for trace in traces:
        seq = [m.observed_times for m in trace.per_step] if isinstance(trace, EpisodeResult) else list(trace)
        for t in range(len(seq)):
            rows.append(defender_observe(seq[: t + 1], H, len(seq[0])))
    return np.array(rows)


def fit_bayesian_detector(nominal_runs, H: int = 5, reg: float | None = None, network: str = "",
                          quantile: float = 0.01) -> BayesianDetector:
    """Gaussian fit to nominal observation windows, with ridge ``reg`` on the covariance.

    The threshold starts at the ``quantile`` of the training windows' log-densities;
    use ``calibrate_threshold`` on held-out windows for an unbiased rate.
    """
    if len(nominal_runs) < 2:
        raise ValueError("need at least two nominal episodes")
    X = detector_windows(nominal_runs, H)
    mean = X.mean(axis=0)
    cov = np.cov(X, rowvar=False, bias=True) if len(X) > 1 else np.zeros((X.shape[1], X.shape[1]))
    cov = np.atleast_2d(cov)
    if reg is None:
        reg = 1e-3 * (float(np.mean(np.diag(cov))) + 1.0)
    if reg <= 0:
        raise ValueError("reg must be positive")
    if len(X) < X.shape[1] + 1:
        warnings.warn(f"only {len(X)} windows for a {X.shape[1]}-dimensional detector; raising regularization")
        reg *= 10.0
    cov = cov + reg * np.eye(cov.shape[0])
    chol = np.linalg.cholesky(cov)
    det = BayesianDetector(mean, cov, chol, H, network=network)
    calibrate_threshold(det, X, quantile)
    return det


def bayes_decide(det: BayesianDetector, window: np.ndarray) -> int:
    """1 (alarm) when the window's log-density is at or below the threshold."""
    return int(det.log_density(np.asarray(window, dtype=float)) <= det.log_tau)


def calibrate_threshold(det: BayesianDetector, windows: np.ndarray, quantile: float = 0.01) -> float:
    """Set the threshold at the ``quantile`` of nominal log-densities; returns log(tau)."""
    if not 0 < quantile < 1:
        raise ValueError("quantile must lie in (0, 1)")
    windows = np.asarray(windows, dtype=float)
    if windows.size == 0:
        raise ValueError("no windows to calibrate on")
    det.log_tau = float(np.quantile(det.log_density(np.atleast_2d(windows)), quantile))
    return det.log_tau


# --------------------------------------------------------------------------- handles

def greedy_policy(net: RoadNetwork, budget: float | None = None, label: str = "Greedy") -> PolicyHandle:
    return PolicyHandle("rule-attacker", label, GreedyAttack(budget or default_greedy_budget(net)))


def gaussian_policy(net: RoadNetwork, budget: float = 0.5, k: int = 4, seed: int = 0,
                    label: str = "Gaussian") -> PolicyHandle:
    return PolicyHandle("rule-attacker", label, GaussianAttack(kmeans_partition(net, k, seed), budget))


def bayesian_policy(det: BayesianDetector, label: str = "Bayesian") -> PolicyHandle:
    return PolicyHandle("rule-defender", label, det)


def load_rule(path) -> PolicyHandle:
    path = Path(path)
    if path.read_bytes()[:2] == b"PK":
        with np.load(path, allow_pickle=False) as z:
            rec = json.loads(str(z["__rule__"]))
            det = BayesianDetector(z["mean"].copy(), z["cov"].copy(), z["chol"].copy(), int(rec["H"]),
                                   float(rec["log_tau"]), rec.get("network", ""))
        return PolicyHandle("rule-defender", rec["label"], det)
    doc = json.loads(path.read_text())
    if doc["rule"] == "greedy":
        return PolicyHandle("rule-attacker", doc["label"], GreedyAttack(doc["budget"]))
    if doc["rule"] == "gaussian":
        node = np.array(doc["node_cluster"])
        edge = np.array(doc["edge_cluster"])
        return PolicyHandle("rule-attacker", doc["label"],
                            GaussianAttack(ClusterAssignment(node, edge, doc["k"]), doc["budget"]))
    raise ValueError(f"unknown rule {doc['rule']!r} in {path}")
