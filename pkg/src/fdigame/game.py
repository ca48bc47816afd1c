"""Zero-sum matrix games: payoff estimation, LP equilibria and the double-oracle driver.

The row player is the attacker (maximizer), the column player the defender
(minimizer). Entries are the defender's expected cost.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Hashable, NamedTuple, Sequence

import numpy as np

from . import rl
from .network import Scenario, randomize_demands
from .oracles import (NO_ATTACK, NO_DEFENSE, MixedStrategy, PolicyHandle, load_policy, save_policy,
                      train_best_response)
from .sim import run_episode


class LpError(ArithmeticError):
    """The simplex routine failed to converge."""


class RunDirError(RuntimeError):
    """A run directory is inconsistent with the requested run."""


# --------------------------------------------------------------------------- payoff estimation

class PayoffEstimate(NamedTuple):
    mean: float
    se: float
    n: int
    travel_time: float
    false_alarms: float


def _se(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0


def estimate_payoff(row: PolicyHandle, col: PolicyHandle, scenario: Scenario, episodes: int = 50,
                    rng: np.random.Generator | int | None = None, fold_false_alarms: bool = True) -> PayoffEstimate:
    """Monte-Carlo estimate of E[TT + C_f * false alarms] for a pure strategy pair.

    Each episode jitters the demands independently. With ``fold_false_alarms``
    off the entry is the plain travel time.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(rng)
    tt = np.empty(episodes)
    fa = np.empty(episodes)
    for e in range(episodes):
        s_jit, s_ep = np.random.SeedSequence(int(rng.integers(0, 2**63 - 1))).spawn(2)
        trips = randomize_demands(scenario.trips, scenario.demand_jitter_pct, np.random.default_rng(s_jit))
        res = run_episode(scenario.net, trips, row, col, scenario.horizon, scenario.theta, np.random.default_rng(s_ep))
        tt[e], fa[e] = res.total_travel_time, res.false_alarm_count
    cf = scenario.false_alarm_cost if fold_false_alarms else 0.0
    u = tt + cf * fa
    return PayoffEstimate(float(u.mean()), _se(u), episodes, float(tt.mean()), float(fa.mean()))


@dataclass
class PayoffMatrix:
    """Payoff entries keyed by (attacker label, defender label), with strategy order."""

    attackers: list[str] = field(default_factory=list)
    defenders: list[str] = field(default_factory=list)
    entries: dict[tuple[str, str], PayoffEstimate] = field(default_factory=dict)

    def add_attacker(self, label: str) -> None:
        if label in self.attackers:
            raise ValueError(f"duplicate attacker label {label!r}")
        self.attackers.append(label)

    def add_defender(self, label: str) -> None:
        if label in self.defenders:
            raise ValueError(f"duplicate defender label {label!r}")
        self.defenders.append(label)

    def missing(self) -> list[tuple[str, str]]:
        return [(a, d) for a in self.attackers for d in self.defenders if (a, d) not in self.entries]

    def means(self) -> np.ndarray:
        if self.missing():
            raise ValueError(f"payoff entries missing: {self.missing()[:3]}")
        return np.array([[self.entries[a, d].mean for d in self.defenders] for a in self.attackers])

    def ses(self) -> np.ndarray:
        return np.array([[self.entries[a, d].se for d in self.defenders] for a in self.attackers])

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.attackers), len(self.defenders)

    def to_tsv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["attacker", "defender", "mean", "se", "n", "travel_time", "false_alarms"])
        for a in self.attackers:
            for d in self.defenders:
                if (a, d) in self.entries:
                    e = self.entries[a, d]
                    w.writerow([a, d, repr(e.mean), repr(e.se), e.n, repr(e.travel_time), repr(e.false_alarms)])
        return buf.getvalue()

    @classmethod
    def from_tsv(cls, text: str) -> "PayoffMatrix":
        m = cls()
        for row in csv.DictReader(io.StringIO(text), delimiter="\t"):
            a, d = row["attacker"], row["defender"]
            if a not in m.attackers:
                m.attackers.append(a)
            if d not in m.defenders:
                m.defenders.append(d)
            m.entries[a, d] = PayoffEstimate(float(row["mean"]), float(row["se"]), int(row["n"]),
                                             float(row["travel_time"]), float(row["false_alarms"]))
        return m


# --------------------------------------------------------------------------- LP

def _pivot(T: np.ndarray, r: int, c: int) -> None:
    T[r] /= T[r, c]
    col = T[:, c].copy()
    col[r] = 0.0
    T -= np.outer(col, T[r])


def _simplex_max(A: np.ndarray, max_iter: int, tol: float = 1e-12):
    """max 1'z s.t. A z <= 1, z >= 0 for positive A; returns (z, duals, objective)."""
    m, n = A.shape
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = 1.0
    T[m, :n] = -1.0
    basis = list(range(n, n + m))
    bland = False
    stall = 0
    obj = 0.0
    for _ in range(max_iter):
        red = T[m, :-1]
        if bland:
            cand = np.flatnonzero(red < -tol)
            if cand.size == 0:
                break
            c = int(cand[0])
        else:
            c = int(np.argmin(red))
            if red[c] >= -tol:
                break
        col = T[:m, c]
        ok = col > tol
        if not ok.any():
            raise LpError("unbounded subproblem (cannot happen for a positive matrix)")
        ratios = np.where(ok, T[:m, -1] / np.where(ok, col, 1.0), np.inf)
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + tol * max(1.0, abs(best)))
        r = int(min(ties, key=lambda i: basis[i]))
        _pivot(T, r, c)
        basis[r] = c
        new_obj = T[m, -1]
        stall = stall + 1 if new_obj <= obj + tol else 0
        obj = new_obj
        if stall > 2 * (m + n):
            bland = True
    else:
        raise LpError(f"simplex did not converge within {max_iter} pivots")
    z = np.zeros(n + m)
    z[basis] = T[:m, -1]
    return z[:n], T[m, n:n + m].copy(), T[m, -1]


def _normalize(p: np.ndarray) -> np.ndarray:
    p = np.where(p < 0, 0.0, p)
    return p / p.sum()


def solve_zero_sum_lp(M, max_iter: int | None = None) -> tuple[np.ndarray, np.ndarray, float]:
    """Equilibrium (row mixture, column mixture, value) of a zero-sum game.

    The row player maximizes. The matrix is shifted to be positive, the
    column player's LP is solved by a dense-tableau simplex and the row
    player's mixture is read off the dual.
    """
    M = M.means() if isinstance(M, PayoffMatrix) else np.asarray(M, dtype=float)
    if M.ndim != 2 or M.size == 0:
        raise ValueError("payoff matrix must be a nonempty 2-D array")
    if not np.all(np.isfinite(M)):
        raise LpError("payoff matrix has non-finite entries")
    m, n = M.shape
    # rescaling keeps pivot tolerances meaningful for any payoff magnitude
    lo, span = M.min(), M.max() - M.min()
    scale = span if span > 0 else 1.0
    A = (M - lo) / scale + 1.0
    z, duals, obj = _simplex_max(A, max_iter or 50 * (m + n) + 1000)
    if obj <= 0:
        raise LpError("degenerate simplex solution")
    y = _normalize(z)
    x = _normalize(duals)
    value = (1.0 / obj - 1.0) * scale + lo
    return x, y, float(value)


def equilibrium_violation(M: np.ndarray, x: np.ndarray, y: np.ndarray, value: float) -> float:
    """Largest violation of the equilibrium inequalities (0 at an exact equilibrium)."""
    M = np.asarray(M, dtype=float)
    return float(max(np.max(M @ y) - value, value - np.min(x @ M), 0.0))


def best_response_gap(candidate_payoffs: Sequence[float], opponent_probs: Sequence[float], value: float,
                      player: str) -> float:
    """Improvement of a candidate pure strategy over the game value against the opponent mixture.

    ``candidate_payoffs[j]`` is the entry of the candidate against the
    opponent's j-th support strategy.
    """
    p = np.asarray(opponent_probs, dtype=float)
    u = np.asarray(candidate_payoffs, dtype=float)
    if p.size == 0:
        raise ValueError("opponent mixture is empty")
    if u.shape != p.shape or not np.all(np.isfinite(u)):
        raise ValueError("candidate payoffs missing against some opponent strategies")
    eu = float(u @ p)
    if player == "attacker":
        return eu - value
    if player == "defender":
        return value - eu
    raise ValueError(f"player must be 'attacker' or 'defender', got {player!r}")


# --------------------------------------------------------------------------- double oracle

@dataclass
class DoIteration:
    iteration: int
    attackers: list
    defenders: list
    attacker_mix: np.ndarray
    defender_mix: np.ndarray
    value: float
    attacker_gap: float
    defender_gap: float
    new_attacker: Hashable | None
    new_defender: Hashable | None

    @property
    def gap(self) -> float:
        """Total exploitability estimate; an oracle weaker than the current support counts as 0."""
        return max(self.attacker_gap, 0.0) + max(self.defender_gap, 0.0)


@dataclass
class DoTrace:
    attackers: list
    defenders: list
    iterations: list[DoIteration]
    attacker_mix: np.ndarray
    defender_mix: np.ndarray
    value: float
    converged: bool


def double_oracle(payoff: Callable[[Hashable, Hashable], float], attacker_oracle, defender_oracle,
                  attackers: Sequence[Hashable], defenders: Sequence[Hashable], iterations: int,
                  tol: float | None = None, on_iteration: Callable[[DoIteration], None] | None = None,
                  history: Sequence[DoIteration] = ()) -> DoTrace:
    """Generic double oracle over hashable strategy keys.

    ``payoff(a, d)`` returns the row player's payoff. ``attacker_oracle(k,
    defenders, sigma_d)`` returns a new attacker key or None (and likewise
    for the defender). Both oracles see the same subgame equilibrium. The
    loop stops after ``iterations`` rounds, when neither oracle adds a new
    strategy, or when the total gap is at most ``tol``. Entries are
    requested once per pair. ``history`` resumes a partial run.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    atts, defs = list(attackers), list(defenders)
    if not atts or not defs:
        raise ValueError("initial strategy sets must be nonempty")
    cache: dict[tuple, float] = {}

    def matrix():
        for a in atts:
            for d in defs:
                if (a, d) not in cache:
                    cache[a, d] = float(payoff(a, d))
        return np.array([[cache[a, d] for d in defs] for a in atts])

    log = list(history)
    converged = False
    for k in range(len(log) + 1, iterations + 1):
        x, y, v = solve_zero_sum_lp(matrix())
        a_new = attacker_oracle(k, list(defs), y)
        d_new = defender_oracle(k, list(atts), x)
        a_gap = d_gap = 0.0
        if a_new is not None:
            a_gap = best_response_gap([_entry(cache, payoff, a_new, d) for d in defs], y, v, "attacker")
        if d_new is not None:
            d_gap = best_response_gap([_entry(cache, payoff, a, d_new) for a in atts], x, v, "defender")
        it = DoIteration(k, list(atts), list(defs), x, y, v, a_gap, d_gap, a_new, d_new)
        added = False
        if a_new is not None and a_new not in atts:
            atts.append(a_new)
            added = True
        if d_new is not None and d_new not in defs:
            defs.append(d_new)
            added = True
        log.append(it)
        if on_iteration is not None:
            on_iteration(it)
        if not added or (tol is not None and it.gap <= tol):
            converged = True
            break
    x, y, v = solve_zero_sum_lp(matrix())
    return DoTrace(atts, defs, log, x, y, v, converged)


def _entry(cache, payoff, a, d):
    if (a, d) not in cache:
        cache[a, d] = float(payoff(a, d))
    return cache[a, d]


# --------------------------------------------------------------------------- PSRO on the simulator

@dataclass
class OracleConfig:
    attacker: rl.PpoHyper = field(default_factory=lambda: rl.PpoHyper(total_timesteps=5_000_000))
    defender: rl.PpoHyper = field(default_factory=lambda: rl.PpoHyper(total_timesteps=2_000_000))
    eval_episodes: int = 50
    fold_false_alarms: bool = True
    min_no_attack_share: float = 0.2
    hidden: tuple[int, ...] = (64, 64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OracleConfig":
        d = dict(d)
        return cls(attacker=rl.PpoHyper(**d.pop("attacker")), defender=rl.PpoHyper(**d.pop("defender")),
                   hidden=tuple(d.pop("hidden")), **d)


@dataclass
class EquilibriumResult:
    attackers: list[PolicyHandle]
    defenders: list[PolicyHandle]
    matrix: PayoffMatrix
    iterations: list[DoIteration]
    attacker_mix: np.ndarray
    defender_mix: np.ndarray
    value: float
    run_dir: Path | None = None

    def attacker_strategy(self) -> MixedStrategy:
        return _mixture(self.attackers, self.attacker_mix)

    def defender_strategy(self) -> MixedStrategy:
        return _mixture(self.defenders, self.defender_mix)

    def handle(self, label: str) -> PolicyHandle:
        for h in self.attackers + self.defenders:
            if h.label == label:
                return h
        raise KeyError(label)


def _mixture(handles, probs) -> MixedStrategy:
    support = [(h, float(p)) for h, p in zip(handles, probs) if p > 0]
    tot = sum(p for _, p in support)
    return MixedStrategy([(h, p / tot) for h, p in support])


def _seed_of(rng) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2**31 - 1))
    if rng is None:
        raise ValueError("a seed or generator is required for reproducible runs")
    return int(rng)


def _tsv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read_tsv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


TRACE_HEADER = ["iteration", "value", "attacker_gap", "defender_gap", "gap", "n_attackers", "n_defenders",
                "new_attacker", "new_defender"]


def _mix_tsv(atts, defs, x, y) -> str:
    rows = [["attacker", a, repr(float(p))] for a, p in zip(atts, x)]
    rows += [["defender", d, repr(float(p))] for d, p in zip(defs, y)]
    return _tsv(["player", "label", "probability"], rows)


def _read_mix(path: Path) -> tuple[list[str], np.ndarray, list[str], np.ndarray]:
    rows = _read_tsv(path)
    a = [(r["label"], float(r["probability"])) for r in rows if r["player"] == "attacker"]
    d = [(r["label"], float(r["probability"])) for r in rows if r["player"] == "defender"]
    return [l for l, _ in a], np.array([p for _, p in a]), [l for l, _ in d], np.array([p for _, p in d])


def run_fingerprint(scenario: Scenario, config: OracleConfig, seed: int) -> str:
    doc = json.dumps({"scenario": json.loads(scenario.to_json()), "config": config.to_dict(), "seed": seed},
                     sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def double_oracle_run(scenario: Scenario, oracle_config: OracleConfig | None = None, do_iterations: int = 10,
                      rng: np.random.Generator | int | None = 0, run_dir: str | Path | None = None,
                      progress: Callable[[str], None] | None = None) -> EquilibriumResult:
    """PSRO with PPO best responses, starting from {No Attack} x {No Defense}.

    Each iteration fills missing payoff entries, solves the subgame LP, trains
    the attacker's best response to the defender mixture, then the
    defender's best response to the attacker mixture, and adds both. With a
    ``run_dir`` every policy, the matrix, the mixtures and the trace are
    written after each step, and an existing directory from the same
    configuration is resumed. A player whose step budget is 0 adds nothing.
    """
    if do_iterations < 1:
        raise ValueError("do_iterations must be >= 1")
    cfg = oracle_config or OracleConfig()
    seed = _seed_of(rng)
    say = progress or (lambda msg: None)
    run_dir = Path(run_dir) if run_dir is not None else None
    fp = run_fingerprint(scenario, cfg, seed)

    handles: dict[str, PolicyHandle] = {NO_ATTACK.label: NO_ATTACK, NO_DEFENSE.label: NO_DEFENSE}
    pm = PayoffMatrix()
    history: list[DoIteration] = []
    if run_dir is not None:
        (run_dir / "policies").mkdir(parents=True, exist_ok=True)
        (run_dir / "mixtures").mkdir(exist_ok=True)
        cfg_path = run_dir / "config.json"
        if cfg_path.exists():
            old = json.loads(cfg_path.read_text())
            if old.get("fingerprint") != fp:
                raise RunDirError(f"{run_dir} holds a run with a different scenario, configuration or seed")
            pm, history = _load_progress(run_dir, handles)
            say(f"resuming after iteration {len(history)}")
        else:
            cfg_path.write_text(json.dumps({"fingerprint": fp, "seed": seed, "do_iterations": do_iterations,
                                            "oracle": cfg.to_dict()}, indent=1, sort_keys=True))
            (run_dir / "scenario.json").write_text(scenario.to_json())
            save_policy(NO_ATTACK, run_dir / "policies" / "attacker_0.ckpt")
            save_policy(NO_DEFENSE, run_dir / "policies" / "defender_0.ckpt")

    def persist_matrix():
        if run_dir is not None:
            (run_dir / "matrix.tsv").write_text(pm.to_tsv())

    def payoff(a: str, d: str) -> float:
        if (a, d) not in pm.entries:
            if a not in pm.attackers:
                pm.add_attacker(a)
            if d not in pm.defenders:
                pm.add_defender(d)
            est = estimate_payoff(handles[a], handles[d], scenario, cfg.eval_episodes,
                                  np.random.default_rng([seed, 7]), cfg.fold_false_alarms)
            pm.entries[a, d] = est
            say(f"payoff {a} vs {d}: {est.mean:.3f} +- {est.se:.3f}")
            persist_matrix()
        return pm.entries[a, d].mean

    def oracle(player: str, hyper: rl.PpoHyper, stream: int):
        def run(k, opponents, probs):
            if hyper.total_timesteps <= 0:
                return None
            label = f"RL {player} {k}"
            path = run_dir / "policies" / f"{player}_{k}.ckpt" if run_dir is not None else None
            if path is not None and path.exists():
                h = load_policy(path)
            else:
                mix = _mixture([handles[o] for o in opponents], probs)
                say(f"iteration {k}: training {player} ({hyper.total_timesteps} steps)")
                h = train_best_response(player, mix, scenario, hyper, np.random.default_rng([seed, k, stream]),
                                        label=label, min_no_attack_share=cfg.min_no_attack_share)
                if path is not None:
                    save_policy(h, path)
            handles[label] = h
            return label
        return run

    def on_iteration(it: DoIteration):
        say(f"iteration {it.iteration}: value {it.value:.3f}, gaps {it.attacker_gap:.3f} / {it.defender_gap:.3f}")
        if run_dir is None:
            return
        (run_dir / "mixtures" / f"iter_{it.iteration}.tsv").write_text(
            _mix_tsv(it.attackers, it.defenders, it.attacker_mix, it.defender_mix))
        history.append(it)
        (run_dir / "trace.tsv").write_text(_tsv(TRACE_HEADER, [_trace_row(i) for i in history]))

    atts = [NO_ATTACK.label] + [h.new_attacker for h in history if h.new_attacker]
    defs = [NO_DEFENSE.label] + [h.new_defender for h in history if h.new_defender]
    for a in atts:
        if a not in pm.attackers:
            pm.add_attacker(a)
    for d in defs:
        if d not in pm.defenders:
            pm.add_defender(d)
    trace = double_oracle(payoff, oracle("attacker", cfg.attacker, 1), oracle("defender", cfg.defender, 2),
                          atts, defs, do_iterations, on_iteration=on_iteration, history=list(history))
    if run_dir is not None:
        (run_dir / "mixtures" / "final.tsv").write_text(
            _mix_tsv(trace.attackers, trace.defenders, trace.attacker_mix, trace.defender_mix))
        persist_matrix()
    return EquilibriumResult([handles[a] for a in trace.attackers], [handles[d] for d in trace.defenders],
                             pm, trace.iterations, trace.attacker_mix, trace.defender_mix, trace.value, run_dir)


def _trace_row(it: DoIteration) -> list:
    return [it.iteration, repr(it.value), repr(it.attacker_gap), repr(it.defender_gap), repr(it.gap),
            len(it.attackers), len(it.defenders), it.new_attacker or "", it.new_defender or ""]


def _load_progress(run_dir: Path, handles: dict) -> tuple[PayoffMatrix, list[DoIteration]]:
    pm = PayoffMatrix.from_tsv((run_dir / "matrix.tsv").read_text()) if (run_dir / "matrix.tsv").exists() \
        else PayoffMatrix()
    history = []
    if (run_dir / "trace.tsv").exists():
        for row in _read_tsv(run_dir / "trace.tsv"):
            k = int(row["iteration"])
            atts, x, defs, y = _read_mix(run_dir / "mixtures" / f"iter_{k}.tsv")
            it = DoIteration(k, atts, defs, x, y, float(row["value"]), float(row["attacker_gap"]),
                             float(row["defender_gap"]), row["new_attacker"] or None, row["new_defender"] or None)
            history.append(it)
    for it in history:
        for player, label in (("attacker", it.new_attacker), ("defender", it.new_defender)):
            if label:
                handles[label] = load_policy(run_dir / "policies" / f"{player}_{it.iteration}.ckpt")
    return pm, history


def load_equilibrium(run_dir: str | Path) -> EquilibriumResult:
    """Rebuild a finished run's equilibrium from its directory."""
    run_dir = Path(run_dir)
    final = run_dir / "mixtures" / "final.tsv"
    for need in (run_dir / "config.json", run_dir / "matrix.tsv", final):
        if not need.exists():
            raise FileNotFoundError(f"missing run artifact {need}")
    handles = {NO_ATTACK.label: NO_ATTACK, NO_DEFENSE.label: NO_DEFENSE}
    pm, history = _load_progress(run_dir, handles)
    atts, x, defs, y = _read_mix(final)
    value = float(x @ np.array([[pm.entries[a, d].mean for d in defs] for a in atts]) @ y)
    return EquilibriumResult([handles[a] for a in atts], [handles[d] for d in defs], pm, history, x, y, value, run_dir)


def load_run_scenario(run_dir: str | Path) -> Scenario:
    path = Path(run_dir) / "scenario.json"
    if not path.exists():
        raise FileNotFoundError(f"missing run artifact {path}")
    return Scenario.from_json(path.read_text())
