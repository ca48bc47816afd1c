"""Post-training evaluation: episodic utilities, permutation tests and comparison reports."""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines as bl
from .game import EquilibriumResult, _se
from .network import Scenario, randomize_demands
from .oracles import NO_ATTACK, NO_DEFENSE, MixedStrategy, PolicyHandle
from .sim import run_episode

EXACT_LIMIT = 100_000


def _collect(sigma_a: MixedStrategy, sigma_d: MixedStrategy, scenario: Scenario, n: int, rng):
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng)
    tt = np.empty(n)
    fa = np.empty(n)
    for e in range(n):
        s_jit, s_pick, s_ep = np.random.SeedSequence(int(rng.integers(0, 2**63 - 1))).spawn(3)
        pick = np.random.default_rng(s_pick)
        att, dfd = sigma_a.sample(pick), sigma_d.sample(pick)
        trips = randomize_demands(scenario.trips, scenario.demand_jitter_pct, np.random.default_rng(s_jit))
        res = run_episode(scenario.net, trips, att, dfd, scenario.horizon, scenario.theta, np.random.default_rng(s_ep))
        tt[e], fa[e] = res.total_travel_time, res.false_alarm_count
    return tt, fa


def collect_episodic_utilities(sigma_a: MixedStrategy, sigma_d: MixedStrategy, scenario: Scenario, n: int = 64,
                               rng=None) -> np.ndarray:
    """Total travel time of ``n`` episodes, each drawing one pure strategy per player."""
    return _collect(sigma_a, sigma_d, scenario, n, rng)[0]


def permutation_test(x, y, n_perm: int = 9999, rng=None, alternative: str = "two-sided") -> float:
    """Permutation p-value for a difference in means (``x`` minus ``y``).

    Enumerates every split exactly when there are at most 1e5 of them;
    otherwise draws ``n_perm`` random relabelings and smooths by +1.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size == 0 or y.size == 0:
        raise ValueError("both samples must be nonempty")
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    pooled = np.concatenate([x, y])
    nx, N = x.size, pooled.size
    total = pooled.sum()

    def stat(sum_x):
        d = sum_x / nx - (total - sum_x) / (N - nx)
        return np.abs(d) if alternative == "two-sided" else d

    obs = stat(x.sum())
    eps = 1e-9 * max(1.0, float(np.abs(pooled).max()))
    if alternative == "less":
        hit = lambda s: s <= obs + eps
    else:
        hit = lambda s: s >= obs - eps
    if math.comb(N, nx) <= EXACT_LIMIT:
        idx = np.array(list(itertools.combinations(range(N), nx)))
        sums = pooled[idx].sum(axis=1)
        return float(np.count_nonzero(hit(stat(sums))) / len(sums))
    rng = np.random.default_rng(rng)
    count = 0
    for start in range(0, n_perm, 1000):
        b = min(1000, n_perm - start)
        perms = rng.permuted(np.tile(pooled, (b, 1)), axis=1)
        count += int(np.count_nonzero(hit(stat(perms[:, :nx].sum(axis=1)))))
    return (1 + count) / (n_perm + 1)


# --------------------------------------------------------------------------- comparison report

@dataclass
class CompareConfig:
    greedy_budgets: tuple[float, ...] = (0.25, 0.5, 1.0)     # fractions of the summed free-flow time
    gaussian_budgets: tuple[float, ...] = (0.25, 0.5, 1.0)
    clusters: int | None = None                              # default max(2, |V| // 3)
    kmeans_seed: int = 0
    nominal_episodes: int = 50                               # detector fit
    calibration_episodes: int = 500                          # detector threshold
    detector_quantile: float = 0.01


@dataclass
class ReportRow:
    attacker: str
    defender: str
    parameter: str
    mean: float
    se: float
    n: int
    mean_with_false_alarms: float
    p_value: float
    reference: str


@dataclass
class ComparisonReport:
    scenario: str
    rows: list[ReportRow]
    nominal: float
    nominal_se: float
    summary: dict[str, float] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def cell(self, attacker: str, defender: str) -> ReportRow:
        for r in self.rows:
            if r.attacker == attacker and r.defender == defender:
                return r
        raise KeyError((attacker, defender))

    def to_tsv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["attacker", "defender", "parameter", "mean", "se", "n", "mean_with_false_alarms",
                    "p_value", "reference"])
        for r in self.rows:
            w.writerow([r.attacker, r.defender, r.parameter, f"{r.mean:.6f}", f"{r.se:.6f}", r.n,
                        f"{r.mean_with_false_alarms:.6f}", f"{r.p_value:.6g}", r.reference])
        w.writerow(["Nominal", "-", "", f"{self.nominal:.6f}", f"{self.nominal_se:.6f}", self.rows[0].n, "",
                    "", ""])
        for k, v in self.summary.items():
            w.writerow([f"summary:{k}", "", "", f"{v:.6f}", "", "", "", "", ""])
        return buf.getvalue()

    def to_markdown(self) -> str:
        defs = list(dict.fromkeys(r.defender for r in self.rows))
        atts = list(dict.fromkeys(r.attacker for r in self.rows))
        out = [f"# Comparison report: {self.scenario}", "",
               f"Total travel time per episode (mean +- SE over {self.rows[0].n} episodes). "
               f"Nominal: {self.nominal:.2f} +- {self.nominal_se:.2f}.", "",
               "| attacker | " + " | ".join(defs) + " |", "|---" * (len(defs) + 1) + "|"]
        for a in atts:
            cells = []
            for d in defs:
                r = self.cell(a, d)
                extra = f" [{r.parameter}]" if r.parameter else ""
                cells.append(f"{r.mean:.2f} +- {r.se:.2f} (p={r.p_value:.3g}){extra}")
            out.append(f"| {a} | " + " | ".join(cells) + " |")
        out += ["", "p-values: baseline attacks against the equilibrium attacker under the same defender; "
                    "baseline defenses against the equilibrium defender under the equilibrium attacker.", "",
                "## Summary", ""]
        out += [f"- {k}: {v:+.2%}" for k, v in self.summary.items()]
        if self.notes:
            out += ["", "## Notes", ""] + [f"- {n}" for n in self.notes]
        return "\n".join(out) + "\n"


EQ_ATTACKER = "Equilibrium attacker"
EQ_DEFENDER = "Equilibrium defender"


def nominal_traces(scenario: Scenario, episodes: int, rng) -> list:
    """Unattacked, undefended episodes with independently jittered demands."""
    rng = np.random.default_rng(rng)
    out = []
    for _ in range(episodes):
        s_jit, s_ep = np.random.SeedSequence(int(rng.integers(0, 2**63 - 1))).spawn(2)
        trips = randomize_demands(scenario.trips, scenario.demand_jitter_pct, np.random.default_rng(s_jit))
        out.append(run_episode(scenario.net, trips, None, None, scenario.horizon, scenario.theta,
                               np.random.default_rng(s_ep)))
    return out


def fit_default_detector(scenario: Scenario, episodes: int, quantile: float, seed,
                         calibration_episodes: int | None = None) -> bl.BayesianDetector:
    """Bayesian detector fit and calibrated on separate batches of jittered nominal episodes.

    Alarm windows cluster within episodes, so the threshold needs many more
    calibration episodes than the fit does for a stable rate.
    """
    fit_rng, cal_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    det = bl.fit_bayesian_detector(nominal_traces(scenario, episodes, fit_rng), scenario.history,
                                   network=scenario.net.fingerprint())
    cal = nominal_traces(scenario, calibration_episodes or episodes, cal_rng)
    bl.calibrate_threshold(det, bl.detector_windows(cal, scenario.history), quantile)
    return det


def compare_report(equilibrium: EquilibriumResult, config: CompareConfig | None, scenario: Scenario, n: int = 64,
                   rng=0, n_perm: int = 9999) -> ComparisonReport:
    """Evaluate {equilibrium, greedy, Gaussian, No Attack} x {equilibrium, Bayesian, No Defense}.

    Baseline attack budgets are swept and the strongest setting against each
    defender is reported. All cells share the episode seeds.
    """
    if not equilibrium.iterations:
        raise ValueError("equilibrium has no iterations")
    cfg = config or CompareConfig()
    seed = int(rng.integers(0, 2**31 - 1)) if isinstance(rng, np.random.Generator) else int(rng)
    net = scenario.net
    k = cfg.clusters or max(2, net.n_nodes // 3)
    clusters = bl.kmeans_partition(net, min(k, net.n_nodes), cfg.kmeans_seed)
    det = fit_default_detector(scenario, cfg.nominal_episodes, cfg.detector_quantile, [seed, 11],
                               cfg.calibration_episodes)
    sum_f = float(net.free_flow.sum())

    defenders = {EQ_DEFENDER: equilibrium.defender_strategy(),
                 "Bayesian": MixedStrategy.pure(bl.bayesian_policy(det)),
                 "No Defense": MixedStrategy.pure(NO_DEFENSE)}
    attack_families: dict[str, list[tuple[str, MixedStrategy]]] = {
        EQ_ATTACKER: [("", equilibrium.attacker_strategy())],
        "Greedy": [(f"B={f:g}*sum(f)", MixedStrategy.pure(PolicyHandle("rule-attacker", "Greedy",
                                                                        bl.GreedyAttack(f * sum_f))))
                   for f in cfg.greedy_budgets],
        "Gaussian": [(f"Bhat={b:g},k={clusters.k}", MixedStrategy.pure(
            PolicyHandle("rule-attacker", "Gaussian", bl.GaussianAttack(clusters, b))))
            for b in cfg.gaussian_budgets],
        "No Attack": [("", MixedStrategy.pure(NO_ATTACK))],
    }

    def run(sa, sd):
        return _collect(sa, sd, scenario, n, np.random.default_rng([seed, 5]))

    samples: dict[tuple[str, str], tuple[str, np.ndarray, np.ndarray]] = {}
    for dname, sd in defenders.items():
        for aname, options in attack_families.items():
            best = None
            for param, sa in options:
                tt, fa = run(sa, sd)
                if best is None or tt.mean() > best[1].mean():
                    best = (param, tt, fa)
            samples[aname, dname] = best

    nominal = samples["No Attack", "No Defense"][1]
    rows = []
    for aname in attack_families:
        for dname in defenders:
            param, tt, fa = samples[aname, dname]
            if aname != EQ_ATTACKER:
                ref = (EQ_ATTACKER, dname)
            elif dname != EQ_DEFENDER:
                ref = (EQ_ATTACKER, EQ_DEFENDER)
            else:
                ref = None
            p = 1.0 if ref is None else permutation_test(tt, samples[ref][1], n_perm, np.random.default_rng([seed, 9]))
            rows.append(ReportRow(aname, dname, param, float(tt.mean()), _se(tt), n,
                                  float((tt + scenario.false_alarm_cost * fa).mean()), p,
                                  "" if ref is None else f"{ref[0]} vs {ref[1]}"))

    def m(a, d):
        return samples[a, d][1].mean()

    summary = {}
    for dname in defenders:
        best_base = max(m("Greedy", dname), m("Gaussian", dname))
        summary[f"attack_uplift_vs_{_slug(dname)}"] = m(EQ_ATTACKER, dname) / best_base - 1.0
    best_def = min(m(EQ_ATTACKER, "Bayesian"), m(EQ_ATTACKER, "No Defense"))
    summary["defense_reduction"] = 1.0 - m(EQ_ATTACKER, EQ_DEFENDER) / best_def
    summary["deviation_from_nominal"] = m(EQ_ATTACKER, EQ_DEFENDER) / nominal.mean() - 1.0
    notes = [f"seed {seed}; {n} episodes per cell; {n_perm} permutations",
             f"baseline budgets swept: greedy {list(cfg.greedy_budgets)} x sum(f), "
             f"Gaussian {list(cfg.gaussian_budgets)}; the strongest per defender is reported",
             f"Bayesian detector: H={scenario.history}, quantile {cfg.detector_quantile}, fit on "
             f"{cfg.nominal_episodes} and calibrated on {cfg.calibration_episodes} nominal episodes"]
    return ComparisonReport(scenario.name, rows, float(nominal.mean()), _se(nominal), summary, notes)


def _slug(name: str) -> str:
    return name.lower().replace(" ", "_")


def write_report(report: ComparisonReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.tsv").write_text(report.to_tsv())
    (out / "report.md").write_text(report.to_markdown())


def bar_data_from_tsv(text: str) -> str:
    """Per-pairing (label, mean, SE) rows from a report.tsv, for external plotting."""
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["label", "mean", "se"])
    for r in csv.DictReader(io.StringIO(text), delimiter="\t"):
        if r["attacker"].startswith("summary:"):
            continue
        label = r["attacker"] if r["defender"] == "-" else f"{r['attacker']} vs {r['defender']}"
        w.writerow([label, r["mean"], r["se"]])
    return buf.getvalue()
