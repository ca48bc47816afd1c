"""Command-line interface: gen-net, train, eval, compare, plot-data.

Exit codes: 0 success, 2 usage error, 3 missing artifact, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import rl
from .evaluation import (CompareConfig, bar_data_from_tsv, collect_episodic_utilities, compare_report,
                         write_report)
from .game import LpError, OracleConfig, RunDirError, _se, double_oracle_run, load_equilibrium, load_run_scenario
from .network import (GreParams, NetworkValidationError, Scenario, TntpParseError, TripTable, _parse_trips,
                      gre_scenario, load_tntp, sioux_falls, write_tntp)

log = logging.getLogger("fdigame")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fdigame", description="FDI attack/detection game on vehicular routing")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-net", help="generate a GRE scenario")
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--cols", type=int, required=True)
    g.add_argument("--p", type=float, default=0.6057)
    g.add_argument("--q", type=float, default=0.3162)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--attrs", help="TNTP network file to sample edge attributes from (default: Sioux Falls)")
    g.add_argument("--demand", help="TNTP trips file to sample demands from (default: Sioux Falls)")
    g.add_argument("--demand-scale", type=float, default=2.0)
    g.add_argument("--unit", type=float, default=1000.0, help="vehicles per demand/capacity unit")
    g.add_argument("--horizon", type=int, default=50)
    g.add_argument("--theta", type=float, default=1.0)
    g.add_argument("--false-alarm-cost", type=float, default=1.0)
    g.add_argument("--history", type=int, default=5)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="run the double oracle with PPO best responses")
    t.add_argument("--scenario", required=True, help="scenario directory or scenario.json")
    t.add_argument("--iters", type=int, default=10)
    t.add_argument("--attacker-steps", type=int, default=5_000_000)
    t.add_argument("--defender-steps", type=int, default=2_000_000)
    t.add_argument("--n-envs", type=int, default=128)
    t.add_argument("--lr", type=float, default=3e-4)
    t.add_argument("--n-steps", type=int, default=50)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--gamma", type=float, default=0.99)
    t.add_argument("--gae-lambda", type=float, default=0.95)
    t.add_argument("--clip-range", type=float, default=0.2)
    t.add_argument("--ent-coef", type=float, default=0.01)
    t.add_argument("--eval-episodes", type=int, default=50)
    t.add_argument("--pure-travel-time", action="store_true", help="leave false-alarm costs out of the payoffs")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate the final equilibrium")
    e.add_argument("--run", required=True)
    e.add_argument("--episodes", type=int, default=64)
    e.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("compare", help="equilibrium vs baselines report")
    c.add_argument("--run", required=True)
    c.add_argument("--episodes", type=int, default=64)
    c.add_argument("--perms", type=int, default=9999)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", help="output directory (default: the run directory)")

    p = sub.add_parser("plot-data", help="bar-chart data from a comparison report")
    p.add_argument("--run", required=True)
    return ap


def _scenario_path(arg: str) -> Path:
    path = Path(arg)
    return path / "scenario.json" if path.is_dir() else path


def cmd_gen_net(a) -> int:
    src_net, src_trips = sioux_falls()
    if a.attrs:
        src_net = load_tntp(Path(a.attrs).read_text())[0]
    if a.demand:
        src_trips = TripTable(tuple(_parse_trips(Path(a.demand).read_text())))
    sc = gre_scenario(GreParams(a.rows, a.cols, a.p, a.q, a.seed), (src_net, src_trips), a.demand_scale, a.unit,
                      horizon=a.horizon, theta=a.theta, false_alarm_cost=a.false_alarm_cost, history=a.history)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    net_text, trips_text = write_tntp(sc.net, sc.trips)
    (out / "scenario.json").write_text(sc.to_json())
    (out / "net.tntp").write_text(net_text)
    (out / "trips.tntp").write_text(trips_text)
    print(f"{sc.name}: {sc.net.n_nodes} nodes, {sc.net.n_edges} edges, {len(sc.trips)} trips -> {out}")
    return EXIT_OK


def _hyper(a, steps: int) -> rl.PpoHyper:
    return rl.PpoHyper(learning_rate=a.lr, n_steps=a.n_steps, batch_size=a.batch_size, n_epochs=a.epochs,
                       gamma=a.gamma, gae_lambda=a.gae_lambda, clip_range=a.clip_range, ent_coef=a.ent_coef,
                       total_timesteps=steps, n_envs=a.n_envs)


def cmd_train(a) -> int:
    path = _scenario_path(a.scenario)
    if not path.exists():
        raise FileNotFoundError(f"missing scenario {path}")
    sc = Scenario.from_json(path.read_text())
    cfg = OracleConfig(attacker=_hyper(a, a.attacker_steps), defender=_hyper(a, a.defender_steps),
                       eval_episodes=a.eval_episodes, fold_false_alarms=not a.pure_travel_time)
    res = double_oracle_run(sc, cfg, a.iters, a.seed, a.out, progress=log.info)
    last = res.iterations[-1]
    print(f"{len(res.iterations)} iterations, value {res.value:.3f}, last gap {last.gap:.3f} -> {a.out}")
    return EXIT_OK


def cmd_eval(a) -> int:
    eq = load_equilibrium(a.run)
    sc = load_run_scenario(a.run)
    tt = collect_episodic_utilities(eq.attacker_strategy(), eq.defender_strategy(), sc, a.episodes,
                                    np.random.default_rng(a.seed))
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["episode", "total_travel_time"])
    w.writerows([i, f"{x:.6f}"] for i, x in enumerate(tt))
    (Path(a.run) / "eval.tsv").write_text(buf.getvalue())
    print(f"equilibrium play: {tt.mean():.3f} +- {_se(tt):.3f} over {a.episodes} episodes")
    return EXIT_OK


def cmd_compare(a) -> int:
    eq = load_equilibrium(a.run)
    sc = load_run_scenario(a.run)
    rep = compare_report(eq, CompareConfig(), sc, a.episodes, a.seed, a.perms)
    out = Path(a.out or a.run)
    write_report(rep, out)
    print(rep.to_markdown())
    return EXIT_OK


def cmd_plot_data(a) -> int:
    src = Path(a.run) / "report.tsv"
    if not src.exists():
        raise FileNotFoundError(f"missing report {src}; run `compare` first")
    text = bar_data_from_tsv(src.read_text())
    (Path(a.run) / "plot_data.tsv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"gen-net": cmd_gen_net, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare,
            "plot-data": cmd_plot_data}


def main(argv: list[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (LpError, rl.TrainingError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, TntpParseError, NetworkValidationError, RunDirError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
