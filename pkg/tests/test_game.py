import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from fdigame import rl
from fdigame.game import (LpError, OracleConfig, PayoffEstimate, PayoffMatrix, RunDirError, best_response_gap,
                          double_oracle, double_oracle_run, equilibrium_violation, estimate_payoff,
                          load_equilibrium, load_run_scenario, solve_zero_sum_lp)
from fdigame.oracles import NO_ATTACK, NO_DEFENSE


def support_enumeration_value(M):
    """Game value by enumerating equal-size supports and solving the indifference equations."""
    m, n = M.shape
    best = None
    for k in range(1, min(m, n) + 1):
        for rows in itertools.combinations(range(m), k):
            for cols in itertools.combinations(range(n), k):
                sub = M[np.ix_(rows, cols)]
                # x' sub = v 1, sum x = 1 ; sub y = v 1, sum y = 1
                A = np.block([[sub.T, -np.ones((k, 1))], [np.ones((1, k)), np.zeros((1, 1))]])
                B = np.block([[sub, -np.ones((k, 1))], [np.ones((1, k)), np.zeros((1, 1))]])
                rhs = np.r_[np.zeros(k), 1.0]
                try:
                    xs, ys = np.linalg.solve(A, rhs), np.linalg.solve(B, rhs)
                except np.linalg.LinAlgError:
                    continue
                if xs[:k].min() < -1e-12 or ys[:k].min() < -1e-12:
                    continue
                x, y = np.zeros(m), np.zeros(n)
                x[list(rows)], y[list(cols)] = xs[:k], ys[:k]
                v = xs[k]
                if (M @ y).max() <= v + 1e-9 and (x @ M).min() >= v - 1e-9:
                    best = v if best is None else best
    return best


def test_lp_pure_saddle():
    x, y, v = solve_zero_sum_lp(np.array([[3.0, 1.0], [2.0, 0.0]]))
    assert v == pytest.approx(1.0)
    assert np.allclose(x, [1, 0]) and np.allclose(y, [0, 1])


def test_lp_matching_pennies_and_rps():
    x, y, v = solve_zero_sum_lp(np.array([[1.0, -1.0], [-1.0, 1.0]]))
    assert v == pytest.approx(0.0, abs=1e-12) and np.allclose(x, 0.5) and np.allclose(y, 0.5)
    rps = np.array([[0.0, -1.0, 1.0], [1.0, 0.0, -1.0], [-1.0, 1.0, 0.0]])
    x, y, v = solve_zero_sum_lp(rps)
    assert v == pytest.approx(0.0, abs=1e-12) and np.allclose(x, 1 / 3) and np.allclose(y, 1 / 3)


def test_lp_degenerate_shapes():
    assert solve_zero_sum_lp(np.full((3, 2), 7.5))[2] == pytest.approx(7.5)
    x, y, v = solve_zero_sum_lp(np.array([[4.0, 2.0, 9.0]]))
    assert v == pytest.approx(2.0) and np.allclose(y, [0, 1, 0])
    x, y, v = solve_zero_sum_lp(np.array([[4.0], [2.0], [9.0]]))
    assert v == pytest.approx(9.0) and np.allclose(x, [0, 0, 1])


def test_lp_errors():
    with pytest.raises(LpError):
        solve_zero_sum_lp(np.array([[1.0, np.nan]]))
    with pytest.raises(LpError):
        solve_zero_sum_lp(np.array([[1.0, np.inf]]))
    with pytest.raises(ValueError):
        solve_zero_sum_lp(np.zeros((0, 2)))


@pytest.mark.parametrize("size", [2, 3])
def test_lp_matches_support_enumeration(size):
    rng = np.random.default_rng(size)
    for _ in range(200):
        M = rng.normal(size=(size, size))
        assert abs(solve_zero_sum_lp(M)[2] - support_enumeration_value(M)) <= 1e-9


def test_lp_equilibrium_inequalities_8x8():
    rng = np.random.default_rng(8)
    for _ in range(50):
        M = rng.uniform(-100, 100, size=(8, 8))
        x, y, v = solve_zero_sum_lp(M)
        assert equilibrium_violation(M, x, y, v) <= 1e-8
        assert x.min() >= 0 and y.min() >= 0 and abs(x.sum() - 1) < 1e-12 and abs(y.sum() - 1) < 1e-12


def test_lp_against_reference_solver():
    rng = np.random.default_rng(5)
    for _ in range(30):
        m, n = rng.integers(1, 9, 2)
        M = rng.normal(size=(m, n))
        # min v s.t. M y <= v, sum y = 1, y >= 0
        res = linprog(np.r_[np.zeros(n), 1.0], A_ub=np.c_[M, -np.ones(m)], b_ub=np.zeros(m),
                      A_eq=np.r_[np.ones(n), 0.0][None], b_eq=[1.0], bounds=[(0, None)] * n + [(None, None)])
        assert solve_zero_sum_lp(M)[2] == pytest.approx(res.fun, abs=1e-8)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(0.01, 100), b=st.floats(-1e3, 1e3))
def test_lp_affine_equivariance_and_duality(seed, a, b):
    M = np.random.default_rng(seed).normal(size=(4, 5))
    v = solve_zero_sum_lp(M)[2]
    assert solve_zero_sum_lp(a * M + b)[2] == pytest.approx(a * v + b, abs=1e-8 * (1 + abs(b)))
    assert solve_zero_sum_lp(-M.T)[2] == pytest.approx(-v, abs=1e-10)


def test_lp_payoff_matrix_input():
    pm = PayoffMatrix(["a1", "a2"], ["d1", "d2"])
    for (a, d), v in {("a1", "d1"): 1.0, ("a1", "d2"): -1.0, ("a2", "d1"): -1.0, ("a2", "d2"): 1.0}.items():
        pm.entries[a, d] = PayoffEstimate(v, 0.0, 1, v, 0.0)
    assert solve_zero_sum_lp(pm)[2] == pytest.approx(0.0, abs=1e-12)


def test_best_response_gap():
    assert best_response_gap([10.0, 2.0], [0.5, 0.5], 5.0, "attacker") == pytest.approx(1.0)
    assert best_response_gap([4.0, 4.0], [0.25, 0.75], 5.0, "defender") == pytest.approx(1.0)
    with pytest.raises(ValueError):
        best_response_gap([], [], 0.0, "attacker")
    with pytest.raises(ValueError):
        best_response_gap([1.0], [0.5, 0.5], 0.0, "attacker")
    with pytest.raises(ValueError):
        best_response_gap([1.0, np.nan], [0.5, 0.5], 0.0, "attacker")
    with pytest.raises(ValueError):
        best_response_gap([1.0], [1.0], 0.0, "referee")


# ---------------------------------------------------------------- double oracle with exact oracles

def exact_oracles(M):
    def att(k, defs, y):
        return int(np.argmax(M[:, defs] @ y))

    def dfd(k, atts, x):
        return int(np.argmin(x @ M[atts, :]))
    return att, dfd


def test_do_converges_on_hidden_games():
    rng = np.random.default_rng(6)
    for _ in range(20):
        M = rng.normal(size=(6, 6))
        att, dfd = exact_oracles(M)
        calls = []

        def payoff(a, d):
            calls.append((a, d))
            return M[a, d]
        tr = double_oracle(payoff, att, dfd, [0], [0], 50)
        assert tr.converged
        assert abs(tr.value - solve_zero_sum_lp(M)[2]) <= 1e-6
        assert len(calls) == len(set(calls))
        for it in tr.iterations:
            # exact best responses bracket the full-game value
            lo = (it.attacker_mix @ M[it.attackers, :]).min()
            hi = (M[:, it.defenders] @ it.defender_mix).max()
            assert lo - 1e-9 <= solve_zero_sum_lp(M)[2] <= hi + 1e-9
            assert it.gap >= -1e-12


def test_do_stops_when_nothing_new():
    M = np.array([[3.0, 1.0], [2.0, 0.0]])
    att, dfd = exact_oracles(M)
    tr = double_oracle(lambda a, d: M[a, d], att, dfd, [0], [1], 10)
    assert tr.converged and len(tr.iterations) == 1 and tr.value == 1.0


def test_do_tolerance_and_validation():
    M = np.random.default_rng(0).normal(size=(6, 6))
    att, dfd = exact_oracles(M)
    tr = double_oracle(lambda a, d: M[a, d], att, dfd, [0], [0], 50, tol=1e9)
    assert len(tr.iterations) == 1 and tr.converged
    with pytest.raises(ValueError):
        double_oracle(lambda a, d: 0.0, att, dfd, [0], [0], 0)
    with pytest.raises(ValueError):
        double_oracle(lambda a, d: 0.0, att, dfd, [], [0], 3)


def test_do_resume_matches_fresh_run():
    M = np.random.default_rng(2).normal(size=(6, 6))
    att, dfd = exact_oracles(M)
    full = double_oracle(lambda a, d: M[a, d], att, dfd, [0], [0], 4)
    part = double_oracle(lambda a, d: M[a, d], att, dfd, [0], [0], 2)
    rest = double_oracle(lambda a, d: M[a, d], att, dfd, part.attackers, part.defenders, 4, history=part.iterations)
    assert rest.value == full.value and [i.iteration for i in rest.iterations] == [1, 2, 3, 4][:len(rest.iterations)]


# ---------------------------------------------------------------- payoff matrix

def test_payoff_matrix_bookkeeping():
    pm = PayoffMatrix()
    pm.add_attacker("No Attack")
    pm.add_defender("No Defense")
    with pytest.raises(ValueError):
        pm.add_attacker("No Attack")
    with pytest.raises(ValueError):
        pm.means()
    pm.entries["No Attack", "No Defense"] = PayoffEstimate(381.25, 1.5, 50, 380.0, 1.25)
    pm.add_attacker("RL attacker 1")
    pm.entries["RL attacker 1", "No Defense"] = PayoffEstimate(0.1 + 0.2, 0.0, 50, 0.3, 0.0)
    assert pm.shape == (2, 1)
    back = PayoffMatrix.from_tsv(pm.to_tsv())
    assert back == pm
    assert pm.to_tsv().splitlines()[0].split("\t") == ["attacker", "defender", "mean", "se", "n", "travel_time",
                                                       "false_alarms"]


# ---------------------------------------------------------------- simulator-backed runs

def test_estimate_payoff_nominal(gre32):
    a = estimate_payoff(NO_ATTACK, NO_DEFENSE, gre32, 8, 3)
    b = estimate_payoff(NO_ATTACK, NO_DEFENSE, gre32, 8, 3)
    assert a == b and a.n == 8 and a.false_alarms == 0 and a.mean == a.travel_time
    assert 360 < a.mean < 400
    with pytest.raises(ValueError):
        estimate_payoff(NO_ATTACK, NO_DEFENSE, gre32, 0, 3)


def zero_budget_config():
    z = rl.PpoHyper(total_timesteps=0, n_envs=1)
    return OracleConfig(attacker=z, defender=z, eval_episodes=4)


def test_zero_budget_run_is_nominal(gre32):
    res = double_oracle_run(gre32, zero_budget_config(), 1, 0)
    nominal = estimate_payoff(NO_ATTACK, NO_DEFENSE, gre32, 4, np.random.default_rng([0, 7]))
    assert res.value == nominal.mean
    assert [h.label for h in res.attackers] == ["No Attack"] and [h.label for h in res.defenders] == ["No Defense"]


def tiny_config():
    h = rl.PpoHyper(total_timesteps=100, n_envs=2, batch_size=50, n_epochs=1)
    return OracleConfig(attacker=h, defender=h, eval_episodes=3, hidden=(8,))


def test_run_dir_artifacts_and_resume(gre32, tmp_path):
    run = tmp_path / "run"
    res = double_oracle_run(gre32, tiny_config(), 2, 4, run)
    assert len(res.iterations) == 2 and res.matrix.shape == (3, 3)
    for name in ("config.json", "scenario.json", "matrix.tsv", "trace.tsv", "mixtures/iter_1.tsv",
                 "mixtures/iter_2.tsv", "mixtures/final.tsv", "policies/attacker_2.ckpt", "policies/defender_2.ckpt"):
        assert (run / name).exists(), name
    assert (run / "trace.tsv").read_text().splitlines()[0].split("\t")[:5] == ["iteration", "value", "attacker_gap",
                                                                               "defender_gap", "gap"]
    loaded = load_equilibrium(run)
    assert loaded.value == pytest.approx(res.value)
    assert [h.label for h in loaded.attackers] == [h.label for h in res.attackers]
    assert load_run_scenario(run).to_json() == gre32.to_json()

    # a finished run resumes without retraining or re-estimating
    stamp = {p.name: p.stat().st_mtime_ns for p in (run / "policies").iterdir()}
    again = double_oracle_run(gre32, tiny_config(), 2, 4, run)
    assert again.value == res.value
    assert {p.name: p.stat().st_mtime_ns for p in (run / "policies").iterdir()} == stamp

    # an interrupted run continues to the same result
    fresh = tmp_path / "fresh"
    double_oracle_run(gre32, tiny_config(), 1, 4, fresh)
    resumed = double_oracle_run(gre32, tiny_config(), 2, 4, fresh)
    assert resumed.value == res.value
    assert (fresh / "matrix.tsv").read_text() == (run / "matrix.tsv").read_text()

    with pytest.raises(RunDirError):
        double_oracle_run(gre32, tiny_config(), 2, 5, run)


def test_load_equilibrium_names_missing_artifact(tmp_path):
    with pytest.raises(FileNotFoundError, match="config.json"):
        load_equilibrium(tmp_path)
    with pytest.raises(FileNotFoundError, match="scenario.json"):
        load_run_scenario(tmp_path)


def test_oracle_config_round_trip():
    cfg = tiny_config()
    assert OracleConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
