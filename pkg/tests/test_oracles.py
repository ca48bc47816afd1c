import math

import numpy as np
import pytest

from conftest import path_net
from fdigame import rl
from fdigame.network import EdgeAttr, RoadNetwork, TripTable, sioux_falls
from fdigame.oracles import (FEATURES_PER_EDGE, NO_ATTACK, NO_DEFENSE, U_CLAMP, AttackerEnv, DefenderEnv,
                             MixedStrategy, PolicyHandle, attacker_act, attacker_observe, attacker_reward,
                             defender_observe, defender_reward, load_policy, new_learned_policy,
                             perturbation_from_gaussian, save_policy, train_best_response, with_min_no_attack)
from fdigame.sim import SimState, StepMetrics, run_episode, step


def metrics(traveling, false_alarm=False):
    z = np.zeros(2)
    return StepMetrics(0, traveling, z, z, z, False, false_alarm, false_alarm, False)


def feats(state, net, trips=None):
    return attacker_observe(state, net, trips).reshape(net.n_edges, FEATURES_PER_EDGE)


def test_observation_of_finished_traffic():
    net = path_net(3)
    trips = TripTable(((1, 3, 2.0),))
    s = SimState.initial(net, trips, np.random.default_rng(0))
    s = SimState(0, np.array([2]), s.edge, s.remaining, s.dest, s.weight, s.rng)
    f = feats(s, net)
    assert np.all(f[:, :5] == 0)
    assert np.array_equal(f[:, 5], net.capacity) and np.array_equal(f[:, 6], net.free_flow)


def test_observation_single_trip_on_path():
    net = path_net(3)
    trips = TripTable(((1, 3, 2.5),))
    f = feats(SimState.initial(net, trips, np.random.default_rng(0)), net)
    assert np.array_equal(f[:, 0], [2.5, 2.5])      # s
    assert np.array_equal(f[:, 1], [2.5, 0.0])      # s_hat
    assert np.all(f[:, 2:5] == 0)


def test_observation_on_edge_features():
    net = path_net(3)
    trips = TripTable(((1, 3, 2.5), (1, 3, 1.5)))
    s = SimState.initial(net, trips, np.random.default_rng(0))
    s = SimState(0, np.array([-1, -1]), np.array([0, 0]), np.array([1, 2]), s.dest, s.weight, s.rng)
    f = feats(s, net)
    assert np.array_equal(f[:, 2], [2, 0])          # m: trip count
    assert np.array_equal(f[:, 3], [0.0, 4.0])      # s_tilde: remaining path from the edge head
    assert np.array_equal(f[:, 4], [4.0, 0.0])      # n: weighted occupancy


def test_observation_uses_true_times():
    edges = ((1, 2, EdgeAttr(1.0, 10.0)), (1, 3, EdgeAttr(5.0, 10.0)), (2, 3, EdgeAttr(1.0, 10.0)))
    net = RoadNetwork((1, 2, 3), edges)
    trips = TripTable(((1, 3, 1.0),))
    f = feats(SimState.initial(net, trips, np.random.default_rng(0)), net)
    assert np.array_equal(f[:, 0], [1.0, 0.0, 1.0])


def test_observation_sizes():
    net, trips = sioux_falls()
    s = SimState.initial(net, trips, np.random.default_rng(0))
    assert attacker_observe(s, net, trips).size == 532
    assert defender_observe([], 5, net.n_edges).size == 380


def test_observation_deterministic(gre32):
    s = SimState.initial(gre32.net, gre32.trips, np.random.default_rng(0))
    assert np.array_equal(attacker_observe(s, gre32.net), attacker_observe(s, gre32.net))


def test_defender_observation_padding():
    w = np.array([1.0, 2.0])
    obs = defender_observe([w], 5)
    assert np.array_equal(obs, np.r_[np.zeros(8), w])
    hist = [np.full(2, float(i)) for i in range(7)]
    assert np.array_equal(defender_observe(hist, 3), np.r_[np.full(2, 4.0), np.full(2, 5.0), np.full(2, 6.0)])
    with pytest.raises(ValueError):
        defender_observe(hist, 0)


def test_action_map():
    assert perturbation_from_gaussian(np.full(3, -U_CLAMP)).tolist() == [0.0, 0.0, 0.0]
    assert perturbation_from_gaussian(np.full(2, -50.0)).tolist() == [0.0, 0.0]
    assert perturbation_from_gaussian(np.zeros(1))[0] == pytest.approx(1.0 - math.exp(-8))
    assert perturbation_from_gaussian(np.full(1, 20.0), a_max=7.0)[0] == 7.0
    u = np.random.default_rng(0).normal(scale=5.0, size=1_000_000)
    assert perturbation_from_gaussian(u).min() >= 0.0


def test_attacker_act_kinds(gre32):
    obs = np.zeros(FEATURES_PER_EDGE * gre32.net.n_edges)
    assert np.array_equal(attacker_act(NO_ATTACK, obs, np.random.default_rng(0)), np.zeros(gre32.net.n_edges))
    with pytest.raises(ValueError):
        attacker_act(NO_DEFENSE, obs, np.random.default_rng(0))
    h = new_learned_policy("attacker", gre32, np.random.default_rng(0), "a")
    a = attacker_act(h, obs, np.random.default_rng(0))
    assert a.shape == (gre32.net.n_edges,) and a.min() >= 0 and a.max() <= h.meta["a_max"]


def test_rewards():
    assert attacker_reward(metrics(0.0)) == 0.0
    assert attacker_reward(metrics(5.0)) == 5.0
    assert defender_reward(metrics(5.0)) == -5.0
    assert defender_reward(metrics(5.0, false_alarm=True), 1.0) == -6.0
    tp = StepMetrics(0, 5.0, np.zeros(1), np.ones(1), np.ones(1), True, True, False, True)
    assert defender_reward(tp, 1.0) == -5.0


class Flip:
    def episode(self, net, trips, rng):
        return lambda history: bool(rng.random() < 0.3)


class Push:
    def episode(self, net, trips, rng):
        return lambda state: rng.exponential(1.0, net.n_edges) * (rng.random() < 0.5)


def test_reward_accounting(gre32):
    att = PolicyHandle("rule-attacker", "push", Push())
    dfd = PolicyHandle("rule-defender", "flip", Flip())
    for seed in range(5):
        res = run_episode(gre32.net, gre32.trips, att, dfd, 50, 1.0, seed)
        assert sum(attacker_reward(m) for m in res.per_step) == res.total_travel_time
        d = -sum(defender_reward(m, 2.0) for m in res.per_step)
        assert d == pytest.approx(res.total_travel_time + 2.0 * res.false_alarm_count, rel=1e-12)


def test_silent_defender_attains_nominal_value(gre32):
    res = run_episode(gre32.net, gre32.trips, None, NO_DEFENSE, 50, 1.0, 8)
    assert sum(defender_reward(m) for m in res.per_step) == -res.total_travel_time


def test_mixed_strategy_validation():
    with pytest.raises(ValueError):
        MixedStrategy([])
    with pytest.raises(ValueError):
        MixedStrategy([(NO_ATTACK, 0.4)])
    mix = with_min_no_attack(MixedStrategy([(PolicyHandle("rule-attacker", "p", Push()), 1.0)]), 0.2)
    assert dict((h.label, p) for h, p in mix.support) == {"No Attack": 0.2, "p": 0.8}
    same = MixedStrategy([(NO_ATTACK, 0.5), (PolicyHandle("rule-attacker", "p", Push()), 0.5)])
    assert with_min_no_attack(same) is same


def test_envs_shapes_and_accounting(gre32):
    rng = np.random.default_rng(0)
    env = AttackerEnv(gre32, MixedStrategy.pure(NO_DEFENSE), 2, rng)
    obs = env.reset()
    assert obs.shape == (2, env.obs_dim)
    total = np.zeros(2)
    for _ in range(60):
        obs, r, done, trunc, final = env.step(np.full((2, env.act_dim), -U_CLAMP))
        total += r
        if done.any():
            break
    assert done.any()
    denv = DefenderEnv(gre32, MixedStrategy.pure(NO_ATTACK), 3, rng)
    obs = denv.reset()
    assert obs.shape == (3, gre32.history * gre32.net.n_edges)
    _, r, _, _, _ = denv.step(np.ones(3))
    assert np.all(r < 0)


def test_train_rejects_bad_opponents(gre32):
    hyper = rl.PpoHyper(total_timesteps=0, n_envs=1)
    with pytest.raises(ValueError):
        train_best_response("attacker", MixedStrategy.pure(NO_ATTACK), gre32, hyper, np.random.default_rng(0))
    with pytest.raises(ValueError):
        train_best_response("attacker", None, gre32, hyper, np.random.default_rng(0))


def test_zero_budget_returns_initial_policy(gre32):
    hyper = rl.PpoHyper(total_timesteps=0, n_envs=1)
    h = train_best_response("attacker", MixedStrategy.pure(NO_DEFENSE), gre32, hyper, np.random.default_rng(3))
    fresh = new_learned_policy("attacker", gre32, np.random.default_rng(3), "x")
    assert all(np.array_equal(h.model[k], fresh.model[k]) for k in fresh.model)


def false_alarm_rate(handle, scenario, n=20):
    return np.mean([run_episode(scenario.net, scenario.trips, None, handle, 50, 1.0, 1000 + i).false_alarm_count
                    for i in range(n)])


def test_defender_learns_to_stay_quiet(gre32):
    hyper = rl.PpoHyper(total_timesteps=4000, n_envs=4, batch_size=100)
    untrained = new_learned_policy("defender", gre32, np.random.default_rng(5), "u")
    trained = train_best_response("defender", MixedStrategy.pure(NO_ATTACK), gre32, hyper, np.random.default_rng(5))
    assert false_alarm_rate(trained, gre32) < false_alarm_rate(untrained, gre32)


def test_policy_files_round_trip(gre32, tmp_path):
    learned = new_learned_policy("defender", gre32, np.random.default_rng(0), "RL defender 1")
    for i, h in enumerate([learned, NO_ATTACK, NO_DEFENSE]):
        path = tmp_path / f"p{i}.ckpt"
        save_policy(h, path)
        back = load_policy(path)
        assert (back.kind, back.label) == (h.kind, h.label)
    back = load_policy(tmp_path / "p0.ckpt")
    assert all(np.array_equal(back.model[k], learned.model[k]) for k in learned.model)
    assert back.meta["history"] == gre32.history
    with pytest.raises(FileNotFoundError, match="nope.ckpt"):
        load_policy(tmp_path / "nope.ckpt")
