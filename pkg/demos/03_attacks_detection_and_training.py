"""
Baseline attacks, the Bayesian detector and a small equilibrium run
===================================================================

Pit the rule-based attackers against the Gaussian anomaly detector, then
run a few double-oracle iterations with PPO best responses. The step budgets
here are tiny so the script finishes in under a minute; the CLI section of the
README shows a desk-scale run.
"""
import numpy as np

from fdigame import NO_ATTACK, NO_DEFENSE, GreParams, MixedStrategy, OracleConfig, PpoHyper, gre_scenario
from fdigame import baselines as bl
from fdigame import collect_episodic_utilities, double_oracle_run
from fdigame.evaluation import fit_default_detector

sc = gre_scenario(GreParams(3, 2, seed=20))
rng = np.random.default_rng(0)


def mean_tt(attacker, defender, n=32):
    tt = collect_episodic_utilities(MixedStrategy.pure(attacker), MixedStrategy.pure(defender), sc, n,
                                    np.random.default_rng([0, 5]))
    return tt.mean()


###############################################################################
# Greedy spreads a budget over edges in proportion to shortest-path usage; the
# Gaussian attack hits every edge inside one k-means cluster of the network.
greedy = bl.greedy_policy(sc.net, 0.5 * float(sc.net.free_flow.sum()))
gauss = bl.gaussian_policy(sc.net, budget=0.5, k=2)
print(f"k-means clusters of nodes: {bl.kmeans_partition(sc.net, 2).node_cluster}")

###############################################################################
# The detector is a Gaussian over the last H observed travel-time vectors,
# fit on nominal traffic and thresholded at its 1% nominal quantile.
det = fit_default_detector(sc, 50, 0.01, [0, 11], calibration_episodes=500)
bayes = bl.bayesian_policy(det)
print(f"detector window dimension {det.dim}, log threshold {det.log_tau:.1f}")

for att in (NO_ATTACK, greedy, gauss):
    row = [mean_tt(att, d) for d in (NO_DEFENSE, bayes)]
    print(f"{att.label:>10}: no defense {row[0]:7.1f}   Bayesian detector {row[1]:7.1f}")

###############################################################################
# Double oracle with PPO oracles. Each iteration trains an attacker against
# the current defender mixture and a defender against the attacker mixture.
cfg = OracleConfig(attacker=PpoHyper(total_timesteps=4000, n_envs=8),
                   defender=PpoHyper(total_timesteps=2000, n_envs=8), eval_episodes=16)
eq = double_oracle_run(sc, cfg, do_iterations=2, rng=0, progress=print)
for it in eq.iterations:
    print(f"iteration {it.iteration}: value {it.value:.1f}, gap {it.gap:.1f}")
print("attacker mixture:", {h.label: round(float(p), 3) for h, p in zip(eq.attackers, eq.attacker_mix)})
print("defender mixture:", {h.label: round(float(p), 3) for h, p in zip(eq.defenders, eq.defender_mix)})
