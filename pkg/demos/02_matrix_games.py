"""
Zero-sum matrix games and the double oracle
===========================================

The game layer solves zero-sum matrix games exactly with a simplex LP and
grows strategy sets with a double oracle. Here both run on plain matrices,
where best responses can be computed exactly.
"""
import numpy as np

from fdigame import double_oracle, permutation_test, solve_zero_sum_lp
from fdigame.game import equilibrium_violation

###############################################################################
# Rock-paper-scissors: uniform play, value 0. Rows maximize.
rps = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]], dtype=float)
x, y, v = solve_zero_sum_lp(rps)
print("RPS row mix", np.round(x, 4), "column mix", np.round(y, 4), "value", round(v, 12))

###############################################################################
# Matching pennies with a bonus: the mix shifts away from uniform.
M = np.array([[3.0, -1.0], [-1.0, 1.0]])
x, y, v = solve_zero_sum_lp(M)
print("biased pennies: row", np.round(x, 4), "column", np.round(y, 4), "value", round(v, 4))

###############################################################################
# A random 40x40 game. Neither player can gain by deviating from the solution.
rng = np.random.default_rng(0)
G = rng.normal(size=(40, 40))
x, y, v = solve_zero_sum_lp(G)
print(f"40x40 value {v:.6f}, support sizes {np.sum(x > 1e-12)} and {np.sum(y > 1e-12)}, "
      f"max deviation gain {equilibrium_violation(G, x, y, v):.1e}")


###############################################################################
# The double oracle only ever looks at a subgame. Each oracle returns the pure
# best response to the opponent's current mixture.
def attacker_oracle(k, defenders, sigma_d):
    return int(np.argmax(G[:, defenders] @ sigma_d))


def defender_oracle(k, attackers, sigma_a):
    return int(np.argmin(sigma_a @ G[attackers, :]))


trace = double_oracle(lambda a, d: G[a, d], attacker_oracle, defender_oracle, [0], [0], iterations=100)
for it in trace.iterations[:3] + trace.iterations[-2:]:
    print(f"  iteration {it.iteration:>2}: subgame {len(it.attackers)}x{len(it.defenders)}, "
          f"value {it.value:+.4f}, gap {it.gap:.4f}")
print(f"converged={trace.converged} after {len(trace.iterations)} iterations with a "
      f"{len(trace.attackers)}x{len(trace.defenders)} subgame; value {trace.value:.6f} vs full LP {v:.6f}")

###############################################################################
# Comparing two samples of episode outcomes: a permutation test on the mean.
a = rng.normal(10.0, 1.0, 64)
b = rng.normal(10.5, 1.0, 64)
print(f"two-sided p {permutation_test(a, b, 9999, rng):.4f}, "
      f"one-sided (a < b) p {permutation_test(a, b, 9999, rng, alternative='less'):.4f}")
