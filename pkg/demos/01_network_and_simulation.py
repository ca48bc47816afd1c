"""
Networks and the routing simulator
==================================

Build a small grid-like random network from Sioux Falls attributes, drive
traffic over it, then lie about travel times and watch total travel time grow.
Run with ``python demos/01_network_and_simulation.py``.
"""
import numpy as np

from fdigame import GreParams, gre_scenario, run_episode, sioux_falls
from fdigame.sim import bpr_times, current_travel_times, SimState

###############################################################################
# Sioux Falls ships with the package; its attributes seed the random networks.
sf_net, sf_trips = sioux_falls()
print(f"Sioux Falls: {sf_net.n_nodes} nodes, {sf_net.n_edges} links, demand {sf_trips.total_demand:.0f}")

###############################################################################
# A 3x2 grid at seed 20: 6 nodes, 16 directed edges, one trip per node pair.
sc = gre_scenario(GreParams(3, 2, seed=20))
net, trips = sc.net, sc.trips
print(f"{sc.name}: {net.n_edges} edges, {len(trips)} trips, demand {trips.total_demand:.3f} (thousands)")

###############################################################################
# Travel times follow the BPR curve: free-flow time grows with occupancy.
loads = np.linspace(0, 2, 5)
print("edge 0 travel time at 0, 0.5, 1, 1.5, 2 x capacity:",
      np.round([bpr_times(net, x * net.capacity)[0] for x in loads], 2))

###############################################################################
# Nominal play: no attacker, no defender. The reward stream of the attacker is
# the weight still on the road at every step, summed into total travel time.
nominal = [run_episode(net, trips, None, None, sc.horizon, sc.theta, seed).total_travel_time for seed in range(20)]
print(f"nominal total travel time: {np.mean(nominal):.1f} +- {np.std(nominal):.1f}")


###############################################################################
# An attacker is any object with ``episode(net, trips, rng)`` returning a
# per-step rule. Making the least congested edges look slow herds drivers onto
# the congested ones. Perturbations only add time, so past some size the
# quiet edges are simply avoided and a bigger lie changes nothing.
class InflateQuiet:
    def __init__(self, amount, k=8):
        self.amount, self.k = amount, k

    def episode(self, net, trips, rng):
        def act(state):
            ratio = current_travel_times(state, net) / net.free_flow
            a = np.zeros(net.n_edges)
            a[np.argsort(ratio)[:self.k]] = self.amount
            return a
        return act


for amount in (5, 20, 100):
    tt = [run_episode(net, trips, InflateQuiet(amount), None, sc.horizon, sc.theta, seed).total_travel_time
          for seed in range(20)]
    print(f"inflate 8 quietest edges by {amount:>3}: total travel time {np.mean(tt):.1f}")

###############################################################################
# The initial state puts every trip at its origin.
s0 = SimState.initial(net, trips, np.random.default_rng(0))
print("vehicles on the road at t=0:", round(s0.traveling_weight, 3))
