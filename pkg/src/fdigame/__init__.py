"""False-data-injection attack and detection game on a vehicular routing simulator."""
from .network import (EdgeAttr, GreParams, RoadNetwork, Scenario, TripTable, generate_gre, gre_scenario,
                      load_tntp, sioux_falls, write_tntp)
from .sim import EpisodeResult, SimState, run_episode, step
from .rl import PpoHyper, ppo_train
from .oracles import NO_ATTACK, NO_DEFENSE, MixedStrategy, PolicyHandle, train_best_response
from .game import (EquilibriumResult, OracleConfig, PayoffMatrix, double_oracle, double_oracle_run,
                   estimate_payoff, solve_zero_sum_lp)
from .evaluation import collect_episodic_utilities, compare_report, permutation_test

__version__ = "0.1.0"
