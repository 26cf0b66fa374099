"""Option-based abstraction hierarchies for goal-conditioned stochastic shortest path planning."""
from __future__ import annotations

from .abstraction import BuildParams, Hierarchy, Partition, build_abstraction, build_hierarchy, build_level0
from .analysis import evaluate_induced, exit_statistics, monte_carlo_eval, theorem1_check
from .domains import make_congested, make_gridworld, make_river, load_map, simulate_congestion
from .mdp import SparseSSP, SSPError, validate_ssp
from .planner import act, plan, run_episode
from .solvers import dijkstra, evaluate_policy, solve_ips, solve_vi

__version__ = "0.1.0"

__all__ = [
    "BuildParams", "Hierarchy", "Partition", "SparseSSP", "SSPError",
    "act", "build_abstraction", "build_hierarchy", "build_level0", "dijkstra", "evaluate_induced",
    "evaluate_policy", "exit_statistics", "load_map", "make_congested", "make_gridworld", "make_river",
    "monte_carlo_eval", "plan", "run_episode", "simulate_congestion", "solve_ips", "solve_vi",
    "theorem1_check", "validate_ssp",
]
