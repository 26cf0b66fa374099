"""Goal-conditioned planning with a prebuilt hierarchy.

``plan`` solves two small problems per goal: an exact local SSP around the
goal (the approach region, large enough to contain every ground state of the
top-level goal cluster) and a deterministic shortest-path problem on the top
abstract level. ``act`` turns a plan into a ground controller: inside the
approach region it follows the local policy, elsewhere it runs a stack of
options, one per level, re-selecting top-down whenever the innermost option
enters its termination set or leaves its region.
"""
from __future__ import annotations

import random
import time
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .abstraction import Hierarchy, OptionDef
from .mdp import IncompleteCoverage, SSPError, backward_bfs, contains_all, restrict_to_region
from .solvers import dijkstra, solve_ips

APPROACHING = "approaching"
ABSTRACT = "abstract"


class UnreachableGoal(SSPError):
    pass


class NoAbstractPath(SSPError):
    def __init__(self, clusters):
        clusters = list(clusters)
        super().__init__(f"top-level goal cluster unreachable from {len(clusters)} abstract states "
                         f"(first: {clusters[:5]})")
        self.clusters = clusters


class StuckState(SSPError):
    pass


@dataclass(eq=False)
class HierarchicalPlan:
    ground_goal: int
    goal_chain: list[int]  # image of the goal at levels 1..L
    region: np.ndarray  # sorted ground states of the approach region (goal included)
    approach_states: np.ndarray
    approach_actions: np.ndarray
    top_values: np.ndarray
    top_policy: np.ndarray
    margin: int
    timings: dict = field(default_factory=dict)

    @cached_property
    def region_set(self) -> frozenset[int]:
        return frozenset(self.region.tolist())

    @cached_property
    def approach_policy(self) -> dict[int, int]:
        return dict(zip(self.approach_states.tolist(), self.approach_actions.tolist()))

    @property
    def top_goal(self) -> int:
        return self.goal_chain[-1] if self.goal_chain else self.ground_goal


@dataclass
class ControllerState:
    """Active options, outermost first; each entry is ``(level, option)``."""

    stack: tuple = ()
    mode: str = ABSTRACT
    x: int = -1

    def key(self) -> tuple:
        return tuple((lvl, id(o)) for lvl, o in self.stack)


def build_goal_region(hierarchy: Hierarchy, goal: int, margin: int | None = None):
    """Approach region around ``goal`` covering the top goal cluster, and its exact policy.

    Returns ``(region, states, actions)`` where ``states``/``actions`` give
    the policy on the non-goal region states.
    """
    g = int(goal)
    ground = hierarchy.ground
    if not 0 <= g < ground.n:
        raise ValueError(f"goal {g} out of range")
    L = hierarchy.depth
    if margin is None:
        margin = hierarchy.levels[-1].params.margin if L else 2
    required = hierarchy.preimage(L, hierarchy.image(g, L)) if L else [g]
    try:
        bfs = backward_bfs(ground, [g], contains_all(required), margin)
    except IncompleteCoverage as exc:
        raise UnreachableGoal(f"goal {g} cannot be reached from its whole top-level cluster") from exc
    exit_cost = hierarchy.levels[-1].params.exit_cost if L else None
    local = restrict_to_region(ground, bfs.states, [g], exit_cost)
    lm = local.model
    res = dijkstra(lm, allow_partial=False) if lm.is_deterministic else solve_ips(lm)
    k = len(local.states)
    return local.region, local.states, res.policy[:k].copy()


def plan(hierarchy: Hierarchy, goal: int, start: int | None = None, strict: bool = False) -> HierarchicalPlan:
    """Approach region plus the top-level abstract policy for ``goal``.

    Raises :class:`NoAbstractPath` if ``start`` (or, with ``strict``, any
    top-level state) cannot reach the goal cluster in the abstract graph.
    """
    t0 = time.perf_counter()
    g = int(goal)
    L = hierarchy.depth
    chain = [hierarchy.image(g, i) for i in range(1, L + 1)]
    margin = hierarchy.levels[-1].params.margin if L else 2
    region, states, actions = build_goal_region(hierarchy, g, margin)
    t1 = time.perf_counter()
    top = hierarchy.model_at(L)
    if L:
        res = dijkstra(top, goal=chain[-1])
        values, policy = res.values, res.policy
    else:
        values = np.zeros(top.n)
        policy = np.full(top.n, -1, dtype=np.int64)
    t2 = time.perf_counter()
    if L:
        bad = ~np.isfinite(values)
        if strict and bad.any():
            raise NoAbstractPath(np.flatnonzero(bad).tolist())
        if start is not None and bad[hierarchy.image(int(start), L)]:
            raise NoAbstractPath([hierarchy.image(int(start), L)])
    return HierarchicalPlan(
        ground_goal=g,
        goal_chain=chain,
        region=region,
        approach_states=states,
        approach_actions=actions,
        top_values=values,
        top_policy=policy,
        margin=margin,
        timings={"region": t1 - t0, "abstract": t2 - t1, "total": t2 - t0},
    )


def _inside(option: OptionDef, z: int) -> bool:
    return z in option.region_set and z not in option.termination_set


def act(hierarchy: Hierarchy, plan_: HierarchicalPlan, ctl: ControllerState, x: int) -> tuple[int, ControllerState]:
    """Ground action at ``x`` and the controller state after choosing it."""
    x = int(x)
    if x == plan_.ground_goal:
        raise ValueError("controller is done at the goal")
    if x in plan_.region_set:
        a = plan_.approach_policy.get(x)
        if a is None:
            raise StuckState(f"no approach action at {x}")
        return a, ControllerState(stack=(), mode=APPROACHING, x=x)
    maps = hierarchy.ground_maps
    stack = list(ctl.stack)
    # pop options that finished (entered their target) or were knocked out of their region
    while stack:
        lvl, opt = stack[-1]
        if _inside(opt, int(maps[lvl - 1][x])):
            break
        stack.pop()
    if not stack:
        L = hierarchy.depth
        if L == 0:
            raise StuckState(f"state {x} outside the approach region and no abstraction levels")
        top = int(maps[L][x])
        a = int(plan_.top_policy[top])
        if a < 0:
            raise StuckState(f"abstract state {top} has no route to the goal cluster")
        stack.append((L, hierarchy.levels[L - 1].option_of(top, a)))
    # descend until a ground-level option is active
    while stack[-1][0] > 1:
        lvl, opt = stack[-1]
        z = int(maps[lvl - 1][x])
        b = opt.policy.get(z)
        if b is None:
            raise StuckState(f"option at level {lvl} has no action at {z}")
        stack.append((lvl - 1, hierarchy.levels[lvl - 2].option_of(z, b)))
    a = stack[-1][1].policy.get(x)
    if a is None:
        raise StuckState(f"no option action at ground state {x}")
    return a, ControllerState(stack=tuple(stack), mode=ABSTRACT, x=x)


def sample_next(model, x: int, a: int, rng: random.Random) -> tuple[int, float]:
    r = model.act_ptr[x] + a
    ys, ps, cs = model.row_outcomes[r]
    u = rng.random()
    acc = 0.0
    for y, p, c in zip(ys, ps, cs):
        acc += p
        if u < acc:
            return y, c
    return ys[-1], cs[-1]


def run_episode(hierarchy: Hierarchy, plan_: HierarchicalPlan, start: int, seed=0,
                step_cap: int | None = None, rng: random.Random | None = None) -> tuple[float, bool, int]:
    """Simulate the controller from ``start``; returns (cost, reached, steps)."""
    model = hierarchy.ground
    if step_cap is None:
        step_cap = 50 * model.n
    rng = rng or random.Random(seed)
    x = int(start)
    g = plan_.ground_goal
    ctl = ControllerState()
    cost = 0.0
    steps = 0
    while x != g:
        if steps >= step_cap:
            return cost, False, steps
        a, ctl = act(hierarchy, plan_, ctl, x)
        x, c = sample_next(model, x, a, rng)
        cost += c
        steps += 1
    return cost, True, steps
