"""Randomised verification suites driven by ``sspabs verify``.

Each suite returns a list of :class:`Check` records; a suite passes when all
of its checks pass. Seeds are fixed per instance so failures are replayable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .abstraction import (
    BuildParams,
    Hierarchy,
    NoSolution,
    Partition,
    _assemble,
    build_option,
    check_connectivity,
    cluster,
    critical_targets,
    option_statistics,
)
from .analysis import BoundReport, theorem1_check
from .domains import random_ssp
from .mdp import SparseSSP, proper_states
from .planner import plan, run_episode
from .solvers import dijkstra, evaluate_policy, solve_ips, solve_vi

ORACLE_TOL = 1e-8


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


def suite_passed(checks) -> bool:
    return all(c.passed for c in checks)


# -- solver agreement ---------------------------------------------------------------

def suite_solvers(instances: int = 100, deterministic: int = 20, max_n: int = 200, seed: int = 0) -> list[Check]:
    """IPS against value iteration on random SSPs; IPS against Dijkstra on deterministic ones."""
    out = []
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        n = int(rng.integers(2, max_n + 1))
        m = random_ssp(n, seed=[seed, i, 1], goal=int(rng.integers(n)))
        a = solve_ips(m, tol=1e-11)
        b = solve_vi(m, tol=1e-12)
        gap = float(np.max(np.abs(a.values - b.values)))
        out.append(Check(f"ips-vi[{i}] n={n}", gap <= ORACLE_TOL, f"gap={gap:.3e}"))
    for i in range(deterministic):
        rng = np.random.default_rng([seed, i, 2])
        n = int(rng.integers(2, max_n + 1))
        m = random_ssp(n, seed=[seed, i, 3], goal=int(rng.integers(n)), deterministic=True)
        a = solve_ips(m)
        b = dijkstra(m)
        same = bool(np.array_equal(a.values, b.values))
        out.append(Check(f"ips-dijkstra[{i}] n={n}", same,
                         f"max diff={float(np.max(np.abs(a.values - b.values))):.3e}"))
    return out


# -- connectivity ------------------------------------------------------------------

def suite_connectivity(hierarchy: Hierarchy) -> list[Check]:
    """Recompute every retained option's statistics and test its level's thresholds."""
    out = []
    for li, lvl in enumerate(hierarchy.levels, start=1):
        below = hierarchy.model_at(li - 1)
        eps, mu = lvl.params.eps, lvl.params.mu
        bad = []
        for r, opt in enumerate(lvl.options):
            _, ok = check_connectivity(opt, below, eps, mu)
            if not ok:
                bad.append(r)
        out.append(Check(f"level {li}: {len(lvl.options)} options", not bad,
                         f"failing rows {bad[:10]}" if bad else f"eps={eps:g} mu={mu:g}"))
    return out


# -- the aggregation bound ----------------------------------------------------------

def _random_pairs(n: int, goal: int, rng) -> Partition:
    rest = [x for x in rng.permutation(n).tolist() if x != goal]
    members = [(goal,)]
    i = 0
    while i < len(rest):
        if i + 1 < len(rest) and rng.random() < 0.7:
            members.append((rest[i], rest[i + 1]))
            i += 2
        else:
            members.append((rest[i],))
            i += 1
    return Partition.from_members(n, members)


def _isolate(part: Partition, n: int, x: int) -> Partition:
    members = []
    for m in part.members:
        if x in m and len(m) > 1:
            members.extend((y,) for y in m)
        else:
            members.append(m)
    return Partition.from_members(n, members)


def _random_proper(model: SparseSSP, goal: int, rng, tries: int = 30):
    """A uniformly drawn proper policy, or ``None`` after ``tries`` improper draws."""
    deg = np.diff(model.act_ptr)
    for _ in range(tries):
        pol = np.array([int(rng.integers(d)) if d else -1 for d in deg], dtype=np.int64)
        pol[goal] = 0
        try:
            evaluate_policy(model, pol, goal=goal)
            return pol
        except Exception:
            continue
    return None


def bound_instance(seed, max_n: int = 60):
    """One random (model, level, pi, pi_t, goal) tuple for the aggregation bound.

    Options are built for every pair of clusters one transition apart, with
    no connectivity filtering. Policies are optimal or random proper ones
    depending on the seed.
    """
    for attempt in range(50):
        rng = np.random.default_rng([seed, attempt])
        n = int(rng.integers(4, max_n + 1))
        goal = int(rng.integers(n))
        template = random_ssp(n, seed=[seed, attempt, 7], goal=goal, absorbing=False,
                              outcomes=(1, int(rng.integers(1, 4))))
        model = template.with_goal(goal)
        part = cluster(template) if rng.random() < 0.5 else _random_pairs(n, goal, rng)
        part = _isolate(part, n, goal)
        gc = int(part.cluster_of[goal])
        margin = int(rng.integers(0, 3))
        links = []
        for c in range(part.n_clusters):
            if c == gc:
                continue
            for d in sorted(critical_targets(template, part, c)):
                try:
                    opt = build_option(template, part.members[c], part.members[d], margin)
                except NoSolution:
                    continue
                opt.stats = option_statistics(template, opt)
                opt.source, opt.target = c, d
                links.append(opt)
        level = _assemble(part, links, BuildParams(eps=math.inf, mu=math.inf, margin=margin))
        amodel = level.abstract_model.with_goal(gc)
        if not proper_states(amodel, gc).all():
            continue
        mode = int(rng.integers(3))
        pi = solve_ips(model).policy if mode != 1 else _random_proper(model, goal, rng)
        pit = dijkstra(amodel).policy if mode != 2 else _random_proper(amodel, gc, rng)
        if pi is None or pit is None:
            continue
        pi = pi.copy()
        pi[goal] = 0
        pit = pit.copy()
        pit[gc] = 0
        return model, level, pi, pit, goal
    raise RuntimeError(f"could not draw a bound instance for seed {seed}")


def suite_bounds(instances: int = 200, max_n: int = 60, seed: int = 0) -> tuple[list[Check], list[BoundReport]]:
    checks, reports = [], []
    for i in range(instances):
        model, level, pi, pit, goal = bound_instance([seed, i], max_n)
        rep = theorem1_check(model, pi, level, pit, goal)
        reports.append(rep)
        checks.append(Check(f"bound[{i}] n={model.n} clusters={level.partition.n_clusters}", rep.holds,
                            f"lhs={rep.lhs:.4g} rhs={rep.rhs:.4g}"))
    return checks, reports


# -- properness of induced controllers ----------------------------------------------

def suite_properness(hierarchy: Hierarchy, episodes: int = 1000, seed: int = 0, cap: int | None = None,
                     min_rate: float = 0.99, name: str = "model") -> list[Check]:
    """Fraction of episodes reaching the goal, one random (start, goal) pair per episode."""
    model = hierarchy.ground
    cap = cap or 50 * model.n
    rng = np.random.default_rng(seed)
    reached = 0
    failures = 0
    for e in range(episodes):
        s, g = (int(v) for v in rng.choice(model.n, size=2, replace=False))
        try:
            pl = plan(hierarchy, g)
        except Exception:
            failures += 1
            continue
        _, ok, _ = run_episode(hierarchy, pl, s, seed=seed * 100003 + e, step_cap=cap)
        reached += ok
    rate = reached / episodes
    return [Check(f"properness[{name}]", rate >= min_rate,
                  f"reached {reached}/{episodes} (rate {rate:.4f}, plan failures {failures})")]
