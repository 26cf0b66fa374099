"""Aggregation error analysis and exact evaluation of hierarchical controllers.

The bound checked here compares a ground policy ``pi`` with an abstract
policy ``pi_t`` on a partition of the ground states::

    |v_pi - E v_t|_w <= |A v_pi - v_pi|_w / (1 - gamma)
                        + lam * eps / (1 - gamma_t)

with ``w``/``gamma`` the step weights and contraction factor of ``pi``,
``w_t``/``gamma_t`` those of ``pi_t`` in the abstract model, ``A`` the
within-cluster averaging operator, ``E`` the piecewise-constant extension,
``lam = max_x w_t(cluster(x)) / w(x)`` and ``eps`` the mismatch between the
exit behaviour of ``pi`` and the abstract transitions of ``pi_t``.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from .abstraction import AbstractionLevel, Hierarchy, Partition
from .mdp import SparseSSP, SSPError, gather_outcomes
from .planner import ControllerState, HierarchicalPlan, act, run_episode
from .solvers import evaluate_policy, step_weights

BOUND_SLACK = 1e-9


class NoExit(SSPError):
    pass


class ChainTooLarge(SSPError):
    pass


class ImproperInduced(SSPError):
    def __init__(self, states):
        states = sorted(set(states))
        super().__init__(f"induced controller can loop forever; ground states involved: {states[:10]}")
        self.states = states


@dataclass
class AggregationDistribution:
    """Per-cluster weights over members (``weights[c][i]`` for ``members[c][i]``)."""

    weights: list[np.ndarray]

    @classmethod
    def uniform(cls, partition: Partition) -> "AggregationDistribution":
        return cls([np.full(len(m), 1.0 / len(m)) for m in partition.members])

    def check(self) -> None:
        for c, w in enumerate(self.weights):
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError(f"weights of cluster {c} are not a distribution")


@dataclass
class ExitProfile:
    """Exit statistics of a ground policy on every cluster.

    ``member_cost[c][i]`` and ``member_exit[c][i]`` (a dense row over
    clusters) refer to ``members[c][i]``; ``cost``/``trans`` are their
    aggregates under the distribution.
    """

    member_cost: list[np.ndarray]
    member_exit: list[np.ndarray]
    cost: np.ndarray
    trans: np.ndarray
    goal_cluster: int


def aggregate_values(v, partition: Partition, mu: AggregationDistribution | None = None) -> np.ndarray:
    """Weighted within-cluster mean of ``v`` (one value per cluster)."""
    mu = mu or AggregationDistribution.uniform(partition)
    v = np.asarray(v, dtype=float)
    return np.array([float(np.dot(mu.weights[c], v[list(m)])) for c, m in enumerate(partition.members)])


def extend_values(vt, partition: Partition) -> np.ndarray:
    """Piecewise-constant extension of cluster values to the states below."""
    return np.asarray(vt, dtype=float)[partition.cluster_of]


def _policy_outcomes(model: SparseSSP, policy, states):
    rows = model.act_ptr[states] + np.asarray(policy)[states]
    flat, owner = gather_outcomes(model, rows)
    return owner, model.out_next[flat], model.out_prob[flat], model.out_cost[flat]


def exit_statistics(model: SparseSSP, policy, partition: Partition, goal: int,
                    mu: AggregationDistribution | None = None) -> ExitProfile:
    """Expected cost until leaving each cluster and the cluster entered on exit."""
    mu = mu or AggregationDistribution.uniform(partition)
    policy = np.asarray(policy, dtype=np.int64)
    k = partition.n_clusters
    cof = partition.cluster_of
    gc = int(cof[goal])
    member_cost, member_exit = [], []
    cost = np.zeros(k)
    trans = np.zeros((k, k))
    for c, mem in enumerate(partition.members):
        m = len(mem)
        if c == gc:
            member_cost.append(np.zeros(m))
            member_exit.append(np.zeros((m, k)))
            continue
        states = np.asarray(mem, dtype=np.int64)
        owner, ys, ps, cs = _policy_outcomes(model, policy, states)
        loc = {x: i for i, x in enumerate(mem)}
        A = np.eye(m)
        r = np.bincount(owner, weights=ps * cs, minlength=m)
        B = np.zeros((m, k))
        for i, y, p in zip(owner.tolist(), ys.tolist(), ps.tolist()):
            j = loc.get(y)
            if j is None:
                B[i, cof[y]] += p
            else:
                A[i, j] -= p
        # every member must be able to leave
        if m > 1:
            inner = (np.abs(A - np.eye(m)) > 0).astype(float)
            reach_out = B.sum(axis=1) > 0
            for _ in range(m):
                reach_out = reach_out | (inner @ reach_out > 0)
            if not reach_out.all():
                raise NoExit(f"policy never leaves cluster {c} from {[mem[i] for i in np.flatnonzero(~reach_out)]}")
        elif B.sum() == 0:
            raise NoExit(f"policy never leaves cluster {c}")
        sol = np.linalg.solve(A, np.column_stack([r, B]))
        mc, me = sol[:, 0], sol[:, 1:]
        member_cost.append(mc)
        member_exit.append(me)
        cost[c] = float(mu.weights[c] @ mc)
        trans[c] = mu.weights[c] @ me
    return ExitProfile(member_cost=member_cost, member_exit=member_exit, cost=cost, trans=trans, goal_cluster=gc)


def mixed_norm_diff(p1, p2, w) -> float:
    """max_x sum_y |p1[x,y] - p2[x,y]| w[y] / w[x]."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    w = np.asarray(w, dtype=float)
    if p1.size == 0:
        return 0.0
    return float(np.max((np.abs(p1 - p2) @ w) / w))


def weighted_sup(v, w) -> float:
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return 0.0
    return float(np.max(np.abs(v) / np.asarray(w, dtype=float)))


def abstract_policy_rows(abstract_model: SparseSSP, abstract_policy, goal_cluster: int):
    """Cost vector and (deterministic) transition matrix chosen by ``abstract_policy``.

    The goal cluster's row is left at zero.
    """
    k = abstract_model.n
    c = np.zeros(k)
    P = np.zeros((k, k))
    for x in range(k):
        if x == goal_cluster:
            continue
        a = int(abstract_policy[x])
        for y, p, cost in abstract_model.outcomes(x, a):
            P[x, y] += p
            c[x] += p * cost
    return c, P


def epsilon_mismatch(profile: ExitProfile, abstract_policy, abstract_model: SparseSSP, w_t, c_max: float) -> float:
    """Cost mismatch in the ``w_t`` norm plus ``c_max`` times the mixed transition mismatch."""
    c_t, P_t = abstract_policy_rows(abstract_model, abstract_policy, profile.goal_cluster)
    return weighted_sup(profile.cost - c_t, w_t) + c_max * mixed_norm_diff(profile.trans, P_t, w_t)


@dataclass
class BoundReport:
    lhs: float
    lhs_sup: float
    term1: float
    eps: float
    lam: float
    term2: float
    rhs: float
    gamma: float
    gamma_t: float
    holds: bool
    detail: dict = field(default_factory=dict)


def theorem1_check(model: SparseSSP, policy, level: AbstractionLevel, abstract_policy, goal: int,
                   mu: AggregationDistribution | None = None) -> BoundReport:
    """Evaluate both sides of the aggregation bound for ``policy`` and ``abstract_policy``.

    ``level.abstract_model`` may be goal-free; the goal's cluster is made
    absorbing here.
    """
    part = level.partition
    mu = mu or AggregationDistribution.uniform(part)
    gc = int(part.cluster_of[goal])
    amodel = level.abstract_model.with_goal(gc)
    v = evaluate_policy(model, policy, goal=goal)
    wp = step_weights(model, policy, goal=goal)
    vt = evaluate_policy(amodel, abstract_policy, goal=gc)
    wpt = step_weights(amodel, abstract_policy, goal=gc)
    w, wt = wp.weights, wpt.weights
    prof = exit_statistics(model, policy, part, goal, mu)
    eps = epsilon_mismatch(prof, abstract_policy, amodel, wt, model.c_max)
    Av = extend_values(aggregate_values(v, part, mu), part)
    diff = v - extend_values(vt, part)
    lhs = weighted_sup(diff, w)
    term1 = weighted_sup(Av - v, w) / (1.0 - wp.contraction)
    lam = float(np.max(wt[part.cluster_of] / w))
    term2 = lam * eps / (1.0 - wpt.contraction)
    rhs = term1 + term2
    return BoundReport(lhs=lhs, lhs_sup=float(np.max(np.abs(diff))), term1=term1, eps=eps, lam=lam,
                       term2=term2, rhs=rhs, gamma=wp.contraction, gamma_t=wpt.contraction,
                       holds=bool(lhs <= rhs + BOUND_SLACK),
                       detail={"n": model.n, "clusters": part.n_clusters})


# -- evaluating the induced controller ---------------------------------------------

def induced_chain(hierarchy: Hierarchy, plan_: HierarchicalPlan, starts, limit: int | None = None):
    """Augmented chain over (ground state, option stack) reachable from ``starts``.

    A chain state is the pair ``(x, stack)`` after the controller has acted at
    ``x``, so arrivals that differ only in options the controller pops at once
    share one state. Returns ``(keys, P, c, goal_mask, start_idx)`` with ``P``
    sparse over augmented states and ``start_idx`` the chain state of each start.
    Raises :class:`ChainTooLarge` once more than ``limit`` states are reached.
    """
    model = hierarchy.ground
    g = plan_.ground_goal
    region = plan_.region_set
    index: dict = {}
    resolved: dict = {}
    keys: list = []
    actions: list = []
    src, dst, prob = [], [], []
    cost = []

    def resolve(y, stack):
        arrival = (y, stack)
        i = resolved.get(arrival)
        if i is not None:
            return i
        a = None
        if y == g:
            key, a = (y, ()), -1
        elif stack and y not in region:
            # innermost ground option still running: act() would keep the stack as is
            opt = stack[-1][1]
            if y in opt.region_set and y not in opt.termination_set:
                a = opt.policy.get(y)
                key = (y, stack)
        if a is None:
            a, ctl = act(hierarchy, plan_, ControllerState(stack=stack), y)
            key = (y, ctl.stack)
        i = index.get(key)
        if i is None:
            i = len(keys)
            if limit is not None and i >= limit:
                raise ChainTooLarge(f"augmented chain exceeds {limit} states")
            index[key] = i
            keys.append(key)
            actions.append(a)
        resolved[arrival] = i
        return i

    start_idx = [resolve(int(s), ()) for s in starts]
    i = 0
    outs = model.row_outcomes
    ap = model.act_ptr.tolist()
    while i < len(keys):
        x, stack = keys[i]
        a = actions[i]
        exp_c = 0.0
        if a >= 0:
            ys, ps, cs = outs[ap[x] + a]
            for y, p, c in zip(ys, ps, cs):
                src.append(i)
                dst.append(resolve(y, stack))
                prob.append(p)
                exp_c += p * c
        cost.append(exp_c)
        i += 1
    m = len(keys)
    P = sp.csr_matrix((prob, (src, dst)), shape=(m, m))
    goal_mask = np.array([k[0] == g for k in keys], dtype=bool)
    return keys, P, np.asarray(cost), goal_mask, start_idx


def _solve_absorbing(Q: sp.csr_matrix, c: np.ndarray) -> np.ndarray:
    """Solve ``(I - Q) v = c``; BiCGSTAB first, sparse LU if its residual is not tight."""
    A = (sp.identity(Q.shape[0], format="csr") - Q).tocsr()
    v, info = spla.bicgstab(A, c, rtol=1e-13, atol=0.0, maxiter=10 * Q.shape[0])
    scale = max(float(np.abs(c).max()), 1.0)
    if info != 0 or not np.all(np.isfinite(v)) or np.abs(A @ v - c).max() > 1e-10 * scale:
        v = spla.spsolve(A.tocsc(), c)
    return v


def evaluate_induced(hierarchy: Hierarchy, plan_: HierarchicalPlan, starts, limit: int | None = None) -> np.ndarray:
    """Exact expected cost of the plan's controller from each start.

    ``limit`` caps the augmented chain size (see :func:`induced_chain`).
    """
    starts = [int(s) for s in starts]
    keys, P, c, goal_mask, start_idx = induced_chain(hierarchy, plan_, starts, limit)
    m = len(keys)
    reach = np.zeros(m, dtype=bool)
    gidx = np.flatnonzero(goal_mask)
    if len(gidx):
        order = csgraph.breadth_first_order(_with_source(P.T.tocsr(), gidx), m, directed=True,
                                            return_predecessors=False)
        reach[order[order < m]] = True
    if not reach.all():
        raise ImproperInduced([keys[i][0] for i in np.flatnonzero(~reach)])
    keep = ~goal_mask
    v = np.zeros(m)
    if keep.any():
        v[keep] = _solve_absorbing(P[keep][:, keep], c[keep])
    return v[start_idx]


def _with_source(R: sp.csr_matrix, sources) -> sp.csr_matrix:
    """Reverse graph with an extra node ``m`` pointing at every source."""
    m = R.shape[0]
    R = R.tocoo()
    rows = np.concatenate([R.row, np.full(len(sources), m)])
    cols = np.concatenate([R.col, sources])
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(m + 1, m + 1))


@dataclass
class MCResult:
    mean: float
    stderr: float | None
    reach_rate: float
    trials: int


def monte_carlo_eval(hierarchy: Hierarchy, plan_: HierarchicalPlan, start: int, trials: int,
                     cap: int | None = None, seed=0) -> MCResult:
    """Sample mean and standard error of episode cost over reached episodes."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = random.Random(seed)
    costs = []
    reached = 0
    for _ in range(trials):
        c, ok, _ = run_episode(hierarchy, plan_, start, step_cap=cap, rng=rng)
        if ok:
            reached += 1
            costs.append(c)
    if not costs:
        return MCResult(mean=math.inf, stderr=None, reach_rate=0.0, trials=trials)
    arr = np.asarray(costs)
    se = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else None
    return MCResult(mean=float(arr.mean()), stderr=se, reach_rate=reached / trials, trials=trials)
