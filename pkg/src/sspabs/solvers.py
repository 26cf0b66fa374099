"""Exact SSP solvers and policy evaluation.

``solve_ips`` is the workhorse: a Dijkstra-like labelling pass followed by
prioritised Gauss-Seidel sweeps. On deterministic models the first pass *is*
Dijkstra and the sweep phase only confirms the fixed point. ``solve_vi`` is a
vectorised Jacobi value iteration used as an independent oracle, and
``dijkstra`` is the fast path for the deterministic abstract levels.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from . import _kernels as _k
from .mdp import SparseSSP, SSPError, proper_states

INF = math.inf
DEFAULT_TOL = 1e-9
STALL_SWEEPS = 200


class ImproperPolicy(SSPError):
    def __init__(self, states):
        states = list(states)
        super().__init__(f"policy does not reach the goal from {len(states)} state(s), e.g. {states[:5]}")
        self.states = states


class Unreachable(SSPError):
    def __init__(self, states):
        states = list(states)
        super().__init__(f"goal unreachable with probability one from {len(states)} state(s), e.g. {states[:5]}")
        self.states = states


class NonConvergence(SSPError):
    pass


class NotDeterministic(SSPError):
    pass


@dataclass
class SolveResult:
    values: np.ndarray
    policy: np.ndarray
    iterations: int
    pops: int
    wall_time: float
    converged: bool
    partial: bool = False
    tol: float = DEFAULT_TOL


@dataclass
class WeightProfile:
    weights: np.ndarray
    contraction: float


def _goal_of(model: SparseSSP, goal):
    g = model.goal if goal is None else int(goal)
    if g is None:
        raise SSPError("model has no goal; pass goal= explicitly")
    return g


def _cached(model, key, build):
    d = model.__dict__
    if key not in d:
        d[key] = build(model)
    return d[key]


# -- policy evaluation ---------------------------------------------------------

def _policy_rows(model: SparseSSP, policy, goal: int) -> np.ndarray:
    pol = np.asarray(policy, dtype=np.int64)
    if len(pol) != model.n:
        raise ValueError("policy length does not match the model")
    nonterm = np.ones(model.n, dtype=bool)
    nonterm[goal] = False
    deg = np.diff(model.act_ptr)
    bad = nonterm & ((pol < 0) | (pol >= deg))
    if np.any(bad):
        raise ValueError(f"policy undefined or inadmissible at states {np.flatnonzero(bad)[:5].tolist()}")
    return model.act_ptr[:-1] + np.where(nonterm, pol, 0)


def _chain(model: SparseSSP, rows: np.ndarray, goal: int, unit_cost: bool):
    """Sparse transition matrix and expected step cost of the chain picked by ``rows``."""
    n = model.n
    states = np.flatnonzero(np.arange(n) != goal)
    r = rows[states]
    lo = model.out_ptr[r]
    cnt = model.out_ptr[r + 1] - lo
    src = np.repeat(states, cnt)
    idx = np.repeat(lo - np.cumsum(cnt) + cnt, cnt) + np.arange(cnt.sum())
    dst = model.out_next[idx]
    p = model.out_prob[idx]
    cost = np.ones_like(p) if unit_cost else model.out_cost[idx]
    c_bar = np.zeros(n)
    np.add.at(c_bar, src, p * cost)
    P = sp.csr_matrix((p, (src, dst)), shape=(n, n))
    return P, c_bar


def _check_proper(P: sp.csr_matrix, goal: int) -> None:
    n = P.shape[0]
    seen = csgraph.breadth_first_order(P.T.tocsr(), goal, directed=True, return_predecessors=False)
    reach = np.zeros(n, dtype=bool)
    reach[seen] = True
    if not reach.all():
        raise ImproperPolicy(np.flatnonzero(~reach).tolist())


def _evaluate(model, policy, goal, tol, method, unit_cost):
    goal = _goal_of(model, goal)
    rows = _policy_rows(model, policy, goal)
    P, c_bar = _chain(model, rows, goal, unit_cost)
    _check_proper(P, goal)
    n = model.n
    keep = np.arange(n) != goal
    Q = P[keep][:, keep]
    b = c_bar[keep]
    v = np.zeros(n)
    if method == "direct":
        A = (sp.identity(Q.shape[0], format="csc") - Q.tocsc())
        v[keep] = spla.spsolve(A, b) if Q.shape[0] else b
    elif method == "iterate":
        x = np.zeros(Q.shape[0])
        while True:
            nx = b + Q @ x
            if np.max(np.abs(nx - x), initial=0.0) <= tol:
                x = nx
                break
            x = nx
        v[keep] = x
    else:
        raise ValueError(f"unknown method {method!r}")
    v[goal] = 0.0
    return v


def evaluate_policy(model: SparseSSP, policy, tol: float = 1e-10, goal=None, method: str = "direct") -> np.ndarray:
    """Value function of a proper stationary policy (fixed point of T_pi).

    ``method="direct"`` solves the linear system; ``"iterate"`` applies the
    evaluation operator until successive iterates differ by at most ``tol``.
    """
    return _evaluate(model, policy, goal, tol, method, unit_cost=False)


def step_weights(model: SparseSSP, policy, goal=None) -> WeightProfile:
    """Expected number of steps to the goal under ``policy`` and the induced contraction factor."""
    g = _goal_of(model, goal)
    w = _evaluate(model, policy, g, 1e-12, "direct", unit_cost=True)
    w[g] = 1.0
    return WeightProfile(weights=w, contraction=1.0 - 1.0 / float(np.max(w)))


def bellman_residual(model: SparseSSP, values: np.ndarray, goal=None) -> float:
    """max_x |v(x) - min_a sum_y p(y|x,a)(c + v(y))| over states with finite value."""
    g = _goal_of(model, goal)
    v = np.asarray(values, dtype=float)
    finite = np.isfinite(v)
    vv = np.where(finite, v, 0.0)
    contrib = model.out_prob * (model.out_cost + vv[model.out_next])
    bad_out = ~finite[model.out_next]
    q = _segment_sum(contrib, model.out_ptr)
    q_bad = _segment_sum(bad_out.astype(float), model.out_ptr) > 0
    q[q_bad] = INF
    best = _segment_min(q, model.act_ptr)
    mask = finite.copy()
    mask[g] = False
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(best[mask] - v[mask])))


def _segment_sum(x, ptr):
    # reduceat sums each segment on its own; a cumsum difference would leak rounding across rows
    out = np.zeros(len(ptr) - 1)
    nonempty = np.diff(ptr) > 0
    if nonempty.any() and len(x):
        out[nonempty] = np.add.reduceat(x, ptr[:-1][nonempty])
    return out


def _segment_min(x, ptr):
    out = np.full(len(ptr) - 1, INF)
    nonempty = np.diff(ptr) > 0
    if nonempty.any() and len(x):
        out[nonempty] = np.minimum.reduceat(x, ptr[:-1][nonempty])
    return out


# -- value iteration -------------------------------------------------------------

def solve_vi(model: SparseSSP, tol: float = DEFAULT_TOL, max_sweeps: int | None = None,
             goal=None, allow_partial: bool = False) -> SolveResult:
    """Jacobi value iteration from the zero lower bound."""
    t0 = time.perf_counter()
    g = _goal_of(model, goal)
    n = model.n
    if max_sweeps is None:
        max_sweeps = max(100_000, 10**8 // max(n, 1))
    alive = proper_states(model, g)
    partial = not alive.all()
    if partial and not allow_partial:
        raise Unreachable(np.flatnonzero(~alive).tolist())
    row_state = np.repeat(np.arange(n), np.diff(model.act_ptr))
    bad_out = (~alive[model.out_next]).astype(float)
    banned = (_segment_sum(bad_out, model.out_ptr) > 0) | ~alive[row_state] | (row_state == g)
    ep = model.out_prob * model.out_cost
    base = _segment_sum(ep, model.out_ptr)
    v = np.zeros(n)
    converged = False
    sweeps = 0
    upd = alive.copy()
    upd[g] = False
    best, best_at = INF, 0
    reached = tol
    while sweeps < max_sweeps:
        sweeps += 1
        q = base + _segment_sum(model.out_prob * v[model.out_next], model.out_ptr)
        q[banned] = INF
        nv = _segment_min(q, model.act_ptr)
        nv = np.where(upd, nv, 0.0)
        delta = np.max(np.abs(nv - v), initial=0.0)
        v = nv
        if delta <= tol:
            converged = True
            break
        if delta < best:
            best, best_at = delta, sweeps
        elif sweeps - best_at > STALL_SWEEPS and best <= 1e-6 * max(1.0, float(np.max(v))):
            # rounding noise amplified by long expected horizons; report what was reached
            converged = True
            reached = best
            break
    if not converged:
        raise NonConvergence(f"value iteration did not reach tol={tol} in {max_sweeps} sweeps")
    q = base + _segment_sum(model.out_prob * v[model.out_next], model.out_ptr)
    q[banned] = INF
    policy = _greedy(model, q, upd)
    v = v.copy()
    v[~alive] = INF
    return SolveResult(values=v, policy=policy, iterations=sweeps, pops=sweeps * n,
                       wall_time=time.perf_counter() - t0, converged=True, partial=partial, tol=reached)


def _greedy(model, q, mask):
    """Lowest-index minimiser of ``q`` per state; -1 where ``mask`` is false."""
    n = model.n
    pol = np.full(n, -1, dtype=np.int64)
    best = _segment_min(q, model.act_ptr)
    row_state = np.repeat(np.arange(n), np.diff(model.act_ptr))
    hit = (q == best[row_state]) & np.isfinite(q)
    rows = np.flatnonzero(hit)
    st = row_state[rows]
    first = np.unique(st, return_index=True)
    pol[first[0]] = rows[first[1]] - model.act_ptr[first[0]]
    pol[~mask] = -1
    return pol


# -- improved prioritised sweeping ------------------------------------------------

@dataclass(frozen=True)
class _IPSTables:
    row_state: np.ndarray
    base: np.ndarray
    inv: np.ndarray
    usable: np.ndarray
    ex_ptr: np.ndarray
    ex_next: np.ndarray
    ex_prob: np.ndarray
    pred_ptr: np.ndarray
    pred_x: np.ndarray
    pred_row: np.ndarray
    pred_p: np.ndarray
    pred_w: np.ndarray


def _csr_ptr(keys: np.ndarray, size: int) -> np.ndarray:
    ptr = np.zeros(size + 1, dtype=np.int64)
    np.cumsum(np.bincount(keys, minlength=size), out=ptr[1:])
    return ptr


def _ips_tables(model: SparseSSP) -> _IPSTables:
    n = model.n
    row_state = np.repeat(np.arange(n, dtype=np.int64), np.diff(model.act_ptr))
    out_state = np.repeat(row_state, np.diff(model.out_ptr))
    is_self = model.out_next == out_state
    base = _segment_sum(model.out_prob * model.out_cost, model.out_ptr)
    p_self = _segment_sum(np.where(is_self, model.out_prob, 0.0), model.out_ptr)
    inv, usable, ex_ptr, ex_next, ex_prob, pred_ptr, pred_x, pred_row, pred_p, pred_w = _k.ips_tables_pass(
        n, row_state, model.out_ptr.astype(np.int64, copy=False), model.out_next.astype(np.int64, copy=False),
        model.out_prob.astype(np.float64, copy=False), p_self)
    return _IPSTables(row_state=row_state, base=base, inv=inv, usable=usable,
                      ex_ptr=ex_ptr, ex_next=ex_next, ex_prob=ex_prob,
                      pred_ptr=pred_ptr, pred_x=pred_x, pred_row=pred_row,
                      pred_p=pred_p, pred_w=pred_w)


def solve_ips(model: SparseSSP, tol: float = DEFAULT_TOL, goal=None, allow_partial: bool = False,
              max_sweeps: int = 100_000) -> SolveResult:
    """Exact SSP solve by prioritised sweeping.

    Phase one labels states in order of an optimistic one-step estimate that
    treats not-yet-labelled outcomes as staying put (exactly Dijkstra when
    every action is deterministic). Phase two runs Gauss-Seidel backups in
    that order, re-queueing a state only when the accumulated change of its
    successors could move its backup by more than ``tol``.
    """
    t0 = time.perf_counter()
    g = _goal_of(model, goal)
    n = model.n
    t = _cached(model, "_ips_tables", _ips_tables)
    v, order, pops = _k.label_pass(n, g, t.base, t.pred_ptr, t.pred_x, t.pred_row, t.pred_p)

    usable = t.usable
    partial = len(order) + 1 < n
    if partial:
        alive = proper_states(model, g)
        if not allow_partial:
            raise Unreachable(np.flatnonzero(~alive).tolist())
        order = order[alive[order]]
        v[~alive] = INF
        dead_out = (~alive[t.ex_next]).astype(float)
        usable = usable & (_segment_sum(dead_out, t.ex_ptr) == 0)
    use_rows = np.flatnonzero(usable).astype(np.int64)
    use_ptr = _csr_ptr(t.row_state[use_rows], n)

    choice, backups, sweeps, converged = _k.sweep_pass(
        g, v, order, use_ptr, use_rows, t.base, t.inv, t.ex_ptr, t.ex_next, t.ex_prob,
        t.pred_ptr, t.pred_x, t.pred_w, float(tol), int(max_sweeps))
    if not converged:
        raise NonConvergence(f"prioritised sweeping exceeded {max_sweeps} sweeps")

    policy = np.full(n, -1, dtype=np.int64)
    has = choice >= 0
    policy[has] = choice[has] - model.act_ptr[:-1][has]
    return SolveResult(values=v, policy=policy, iterations=int(backups), pops=int(pops),
                       wall_time=time.perf_counter() - t0, converged=True, partial=partial, tol=tol)


# -- deterministic fast path --------------------------------------------------------

def _dijkstra_tables(model: SparseSSP):
    if not model.is_deterministic:
        return None
    n = model.n
    row_state = np.repeat(np.arange(n, dtype=np.int64), np.diff(model.act_ptr))
    nxt = model.out_next.astype(np.int64)
    rows = np.flatnonzero(nxt != row_state).astype(np.int64)
    perm = rows[np.argsort(nxt[rows], kind="stable")]
    return _csr_ptr(nxt[rows], n), row_state[perm], perm, model.out_cost[perm].astype(float)


def dijkstra(model: SparseSSP, goal=None, allow_partial: bool = True) -> SolveResult:
    """Shortest-path-to-goal values on a model whose actions are all deterministic.

    States that cannot reach the goal get infinite value (the result is then
    marked partial) unless ``allow_partial`` is false, in which case
    :class:`Unreachable` is raised. Ties go to the lowest action index.
    """
    t0 = time.perf_counter()
    g = _goal_of(model, goal)
    tables = _cached(model, "_dijkstra_tables", _dijkstra_tables)
    if tables is None:
        raise NotDeterministic("every action must have a single outcome with probability 1")
    n = model.n
    values, choice, pops = _k.dijkstra_pass(n, g, *tables)
    policy = np.full(n, -1, dtype=np.int64)
    has = choice >= 0
    policy[has] = choice[has] - model.act_ptr[:-1][has]
    partial = not np.all(np.isfinite(values))
    if partial and not allow_partial:
        raise Unreachable(np.flatnonzero(~np.isfinite(values)).tolist())
    return SolveResult(values=values, policy=policy, iterations=int(pops), pops=int(pops),
                       wall_time=time.perf_counter() - t0, converged=True, partial=partial, tol=0.0)
