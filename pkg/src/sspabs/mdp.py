"""Sparse stochastic shortest path models and graph utilities.

A model is stored in CSR-like form: the actions of state ``s`` are the rows
``act_ptr[s]:act_ptr[s+1]`` and the outcomes of action row ``r`` are the
entries ``out_ptr[r]:out_ptr[r+1]`` of ``out_next``/``out_prob``/``out_cost``.
Action indices handed around by policies are *local* to their state
(``row - act_ptr[s]``).

Models are immutable once built; derived indices (predecessor lists, Python
list views used by the hot loops) are computed lazily and cached on the
instance.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels as _k

PROB_TOL = 1e-12


class SSPError(Exception):
    """Base class for model-level errors."""


class IncompleteCoverage(SSPError):
    """Backward search exhausted its depth budget before the stop condition held."""

    def __init__(self, found, depth):
        super().__init__(f"coverage incomplete after depth {depth} ({len(found)} states found)")
        self.found = found
        self.depth = depth


class EmptyTargets(SSPError):
    pass


@dataclass(frozen=True, eq=False)
class SparseSSP:
    act_ptr: np.ndarray
    out_ptr: np.ndarray
    out_next: np.ndarray
    out_prob: np.ndarray
    out_cost: np.ndarray
    goal: int | None = None
    action_tag: np.ndarray | None = None
    labels: np.ndarray | None = None

    @classmethod
    def from_lists(cls, actions, goal=None, tags=None, labels=None) -> "SparseSSP":
        """Build a model from ``actions[s][a] = [(next, prob, cost), ...]``.

        Outcomes with zero probability are dropped; outcomes sharing both next
        state and cost are merged.
        """
        act_ptr = [0]
        out_ptr = [0]
        nxt: list[int] = []
        prb: list[float] = []
        cst: list[float] = []
        for acts in actions:
            for outs in acts:
                merged: dict[tuple[int, float], float] = {}
                for y, p, c in outs:
                    if p <= 0.0:
                        continue
                    key = (int(y), float(c))
                    merged[key] = merged.get(key, 0.0) + float(p)
                for (y, c), p in merged.items():
                    nxt.append(y)
                    prb.append(p)
                    cst.append(c)
                out_ptr.append(len(nxt))
            act_ptr.append(len(out_ptr) - 1)
        tag_arr = None
        if tags is not None:
            tag_arr = np.asarray([t for st in tags for t in st], dtype=np.int64)
        label_arr = None if labels is None else np.asarray(labels, dtype=np.int64)
        return cls(
            act_ptr=np.asarray(act_ptr, dtype=np.int64),
            out_ptr=np.asarray(out_ptr, dtype=np.int64),
            out_next=np.asarray(nxt, dtype=np.int64),
            out_prob=np.asarray(prb, dtype=np.float64),
            out_cost=np.asarray(cst, dtype=np.float64),
            goal=None if goal is None else int(goal),
            action_tag=tag_arr,
            labels=label_arr,
        )

    # -- sizes ---------------------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.act_ptr) - 1

    @property
    def n_actions(self) -> int:
        return len(self.out_ptr) - 1

    @cached_property
    def c_max(self) -> float:
        if len(self.out_cost) == 0:
            return 0.0
        return float(np.max(self.out_cost))

    @cached_property
    def c_min_positive(self) -> float:
        pos = self.out_cost[self.out_cost > 0]
        return float(pos.min()) if len(pos) else 0.0

    def num_actions(self, s: int) -> int:
        return int(self.act_ptr[s + 1] - self.act_ptr[s])

    def row(self, s: int, a: int) -> int:
        return int(self.act_ptr[s]) + a

    def outcomes(self, s: int, a: int) -> list[tuple[int, float, float]]:
        r = self.row(s, a)
        lo, hi = int(self.out_ptr[r]), int(self.out_ptr[r + 1])
        return [
            (int(self.out_next[i]), float(self.out_prob[i]), float(self.out_cost[i]))
            for i in range(lo, hi)
        ]

    def to_lists(self):
        return [[self.outcomes(s, a) for a in range(self.num_actions(s))] for s in range(self.n)]

    def tags_for(self, s: int) -> list[int]:
        if self.action_tag is None:
            return [-1] * self.num_actions(s)
        return [int(t) for t in self.action_tag[self.act_ptr[s] : self.act_ptr[s + 1]]]

    def with_goal(self, goal: int) -> "SparseSSP":
        """Instantiate a template: ``goal`` becomes absorbing with zero cost."""
        goal = int(goal)
        if not 0 <= goal < self.n:
            raise ValueError(f"goal {goal} out of range")
        acts = []
        tags = []
        for s in range(self.n):
            if s == goal:
                acts.append([[(goal, 1.0, 0.0)]])
                tags.append([-1])
            else:
                acts.append([self.outcomes(s, a) for a in range(self.num_actions(s))])
                tags.append(self.tags_for(s))
        return SparseSSP.from_lists(acts, goal=goal, tags=tags, labels=self.labels)

    # -- cached list views for pure-Python loops ---------------------------
    @cached_property
    def state_rows(self) -> list[range]:
        ap = self.act_ptr.tolist()
        return [range(ap[s], ap[s + 1]) for s in range(self.n)]

    @cached_property
    def row_outcomes(self) -> list[tuple[list[int], list[float], list[float]]]:
        op = self.out_ptr.tolist()
        nx = self.out_next.tolist()
        pr = self.out_prob.tolist()
        co = self.out_cost.tolist()
        return [(nx[op[r] : op[r + 1]], pr[op[r] : op[r + 1]], co[op[r] : op[r + 1]]) for r in range(self.n_actions)]

    @cached_property
    def row_state(self) -> list[int]:
        return np.repeat(np.arange(self.n), np.diff(self.act_ptr)).tolist()

    @cached_property
    def successors(self) -> list[list[int]]:
        """Distinct next states reachable with positive probability (any action)."""
        out = []
        for s in range(self.n):
            seen = {}
            for r in self.state_rows[s]:
                for y in self.row_outcomes[r][0]:
                    seen[y] = None
            out.append(list(seen))
        return out

    @cached_property
    def predecessors(self) -> list[list[int]]:
        """Reverse adjacency of :attr:`successors`, ascending order."""
        pred: list[list[int]] = [[] for _ in range(self.n)]
        for s, ys in enumerate(self.successors):
            for y in ys:
                pred[y].append(s)
        return pred

    @cached_property
    def is_deterministic(self) -> bool:
        if self.n_actions == 0:
            return True
        return bool(np.all(np.diff(self.out_ptr) == 1) and np.all(self.out_prob == 1.0))

    @cached_property
    def diameter_estimate(self) -> int:
        """Double-sweep eccentricity lower bound on the undirected support graph."""
        adj: list[set[int]] = [set() for _ in range(self.n)]
        for s, ys in enumerate(self.successors):
            for y in ys:
                if y != s:
                    adj[s].add(y)
                    adj[y].add(s)
        seen = [False] * self.n
        best = 0
        for s0 in range(self.n):
            if seen[s0]:
                continue
            far, _, comp = _bfs_far(adj, s0)
            for c in comp:
                seen[c] = True
            _, ecc, _ = _bfs_far(adj, far)
            best = max(best, ecc)
        return best


def _bfs_far(adj, s0):
    dist = {s0: 0}
    q = deque([s0])
    far = s0
    while q:
        u = q.popleft()
        if dist[u] > dist[far]:
            far = u
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                q.append(v)
    return far, dist[far], list(dist)


# -- validation ---------------------------------------------------------------

@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_ssp(model: SparseSSP, template: bool = False) -> ValidationReport:
    """List every violated SSP invariant of ``model``.

    With ``template=True`` the goal clauses are skipped and states without
    actions are tolerated (goal-free templates and abstract levels).
    """
    rep = ValidationReport()
    v = rep.violations
    n = len(model.act_ptr) - 1
    if n < 1:
        v.append("model has no states")
        return rep
    ap, op = model.act_ptr, model.out_ptr
    n_rows = len(op) - 1
    n_out = len(model.out_next)
    if ap[0] != 0 or np.any(np.diff(ap) < 0) or ap[-1] != n_rows:
        v.append("malformed action pointer array")
        return rep
    if op[0] != 0 or np.any(np.diff(op) < 0) or op[-1] != n_out:
        v.append("malformed outcome pointer array")
        return rep
    if not (len(model.out_prob) == n_out == len(model.out_cost)):
        v.append("outcome arrays have inconsistent lengths")
        return rep
    if model.action_tag is not None and len(model.action_tag) != n_rows:
        v.append("action tag array has wrong length")
    if model.labels is not None and len(model.labels) != n:
        v.append("label array has wrong length")

    goal = model.goal
    if not template:
        if goal is None:
            v.append("no goal state designated")
        elif not 0 <= goal < n:
            v.append(f"goal {goal} out of range")
            goal = None

    nxt = model.out_next.tolist()
    prb = model.out_prob.tolist()
    cst = model.out_cost.tolist()
    apl = ap.tolist()
    opl = op.tolist()
    for s in range(n):
        rows = range(apl[s], apl[s + 1])
        if len(rows) == 0 and not template and s != goal:
            v.append(f"state {s} has no admissible action")
        for a, r in enumerate(rows):
            lo, hi = opl[r], opl[r + 1]
            if lo == hi:
                v.append(f"action (s{s},a{a}) has no outcomes")
                continue
            total = 0.0
            for i in range(lo, hi):
                y, p, c = nxt[i], prb[i], cst[i]
                if not 0 <= y < n:
                    v.append(f"dangling next state {y} at (s{s},a{a})")
                if not (0.0 < p <= 1.0):
                    v.append(f"probability {p:g} outside (0,1] at (s{s},a{a})")
                if not math.isfinite(c):
                    v.append(f"non-finite cost at (s{s},a{a})")
                total += p
                if not template and s == goal:
                    if y != goal or c != 0.0:
                        v.append(f"goal {goal} is not absorbing with zero cost at action a{a}")
                elif c <= 0.0:
                    v.append(f"non-positive cost {c:g} at (s{s},a{a})")
            if abs(total - 1.0) > PROB_TOL:
                v.append(f"probability mass {total:g} != 1 at (s{s},a{a})")
    return rep


# -- graph utilities -----------------------------------------------------------

def k_neighborhood(model: SparseSSP, sources: Iterable[int], k: int) -> set[int]:
    """States reachable from ``sources`` in at most ``k`` positive-probability steps."""
    frontier = list(dict.fromkeys(int(s) for s in sources))
    seen = set(frontier)
    succ = model.successors
    for _ in range(k):
        nxt = []
        for u in frontier:
            for y in succ[u]:
                if y not in seen:
                    seen.add(y)
                    nxt.append(y)
        if not nxt:
            break
        frontier = nxt
    return seen


def backward_k_neighborhood(model: SparseSSP, sources: Iterable[int], k: int) -> set[int]:
    """States from which some source is reachable in at most ``k`` steps."""
    frontier = list(dict.fromkeys(int(s) for s in sources))
    seen = set(frontier)
    pred = model.predecessors
    for _ in range(k):
        nxt = []
        for u in frontier:
            for y in pred[u]:
                if y not in seen:
                    seen.add(y)
                    nxt.append(y)
        if not nxt:
            break
        frontier = nxt
    return seen


@dataclass
class BFSResult:
    states: set[int]
    depth: int  # smallest depth at which the stop condition held
    layers: list[list[int]]


def backward_bfs(
    model: SparseSSP,
    targets: Iterable[int],
    stop: Callable[[set[int]], bool],
    margin: int,
    depth_cap: int | None = None,
) -> BFSResult:
    """Breadth-first search backwards along transitions from ``targets``.

    The search runs until ``stop(visited)`` first holds at some depth ``D``
    and then adds ``margin`` further layers. Raises :class:`IncompleteCoverage`
    when the condition never holds within ``depth_cap`` layers (default: four
    times the model's diameter estimate, at most ``n``).
    """
    layer = list(dict.fromkeys(int(t) for t in targets))
    if not layer:
        raise EmptyTargets("backward_bfs needs at least one target")
    if depth_cap is None:
        est = model.diameter_estimate
        depth_cap = min(model.n, 4 * est) if est > 0 else model.n
    seen = set(layer)
    layers = [layer]
    pred = model.predecessors
    depth = 0
    covered_at = 0 if stop(seen) else None
    while True:
        if covered_at is not None and depth >= covered_at + margin:
            break
        if covered_at is None and depth >= depth_cap:
            raise IncompleteCoverage(seen, depth)
        nxt = []
        for u in layer:
            for y in pred[u]:
                if y not in seen:
                    seen.add(y)
                    nxt.append(y)
        if not nxt:
            if covered_at is None:
                raise IncompleteCoverage(seen, depth)
            break
        depth += 1
        layer = nxt
        layers.append(layer)
        if covered_at is None and stop(seen):
            covered_at = depth
    return BFSResult(states=seen, depth=covered_at, layers=layers)


def contains_all(required: Sequence[int]) -> Callable[[set[int]], bool]:
    req = [int(r) for r in required]
    return lambda seen: all(r in seen for r in req)


# -- local problems ------------------------------------------------------------

@dataclass
class LocalSSP:
    """A region of a model turned into its own SSP.

    Local ids ``0..len(states)-1`` are the non-target region members in
    ascending ground order, ``terminal`` collects every transition leaving the
    region and ``goal`` is the merged target set.
    """

    model: SparseSSP
    states: np.ndarray
    targets: np.ndarray
    region: np.ndarray
    terminal: int
    goal: int
    exit_cost: float
    index: dict[int, int]

    def local_of(self, x: int) -> int:
        return self.index[x]


def default_exit_cost(model: SparseSSP) -> float:
    return model.c_max * model.n * 2.0


def gather_outcomes(model: SparseSSP, rows: np.ndarray):
    """Flat outcome indices of ``rows`` and the position in ``rows`` each belongs to."""
    rows = np.asarray(rows, dtype=np.int64)
    lo = model.out_ptr[rows]
    cnt = model.out_ptr[rows + 1] - lo
    owner = np.repeat(np.arange(len(rows), dtype=np.int64), cnt)
    flat = np.repeat(lo - np.cumsum(cnt) + cnt, cnt) + np.arange(int(cnt.sum()), dtype=np.int64)
    return flat, owner


def restrict_to_region(
    model: SparseSSP,
    region: Iterable[int],
    targets: Iterable[int],
    exit_cost: float | None = None,
) -> LocalSSP:
    """Build the local SSP over ``region`` with ``targets`` merged into its goal.

    Outcomes leaving the region go to a synthetic terminal at cost
    ``exit_cost``; the terminal drains into the goal at the same cost.
    """
    tarr = np.unique(np.fromiter((int(t) for t in targets), dtype=np.int64))
    if len(tarr) == 0:
        raise EmptyTargets("restrict_to_region needs at least one target")
    rarr = np.unique(np.fromiter((int(r) for r in region), dtype=np.int64))
    if not np.all(np.isin(tarr, rarr)):
        raise ValueError("targets must lie inside the region")
    if exit_cost is None:
        exit_cost = default_exit_cost(model)
    if exit_cost <= 0:
        raise ValueError("exit_cost must be positive")
    states = np.setdiff1d(rarr, tarr, assume_unique=True)
    k = len(states)
    terminal, goal = k, k + 1
    loc = np.full(model.n, -1, dtype=np.int64)
    loc[states] = np.arange(k)
    loc[tarr] = goal

    # p <= 0 outcomes never exist in a built model, so only the merge is needed
    rows, cnt, out_ptr, nxt, prob, cost = _k.restrict_pass(
        model.act_ptr.astype(np.int64, copy=False), model.out_ptr.astype(np.int64, copy=False),
        model.out_next.astype(np.int64, copy=False), model.out_prob.astype(np.float64, copy=False),
        model.out_cost.astype(np.float64, copy=False), states, loc, terminal, float(exit_cost))
    n_rows = len(rows)
    out_ptr = np.concatenate([out_ptr, [out_ptr[-1] + 1, out_ptr[-1] + 2]])
    nxt = np.concatenate([nxt, [goal, goal]])
    prob = np.concatenate([prob, [1.0, 1.0]])
    cost = np.concatenate([cost, [float(exit_cost), 0.0]])
    act_ptr = np.zeros(k + 3, dtype=np.int64)
    np.cumsum(cnt, out=act_ptr[1 : k + 1])
    act_ptr[k + 1] = n_rows + 1
    act_ptr[k + 2] = n_rows + 2
    if model.action_tag is not None:
        tags = np.concatenate([model.action_tag[rows], [-1, -1]])
    else:
        tags = np.full(n_rows + 2, -1, dtype=np.int64)
    labels = None
    if model.labels is not None:
        lab = model.labels
        labels = np.concatenate([lab[states], np.full((2,) + lab.shape[1:], -1, dtype=np.int64)])
    local = SparseSSP(act_ptr=act_ptr, out_ptr=out_ptr, out_next=nxt, out_prob=prob, out_cost=cost,
                      goal=goal, action_tag=tags.astype(np.int64), labels=labels)
    index = dict(zip(states.tolist(), range(k)))
    for t in tarr.tolist():
        index[t] = goal
    return LocalSSP(
        model=local,
        states=states,
        targets=tarr,
        region=rarr,
        terminal=terminal,
        goal=goal,
        exit_cost=float(exit_cost),
        index=index,
    )


def proper_states(model: SparseSSP, goal: int | None = None) -> np.ndarray:
    """Boolean mask of states from which some policy reaches the goal w.p. 1.

    Iteratively discards states that cannot reach the goal using only
    actions whose outcomes all stay among the surviving states.
    """
    goal = model.goal if goal is None else goal
    n = model.n
    alive = np.ones(n, dtype=bool)
    rows_of = model.state_rows
    outs = model.row_outcomes
    while True:
        ok_rows: list[list[int]] = [[] for _ in range(n)]
        for x in range(n):
            if not alive[x] or x == goal:
                continue
            for r in rows_of[x]:
                ys = outs[r][0]
                if all(alive[y] for y in ys):
                    ok_rows[x].append(r)
        # backward reachability of the goal through admissible rows
        rpred: list[list[int]] = [[] for _ in range(n)]
        for x in range(n):
            for r in ok_rows[x]:
                for y in outs[r][0]:
                    rpred[y].append(x)
        reach = np.zeros(n, dtype=bool)
        reach[goal] = True
        q = deque([goal])
        while q:
            u = q.popleft()
            for x in rpred[u]:
                if not reach[x]:
                    reach[x] = True
                    q.append(x)
        if np.array_equal(reach, alive):
            return alive
        alive = reach
