"""Option-based abstraction of an SSP: cluster, link, repair, prune.

A level is built in four passes over the model below it:

1. ``cluster`` pairs each state with the unmarked peer sharing the most
   successors (predecessors of successors are the candidate peers).
2. ``generate_link_candidates`` proposes a directed link between every two
   clusters within ``k`` transitions of each other.
3. ``repair`` solves a local SSP per link and keeps the resulting option if
   its cost and success probability are nearly the same from every member of
   the source cluster; otherwise the source pair is split into singletons.
4. ``prune`` keeps the links to clusters one transition away plus the
   cheapest others, up to ``p`` per abstract state.

Abstract models are goal-free and deterministic: every abstract action has a
single outcome (the target cluster) with probability one and cost equal to
the option's mean expected cost over the source cluster.
"""
from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mdp import (
    IncompleteCoverage,
    SparseSSP,
    SSPError,
    backward_bfs,
    backward_k_neighborhood,
    contains_all,
    gather_outcomes,
    k_neighborhood,
    restrict_to_region,
)
from .solvers import dijkstra, solve_ips

INF = float("inf")
DENSE_LIMIT = 256


class NoSolution(SSPError):
    """The repair region never covered the source cluster."""


class DegenerateLevel(SSPError):
    def __init__(self, depth: int, n_states: int):
        super().__init__(f"level {depth + 1} does not reduce the state count ({n_states} states)")
        self.depth = depth
        self.n_states = n_states


@dataclass(frozen=True)
class BuildParams:
    """Knobs of one abstraction level.

    k : link candidates are clusters within ``k`` transitions.
    p : abstract actions kept per state (critical links are always kept).
    eps, mu : allowed spread of option cost and success probability.
    margin : extra backward-BFS layers around each repair region.
    """

    k: int = 1
    p: int = 4
    eps: float = 1.0
    mu: float = 0.1
    margin: int = 2
    exit_cost: float | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.p < 0 or self.margin < 0:
            raise ValueError("p and margin must be nonnegative")
        if self.eps < 0 or self.mu < 0:
            raise ValueError("eps and mu must be nonnegative")


@dataclass
class Partition:
    """Disjoint cover of the states below: ``members[c]`` and its inverse ``cluster_of``."""

    cluster_of: np.ndarray
    members: list[tuple[int, ...]]

    @property
    def n_clusters(self) -> int:
        return len(self.members)

    @classmethod
    def from_members(cls, n: int, members) -> "Partition":
        """Canonical partition: clusters sorted by their smallest member."""
        ms = sorted((tuple(sorted(int(x) for x in m)) for m in members), key=lambda t: t[0])
        cof = np.full(n, -1, dtype=np.int64)
        for c, m in enumerate(ms):
            cof[list(m)] = c
        if np.any(cof < 0):
            raise ValueError("members do not cover every state")
        if sum(len(m) for m in ms) != n:
            raise ValueError("members overlap")
        return cls(cluster_of=cof, members=ms)

    @classmethod
    def singletons(cls, n: int) -> "Partition":
        return cls(cluster_of=np.arange(n, dtype=np.int64), members=[(x,) for x in range(n)])

    def check(self, n: int) -> None:
        seen = np.zeros(n, dtype=np.int64)
        for c, m in enumerate(self.members):
            if not m:
                raise ValueError(f"cluster {c} is empty")
            for x in m:
                seen[x] += 1
                if self.cluster_of[x] != c:
                    raise ValueError(f"cluster_of[{x}] disagrees with members")
        if np.any(seen != 1):
            raise ValueError("clusters do not form a partition")


@dataclass(frozen=True)
class ConnectivityStats:
    costs: tuple[float, ...]
    success: tuple[float, ...]

    @property
    def cost_spread(self) -> float:
        return max(self.costs) - min(self.costs)

    @property
    def prob_spread(self) -> float:
        return max(self.success) - min(self.success)

    @property
    def mean_cost(self) -> float:
        return float(np.mean(self.costs))


@dataclass(eq=False)
class OptionDef:
    """A local policy from ``initiation`` to ``termination`` over ``region``.

    ``states``/``actions`` give the policy on the non-terminating region
    states (action indices local to each state of the model below).
    """

    initiation: tuple[int, ...]
    termination: tuple[int, ...]
    region: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    stats: ConnectivityStats | None = None
    source: int = -1
    target: int = -1

    @property
    def expected_cost(self) -> float:
        return self.stats.mean_cost

    @cached_property
    def policy(self) -> dict[int, int]:
        return dict(zip(self.states.tolist(), self.actions.tolist()))

    @cached_property
    def region_set(self) -> frozenset[int]:
        return frozenset(self.region.tolist())

    @cached_property
    def termination_set(self) -> frozenset[int]:
        return frozenset(self.termination)


@dataclass(eq=False)
class AbstractionLevel:
    """Partition of the level below, the deterministic abstract SSP and its options.

    ``options[r]`` is the option behind abstract action row ``r``.
    """

    partition: Partition
    abstract_model: SparseSSP
    options: list[OptionDef]
    params: BuildParams
    stats: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return self.abstract_model.n

    def option_of(self, x: int, a: int) -> OptionDef:
        return self.options[self.abstract_model.row(x, a)]


@dataclass(eq=False)
class Hierarchy:
    """Ground model plus stacked levels; level ``i`` partitions level ``i-1``."""

    ground: SparseSSP
    levels: list[AbstractionLevel]
    level0: bool = False
    requested: int = 0

    @property
    def depth(self) -> int:
        return len(self.levels)

    def model_at(self, i: int) -> SparseSSP:
        return self.ground if i == 0 else self.levels[i - 1].abstract_model

    @cached_property
    def ground_maps(self) -> list[np.ndarray]:
        """``ground_maps[i][x]`` is the level-``i`` image of ground state ``x``."""
        maps = [np.arange(self.ground.n, dtype=np.int64)]
        for lvl in self.levels:
            maps.append(lvl.partition.cluster_of[maps[-1]])
        return maps

    def image(self, x: int, level: int) -> int:
        return int(self.ground_maps[level][x])

    def preimage(self, level: int, cluster: int) -> list[int]:
        """Ground states mapping to ``cluster`` at ``level``."""
        cur = [int(cluster)]
        for i in range(level, 0, -1):
            mem = self.levels[i - 1].partition.members
            cur = [x for c in cur for x in mem[c]]
        return sorted(cur)


# -- clustering ----------------------------------------------------------------

def _cluster_succ(model: SparseSSP) -> list[frozenset[int]]:
    """Successor sets without zero-cost self-loops (the goal's absorbing loop)."""
    out = []
    rows_of = model.state_rows
    outs = model.row_outcomes
    for x, ys in enumerate(model.successors):
        s = set(ys)
        if x in s:
            loop_costs = [c for r in rows_of[x] for y, c in zip(outs[r][0], outs[r][2]) if y == x]
            if all(c == 0.0 for c in loop_costs):
                s.discard(x)
        out.append(frozenset(s))
    return out


def peer_overlaps(model: SparseSSP, x: int, marked=()) -> dict[int, int]:
    """Candidate peers P(x) of ``x`` (minus ``marked``) with their successor-overlap counts."""
    succ = _cluster_succ(model)
    pred = _preds_from(succ)
    skip = set(marked)
    cand = {}
    for s in succ[x]:
        for y in pred[s]:
            if y != x and y not in skip:
                cand[y] = len(succ[x] & succ[y])
    return dict(sorted(cand.items()))


def _preds_from(succ: list[frozenset[int]]) -> list[list[int]]:
    pred: list[list[int]] = [[] for _ in succ]
    for x, ys in enumerate(succ):
        for y in ys:
            pred[y].append(x)
    return pred


def cluster(model: SparseSSP) -> Partition:
    """Pair every state with the unmarked peer sharing the most successors.

    States are visited in ascending id; ties go to the lowest peer id and a
    state without unmarked peers becomes a singleton.
    """
    n = model.n
    succ = _cluster_succ(model)
    pred = _preds_from(succ)
    marked = [False] * n
    members = []
    for x in range(n):
        if marked[x]:
            continue
        marked[x] = True
        sx = succ[x]
        best, best_ov = -1, -1
        seen = set()
        for s in sx:
            for y in pred[s]:
                if marked[y] or y in seen:
                    continue
                seen.add(y)
                ov = len(sx & succ[y])
                if ov > best_ov or (ov == best_ov and y < best):
                    best, best_ov = y, ov
        if best >= 0:
            marked[best] = True
            members.append((x, best))
        else:
            members.append((x,))
    return Partition.from_members(n, members)


# -- link candidates ------------------------------------------------------------

def _near_clusters(model, members, cluster_of, k) -> set[int]:
    """Clusters with a state within ``k`` forward transitions of ``members``."""
    return {int(cluster_of[y]) for y in k_neighborhood(model, members, k)}


def generate_link_candidates(model: SparseSSP, partition: Partition, k: int) -> list[tuple[int, int]]:
    """Directed cluster pairs within ``k`` transitions, both directions, ascending."""
    pairs = set()
    cof = partition.cluster_of
    for c, mem in enumerate(partition.members):
        for d in _near_clusters(model, mem, cof, k):
            if d != c:
                pairs.add((c, d))
                pairs.add((d, c))
    return sorted(pairs)


# -- options ---------------------------------------------------------------------

def build_option(model: SparseSSP, source, target, margin: int, exit_cost: float | None = None) -> OptionDef:
    """Solve the local SSP that drives ``source`` states into ``target``.

    Raises :class:`NoSolution` when the backward search from ``target``
    never reaches every source state.
    """
    source = tuple(sorted(int(x) for x in source))
    target = tuple(sorted(int(y) for y in target))
    if set(source) & set(target):
        raise ValueError("source and target clusters must differ")
    try:
        bfs = backward_bfs(model, target, contains_all(source), margin)
    except IncompleteCoverage as exc:
        raise NoSolution(f"no backward path from {target} covers {source}") from exc
    local = restrict_to_region(model, bfs.states, target, exit_cost)
    lm = local.model
    res = dijkstra(lm, allow_partial=False) if lm.is_deterministic else solve_ips(lm)
    k = len(local.states)
    opt = OptionDef(
        initiation=source,
        termination=target,
        region=local.region,
        states=local.states,
        actions=res.policy[:k].copy(),
    )
    return opt


def _option_chain(model: SparseSSP, option: OptionDef):
    """Absorbing chain of ``option`` over its non-terminating region states.

    Returns ``I - Q`` (dense for small regions), the expected one-step cost
    (ground costs, exits included), the one-step success probability and the
    local index of each ground state (-1 outside).
    """
    states = option.states
    m = len(states)
    loc = np.full(model.n, -1, dtype=np.int64)
    loc[states] = np.arange(m)
    is_term = np.zeros(model.n, dtype=bool)
    is_term[list(option.termination)] = True
    flat, src = gather_outcomes(model, model.act_ptr[states] + option.actions)
    ys = model.out_next[flat]
    ps = model.out_prob[flat]
    r = np.bincount(src, weights=ps * model.out_cost[flat], minlength=m)
    b = np.bincount(src, weights=np.where(is_term[ys], ps, 0.0), minlength=m)
    dst = loc[ys]
    inside = dst >= 0
    if m <= DENSE_LIMIT:
        A = np.eye(m)
        np.add.at(A, (src[inside], dst[inside]), -ps[inside])
    else:
        Q = sp.csr_matrix((ps[inside], (src[inside], dst[inside])), shape=(m, m))
        A = (sp.identity(m, format="csc") - Q.tocsc())
    return A, r, b, loc


def _absorbing_solve(A, rhs):
    if isinstance(A, np.ndarray):
        return np.linalg.solve(A, rhs)
    return spla.spsolve(A, rhs)


def option_statistics(model: SparseSSP, option: OptionDef) -> ConnectivityStats:
    """Exact expected cost and success probability from each initiation state."""
    A, r, b, loc = _option_chain(model, option)
    sol = np.atleast_2d(_absorbing_solve(A, np.column_stack([r, b])))
    pick = loc[list(option.initiation)].tolist()
    costs = tuple(float(sol[i, 0]) for i in pick)
    succ = tuple(float(min(1.0, max(0.0, sol[i, 1]))) for i in pick)
    return ConnectivityStats(costs=costs, success=succ)


def check_connectivity(option: OptionDef, model: SparseSSP, eps: float, mu: float) -> tuple[ConnectivityStats, bool]:
    """(eps, mu) test: cost and success-probability spreads over the initiation set."""
    stats = option_statistics(model, option)
    if len(option.initiation) == 1:
        return stats, True
    return stats, stats.cost_spread <= eps and stats.prob_spread <= mu


# -- repair ------------------------------------------------------------------------

@dataclass
class RepairResult:
    partition: Partition
    links: list[OptionDef]  # source/target are ids in ``partition``
    splits: int
    dropped: int
    solved: int


def repair(model: SparseSSP, partition: Partition, queue, params: BuildParams) -> RepairResult:
    """Drain the link queue, keeping (eps, mu)-connected options and splitting failing pairs."""
    n = model.n
    members: dict[int, tuple[int, ...]] = dict(enumerate(partition.members))
    cof = partition.cluster_of.copy()
    next_id = len(partition.members)
    q = deque(tuple(e) for e in queue)
    pending = set(q)
    links: dict[tuple[int, int], OptionDef] = {}
    splits = dropped = solved = 0

    def enqueue(a, b):
        if a != b and (a, b) not in pending and (a, b) not in links:
            pending.add((a, b))
            q.append((a, b))

    while q:
        src, tgt = q.popleft()
        pending.discard((src, tgt))
        if src not in members or tgt not in members:
            continue
        try:
            opt = build_option(model, members[src], members[tgt], params.margin, params.exit_cost)
        except NoSolution:
            dropped += 1
            continue
        solved += 1
        stats, ok = check_connectivity(opt, model, params.eps, params.mu)
        opt.stats = stats
        if ok:
            opt.source, opt.target = src, tgt
            links[(src, tgt)] = opt
            continue
        # split the failing pair; links touching it are rebuilt for both halves
        splits += 1
        old = members.pop(src)
        for key in [key for key in links if src in key]:
            del links[key]
        halves = []
        for x in old:
            members[next_id] = (x,)
            cof[x] = next_id
            halves.append(next_id)
            next_id += 1
        for h in halves:
            (x,) = members[h]
            near = {int(cof[y]) for y in k_neighborhood(model, [x], params.k)}
            near |= {int(cof[y]) for y in _backward_near(model, x, params.k)}
            for c in sorted(near):
                enqueue(h, c)
                enqueue(c, h)

    # canonical renumbering: clusters ordered by smallest member
    order = sorted(members, key=lambda c: members[c][0])
    remap = {c: i for i, c in enumerate(order)}
    final = Partition(cluster_of=np.array([remap[int(c)] for c in cof], dtype=np.int64),
                      members=[members[c] for c in order])
    out = []
    for (s, t), opt in links.items():
        opt.source, opt.target = remap[s], remap[t]
        out.append(opt)
    out.sort(key=lambda o: (o.source, o.target))
    final.check(n)
    return RepairResult(partition=final, links=out, splits=splits, dropped=dropped, solved=solved)


def _backward_near(model: SparseSSP, x: int, k: int) -> set[int]:
    return backward_k_neighborhood(model, [x], k)


# -- assembling a level ------------------------------------------------------------

def _assemble(partition: Partition, links: list[OptionDef], params: BuildParams, stats=None) -> AbstractionLevel:
    n = partition.n_clusters
    acts: list[list] = [[] for _ in range(n)]
    tags: list[list[int]] = [[] for _ in range(n)]
    per_state: list[list[OptionDef]] = [[] for _ in range(n)]
    for o in sorted(links, key=lambda o: (o.source, o.target)):
        acts[o.source].append([(o.target, 1.0, o.expected_cost)])
        tags[o.source].append(o.target)
        per_state[o.source].append(o)
    model = SparseSSP.from_lists(acts, goal=None, tags=tags)
    options = [o for lst in per_state for o in lst]
    return AbstractionLevel(partition=partition, abstract_model=model, options=options,
                            params=params, stats=dict(stats or {}))


def critical_targets(model_below: SparseSSP, partition: Partition, c: int) -> set[int]:
    """Clusters holding a state one transition away from some state of cluster ``c``."""
    cof = partition.cluster_of
    succ = model_below.successors
    return {int(cof[y]) for x in partition.members[c] for y in succ[x]} - {c}


def prune(level: AbstractionLevel, model_below: SparseSSP, p: int) -> AbstractionLevel:
    """Keep critical actions plus the cheapest others, ``max(p, #critical)`` per state."""
    keep = []
    part = level.partition
    m = level.abstract_model
    for c in range(m.n):
        opts = [level.options[r] for r in m.state_rows[c]]
        crit_t = critical_targets(model_below, part, c)
        crit = [o for o in opts if o.target in crit_t]
        rest = sorted((o for o in opts if o.target not in crit_t), key=lambda o: (o.expected_cost, o.target))
        budget = max(p, len(crit))
        keep.extend(crit + rest[: budget - len(crit)])
    stats = dict(level.stats)
    stats["actions_before_prune"] = m.n_actions
    return _assemble(part, keep, level.params, stats)


def _build_from_partition(model: SparseSSP, partition: Partition, params: BuildParams) -> AbstractionLevel:
    t0 = time.perf_counter()
    queue = generate_link_candidates(model, partition, params.k)
    rep = repair(model, partition, queue, params)
    level = _assemble(rep.partition, rep.links, params, {
        "candidates": len(queue), "splits": rep.splits, "dropped": rep.dropped, "solved": rep.solved})
    level = prune(level, model, params.p)
    level.stats["build_time"] = time.perf_counter() - t0
    return level


def build_abstraction(model: SparseSSP, params: BuildParams | None = None) -> AbstractionLevel:
    """Cluster, generate links, repair and prune one level on top of ``model``."""
    params = params or BuildParams()
    t0 = time.perf_counter()
    part = cluster(model)
    level = _build_from_partition(model, part, params)
    level.stats["build_time"] = time.perf_counter() - t0
    return level


def build_level0(model: SparseSSP, params: BuildParams | None = None) -> AbstractionLevel:
    """Deterministic shortest-path model over the same states (singleton clusters)."""
    params = params or BuildParams()
    return _build_from_partition(model, Partition.singletons(model.n), params)


def build_hierarchy(model: SparseSSP, levels: int, params=None, level0: bool = False,
                    strict: bool = False) -> Hierarchy:
    """Stack ``levels`` abstraction levels (``levels=0`` means level-0 only).

    ``params`` is one :class:`BuildParams` for every level or a list with one
    entry per level. Construction stops early when a level fails to shrink
    the state count; ``strict=True`` raises :class:`DegenerateLevel` instead.
    """
    if levels < 0:
        raise ValueError("levels must be nonnegative")
    if levels == 0:
        level0 = True
    n_build = max(levels, 1) if not level0 else levels + 1
    if params is None:
        plist = [BuildParams()] * n_build
    elif isinstance(params, BuildParams):
        plist = [params] * n_build
    else:
        plist = list(params)
        if len(plist) < n_build:
            plist += [plist[-1]] * (n_build - len(plist))
    built: list[AbstractionLevel] = []
    below = model
    for i in range(n_build):
        if i == 0 and level0:
            lvl = build_level0(below, plist[i])
        else:
            lvl = build_abstraction(below, plist[i])
            if lvl.n_states >= below.n:
                if strict:
                    raise DegenerateLevel(len(built), lvl.n_states)
                lvl.stats["degenerate"] = True
                # an unreduced first level still gives the planner a deterministic graph
                if not built:
                    built.append(lvl)
                break
        built.append(lvl)
        below = lvl.abstract_model
    return Hierarchy(ground=model, levels=built, level0=level0, requested=n_build)
