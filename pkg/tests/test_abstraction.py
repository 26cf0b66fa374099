from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import absorbing, bellman_ford
from sspabs.abstraction import (
    BuildParams,
    DegenerateLevel,
    NoSolution,
    Partition,
    _assemble,
    build_abstraction,
    build_hierarchy,
    build_level0,
    build_option,
    check_connectivity,
    cluster,
    generate_link_candidates,
    option_statistics,
    peer_overlaps,
    prune,
    repair,
)
from sspabs.domains import make_chain, make_congested, make_gridworld, parse_map, random_ssp
from sspabs.mdp import SparseSSP, validate_ssp
from sspabs.solvers import dijkstra, solve_vi


def chain_partition():
    return Partition.from_members(4, [(0, 1), (2, 3)])


# -- clustering --------------------------------------------------------------------

def test_two_chain_has_no_peers():
    m = make_chain(2).with_goal(1)
    assert cluster(m).members == [(0,), (1,)]


@pytest.mark.parametrize("w,x", [(3, 4), (5, 12)])
def test_interior_cell_pairs_with_diagonal_peer(w, x):
    m = make_gridworld(w, w, 0.7)
    ov = peer_overlaps(m, x)
    diag = {x - w - 1, x - w + 1, x + w - 1, x + w + 1}
    assert all(ov[d] == 2 for d in diag)
    if w == 5:
        assert all(ov[y] == 1 for y in (x - 2 * w, x + 2 * w, x - 2, x + 2))
    best = max(ov.values())
    assert min(y for y, v in ov.items() if v == best) in diag


@given(st.integers(1, 60), st.integers(0, 10**6))
def test_cluster_is_partition_of_small_clusters(n, seed):
    m = random_ssp(n, seed=seed, goal=0, absorbing=seed % 2 == 0)
    p = cluster(m)
    p.check(n)
    assert all(1 <= len(c) <= 2 for c in p.members)


def test_goal_self_loop_is_ignored_for_overlap():
    m = make_chain(3).with_goal(2)
    # 1 -> 2 and 2 -> 2 (zero cost) must not make 1 and 2 peers through the loop
    assert 1 not in peer_overlaps(m, 2)


# -- link candidates -------------------------------------------------------------------

def test_chain_link_candidates(chain4):
    assert generate_link_candidates(chain4, chain_partition(), 1) == [(0, 1), (1, 0)]


def test_disconnected_clusters_are_not_linked():
    m = SparseSSP.from_lists([[[(0, 1.0, 1.0)]], [[(1, 1.0, 1.0)]]])
    assert generate_link_candidates(m, Partition.singletons(2), 3) == []


def test_larger_k_gives_superset(grid10):
    part = cluster(grid10)
    a = set(generate_link_candidates(grid10, part, 1))
    b = set(generate_link_candidates(grid10, part, 2))
    assert a < b


# -- options --------------------------------------------------------------------------

def test_chain_option_moves_right(chain4):
    opt = build_option(chain4, (0, 1), (2, 3), 0)
    assert opt.policy == {0: 0, 1: 0}
    st_ = option_statistics(chain4, opt)
    assert st_.costs == (2.0, 1.0) and st_.success == (1.0, 1.0)


def test_option_without_path_has_no_solution(chain4):
    with pytest.raises(NoSolution):
        build_option(chain4, (2, 3), (0, 1), 2)


def test_wall_blocks_option():
    g = parse_map("type octile\nheight 1\nwidth 3\nmap\n.@.\n")
    m = make_congested(g, None, 0.7)
    with pytest.raises(NoSolution):
        build_option(m, (0,), (1,), 2)


def test_diagonal_pair_option_beats_single_step(grid10):
    src, tgt = (44, 55), (46, 57)
    opt = build_option(grid10, src, tgt, 2)
    stats = option_statistics(grid10, opt)
    for x, succ in zip(src, stats.success):
        one_step = max(sum(p for y, p, _ in grid10.outcomes(x, a) if y in tgt) for a in range(4))
        assert succ >= one_step


def test_option_statistics_match_absorbing_oracle(grid10):
    opt = build_option(grid10, (44, 55), (46, 57), 2)
    stats = option_statistics(grid10, opt)
    cost, hit = absorbing(grid10, opt.policy, opt.states.tolist(), set(opt.termination))
    pos = {x: i for i, x in enumerate(opt.states.tolist())}
    for x, c, s in zip(opt.initiation, stats.costs, stats.success):
        assert c == pytest.approx(cost[pos[x]], abs=1e-9)
        assert s == pytest.approx(hit[pos[x]], abs=1e-9)


def test_connectivity_thresholds(chain4):
    opt = build_option(chain4, (0, 1), (2, 3), 0)
    assert check_connectivity(opt, chain4, 0.5, 0.1)[1] is False
    stats, ok = check_connectivity(opt, chain4, 1.0, 0.1)
    assert ok and stats.cost_spread == 1.0 and stats.prob_spread == 0.0


def test_singleton_always_passes(grid10):
    opt = build_option(grid10, (44,), (46,), 2)
    stats, ok = check_connectivity(opt, grid10, 0.0, 0.0)
    assert ok and stats.cost_spread == 0.0 and stats.prob_spread == 0.0


# -- repair ------------------------------------------------------------------------

def test_repair_singletons_never_split(grid10):
    part = Partition.singletons(grid10.n)
    rep = repair(grid10, part, generate_link_candidates(grid10, part, 1), BuildParams(eps=0.0, mu=0.0))
    assert rep.splits == 0
    assert len(rep.links) == rep.solved


def test_repair_splits_chain_pair(chain4):
    part = chain_partition()
    rep = repair(chain4, part, generate_link_candidates(chain4, part, 1), BuildParams(eps=0.5, k=1))
    assert rep.splits == 1
    assert rep.partition.members == [(0,), (1,), (2, 3)]
    assert {(o.source, o.target) for o in rep.links} == {(0, 1), (1, 2)}


def test_repair_keeps_chain_pair_at_unit_eps(chain4):
    part = chain_partition()
    rep = repair(chain4, part, generate_link_candidates(chain4, part, 1), BuildParams(eps=1.0, k=1))
    assert rep.splits == 0 and rep.partition.members == [(0, 1), (2, 3)]
    assert [(o.source, o.target) for o in rep.links] == [(0, 1)]


def test_repair_output_rechecks(grid10):
    params = BuildParams(k=1, eps=1.0, mu=0.1)
    part = cluster(grid10)
    rep = repair(grid10, part, generate_link_candidates(grid10, part, 1), params)
    rep.partition.check(grid10.n)
    for o in rep.links:
        assert check_connectivity(o, grid10, params.eps, params.mu)[1]
        assert o.initiation == rep.partition.members[o.source]
        assert o.termination == rep.partition.members[o.target]


# -- prune ------------------------------------------------------------------------

def _unpruned(model, params):
    part = cluster(model)
    rep = repair(model, part, generate_link_candidates(model, part, params.k), params)
    return _assemble(rep.partition, rep.links, params)


def _critical_oracle(model, part, c):
    out = set()
    for x in part.members[c]:
        for a in range(model.num_actions(x)):
            for y, p, _ in model.outcomes(x, a):
                if p > 0 and part.cluster_of[y] != c:
                    out.add(int(part.cluster_of[y]))
    return out


@pytest.mark.parametrize("p", [0, 2, 4])
def test_prune_matches_resort_oracle(grid10, p):
    params = BuildParams(k=2, eps=4.0)
    full = _unpruned(grid10, params)
    pruned = prune(full, grid10, p)
    part = full.partition
    for c in range(part.n_clusters):
        opts = [full.options[r] for r in full.abstract_model.state_rows[c]]
        crit = _critical_oracle(grid10, part, c)
        keep = {o.target for o in opts if o.target in crit}
        others = sorted((o.expected_cost, o.target) for o in opts if o.target not in crit)
        keep |= {t for _, t in others[: max(p, len(keep)) - len(keep)]}
        got = set(pruned.abstract_model.tags_for(c))
        assert got == keep


def test_prune_identity_for_large_p(grid10):
    full = _unpruned(grid10, BuildParams(k=2, eps=4.0))
    pruned = prune(full, grid10, 10_000)
    assert pruned.abstract_model.to_lists() == full.abstract_model.to_lists()


# -- levels --------------------------------------------------------------------------

def test_one_state_model():
    m = SparseSSP.from_lists([[[(0, 1.0, 0.0)]]], goal=0)
    lvl = build_abstraction(m)
    assert lvl.n_states == 1 and lvl.abstract_model.n_actions == 0


def test_level_invariants(grid10_h1, grid10):
    lvl = grid10_h1.levels[0]
    am = lvl.abstract_model
    lvl.partition.check(grid10.n)
    assert lvl.n_states < grid10.n
    assert am.is_deterministic
    assert validate_ssp(am, template=True).ok
    for r, o in enumerate(lvl.options):
        (y, p, c), = am.outcomes(am.row_state[r], r - am.act_ptr[am.row_state[r]])
        assert y == o.target and p == 1.0
        assert c == pytest.approx(float(np.mean(o.stats.costs)), abs=1e-9) and c > 0
        assert set(o.initiation) == set(lvl.partition.members[o.source])
        assert set(o.initiation) <= o.region_set
        assert check_connectivity(o, grid10, lvl.params.eps, lvl.params.mu)[1]


def test_options_terminate_with_probability_one(grid10_h1, grid10):
    for o in grid10_h1.levels[0].options[::7]:
        inside = o.states.tolist()
        outside = set(range(grid10.n)) - set(inside)
        _, hit = absorbing(grid10, o.policy, inside, outside)
        assert np.allclose(hit, 1.0, atol=1e-9)


def test_k2_has_at_least_as_many_unpruned_actions():
    m = make_gridworld(50, 50, 0.7)
    a = build_abstraction(m, BuildParams(k=1, eps=4.0))
    b = build_abstraction(m, BuildParams(k=2, eps=4.0))
    assert b.stats["actions_before_prune"] >= a.stats["actions_before_prune"]


def test_level0_on_deterministic_model_recovers_step_costs():
    m = make_gridworld(6, 6, 1.0)
    lvl = build_level0(m, BuildParams(k=1))
    am = lvl.abstract_model
    assert am.n == m.n and am.is_deterministic
    for x in range(am.n):
        for a in range(am.num_actions(x)):
            (y, _, c), = am.outcomes(x, a)
            assert c == bellman_ford(m.with_goal(y), y)[x] == 1.0


def test_level0_noisy_costs_and_value_factor(grid10):
    lvl = build_level0(grid10, BuildParams(k=1))
    am = lvl.abstract_model
    assert am.out_cost.min() >= 1.0
    v0 = dijkstra(am, goal=0).values
    vs = solve_vi(grid10, goal=0).values
    ratio = v0[1:] / vs[1:]
    # determinising each move at its expected local cost stays within 1/P of the optimum
    assert ratio.max() <= 1 / 0.7 and ratio.min() >= 0.7


def test_hierarchy_shrinks_until_degenerate():
    m = make_gridworld(20, 20, 0.7)
    h = build_hierarchy(m, 4, BuildParams(k=2, eps=4.0))
    sizes = [m.n] + [lvl.n_states for lvl in h.levels]
    assert all(a > b for a, b in zip(sizes, sizes[1:]))
    for i, lvl in enumerate(h.levels, start=1):
        lvl.partition.check(h.model_at(i - 1).n)


def test_two_levels_no_larger_than_one(grid10_h1, grid10_h2):
    assert grid10_h2.levels[-1].n_states <= grid10_h1.levels[-1].n_states


def test_strict_build_raises_on_degenerate_level():
    m = make_chain(2)
    with pytest.raises(DegenerateLevel):
        build_hierarchy(m, 2, strict=True)


def test_build_params_validation():
    with pytest.raises(ValueError):
        BuildParams(k=0)
    with pytest.raises(ValueError):
        BuildParams(eps=-1.0)
    assert BuildParams(eps=math.inf).eps == math.inf
