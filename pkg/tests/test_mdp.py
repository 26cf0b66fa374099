from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import backward_distances, forward_within
from sspabs.abstraction import Partition
from sspabs.domains import make_chain, make_gridworld, random_ssp
from sspabs.mdp import (
    EmptyTargets,
    IncompleteCoverage,
    SparseSSP,
    backward_bfs,
    contains_all,
    default_exit_cost,
    k_neighborhood,
    proper_states,
    restrict_to_region,
    validate_ssp,
)


def grid_id(r, c, w=10):
    return r * w + c


# -- validation ------------------------------------------------------------------

def test_goal_only_model_is_valid():
    m = SparseSSP.from_lists([[[(0, 1.0, 0.0)]]], goal=0)
    assert validate_ssp(m).ok


def test_probability_deficit_is_reported():
    m = SparseSSP.from_lists([[[(1, 0.9, 1.0)]], [[(1, 1.0, 0.0)]]], goal=1)
    rep = validate_ssp(m)
    assert not rep.ok
    assert any("probability mass 0.9" in v and "(s0,a0)" in v for v in rep.violations)


def test_generated_gridworld_is_valid():
    m = make_gridworld(50, 50, 0.7)
    assert validate_ssp(m.with_goal(1234)).ok
    assert validate_ssp(m, template=True).ok


def test_validator_reports_non_absorbing_goal_and_bad_costs():
    m = SparseSSP.from_lists([[[(1, 1.0, 0.0)]], [[(0, 1.0, 1.0)]]], goal=1)
    rep = validate_ssp(m)
    assert any("non-positive cost" in v for v in rep.violations)
    assert any("not absorbing" in v for v in rep.violations)


def test_validator_reports_dangling_ids_without_crashing():
    m = SparseSSP.from_lists([[[(7, 1.0, 1.0)]], [[(1, 1.0, 0.0)]]], goal=1)
    assert any("dangling next state 7" in v for v in validate_ssp(m).violations)


def test_from_lists_merges_duplicate_outcomes():
    m = SparseSSP.from_lists([[[(1, 0.25, 1.0), (1, 0.75, 1.0)]], [[(1, 1.0, 0.0)]]], goal=1)
    assert m.outcomes(0, 0) == [(1, 1.0, 1.0)]


def test_with_goal_rewires_goal_absorbing():
    m = make_chain(4)
    g = m.with_goal(1)
    assert g.outcomes(1, 0) == [(1, 1.0, 0.0)]
    assert g.outcomes(0, 0) == [(1, 1.0, 1.0)]
    assert validate_ssp(g).ok


# -- neighbourhoods ------------------------------------------------------------------

def test_k_neighborhood_on_chain(chain4):
    assert k_neighborhood(chain4, {0}, 1) == {0, 1}
    assert k_neighborhood(chain4, {0}, 3) == {0, 1, 2, 3}


def test_k_neighborhood_interior_grid_cell(grid10):
    x = grid_id(4, 4)
    assert k_neighborhood(grid10, {x}, 1) == {x, x - 10, x + 10, x - 1, x + 1}


@given(st.integers(2, 40), st.integers(0, 10**6), st.integers(0, 4))
def test_k_neighborhood_monotone_and_matches_oracle(n, seed, k):
    m = random_ssp(n, seed=seed, goal=0)
    src = {n // 2}
    a = k_neighborhood(m, src, k)
    assert a == forward_within(m, src, k)
    assert a <= k_neighborhood(m, src, k + 1)


# -- backward BFS ------------------------------------------------------------------

def test_backward_bfs_chain_examples(chain4):
    r = backward_bfs(chain4, [3], contains_all([0]), 0)
    assert r.states == {0, 1, 2, 3} and r.depth == 3
    r = backward_bfs(chain4, [3], contains_all([2]), 1)
    assert r.states == {1, 2, 3} and r.depth == 1


def test_backward_bfs_grid_matches_bruteforce(grid10):
    targets = [grid_id(4, 4), grid_id(5, 5)]
    required = [grid_id(4, 6), grid_id(5, 7)]
    r = backward_bfs(grid10, targets, contains_all(required), 2)
    dist = backward_distances(grid10, targets)
    D = max(dist[x] for x in required)
    assert r.depth == D
    assert r.states == {x for x, d in dist.items() if d <= D + 2}


@given(st.integers(3, 60), st.integers(0, 10**6), st.integers(0, 3))
def test_backward_bfs_closed_under_depth(n, seed, margin):
    m = random_ssp(n, seed=seed, goal=0)
    rng = np.random.default_rng(seed)
    req = [int(rng.integers(n))]
    r = backward_bfs(m, [0], contains_all(req), margin)
    dist = backward_distances(m, [0])
    assert r.depth == dist[req[0]]
    assert r.states == {x for x, d in dist.items() if d <= r.depth + margin}


def test_backward_bfs_incomplete_coverage():
    # 1 cannot reach 0
    m = SparseSSP.from_lists([[[(0, 1.0, 0.0)]], [[(1, 1.0, 1.0)]]], goal=0)
    with pytest.raises(IncompleteCoverage):
        backward_bfs(m, [0], contains_all([1]), 0)


def test_backward_bfs_requires_targets(chain4):
    with pytest.raises(EmptyTargets):
        backward_bfs(chain4, [], contains_all([0]), 0)


# -- region restriction --------------------------------------------------------------

def test_restrict_whole_model_is_identity_up_to_relabeling(chain4):
    loc = restrict_to_region(chain4, range(4), [3])
    lm = loc.model
    assert list(loc.states) == [0, 1, 2]
    for x in (0, 1, 2):
        ((y, p, c),) = lm.outcomes(loc.index[x], 0)
        ((gy, gp, gc),) = chain4.outcomes(x, 0)
        assert loc.index[gy] == y and p == gp and c == gc
    assert lm.outcomes(loc.goal, 0) == [(loc.goal, 1.0, 0.0)]
    assert validate_ssp(lm).ok


def test_restrict_chain_subregion(chain4):
    loc = restrict_to_region(chain4, [1, 2], [2], exit_cost=100.0)
    assert list(loc.states) == [1]
    assert loc.model.outcomes(0, 0) == [(loc.goal, 1.0, 1.0)]
    assert loc.model.outcomes(loc.terminal, 0) == [(loc.goal, 1.0, 100.0)]


def test_restrict_redirects_leaving_mass_to_terminal(grid10):
    x = grid_id(4, 4)
    region = k_neighborhood(grid10, {x}, 1)
    loc = restrict_to_region(grid10, region, [x + 1], exit_cost=50.0)
    lm = loc.model
    i = loc.index[x - 10]  # the cell above x: three of its moves leave the region
    outs = lm.outcomes(i, 0)
    leave = sum(p for y, p, _ in outs if y == loc.terminal)
    assert leave == pytest.approx(0.7 + 0.1 + 0.1)
    assert all(c == 50.0 for y, _, c in outs if y == loc.terminal)
    assert validate_ssp(lm).ok


def test_restrict_repair_region_is_valid(grid10):
    src = [grid_id(4, 4), grid_id(5, 5)]
    tgt = [grid_id(4, 6), grid_id(5, 7)]
    r = backward_bfs(grid10, tgt, contains_all(src), 2)
    loc = restrict_to_region(grid10, r.states, tgt)
    assert loc.exit_cost == default_exit_cost(grid10)
    assert validate_ssp(loc.model).ok


@given(st.integers(3, 50), st.integers(0, 10**6), st.integers(1, 10))
def test_restrict_output_always_valid(n, seed, size):
    m = random_ssp(n, seed=seed, goal=0)
    rng = np.random.default_rng(seed)
    region = set(rng.choice(n, size=min(size, n), replace=False).tolist())
    target = [min(region)]
    assert validate_ssp(restrict_to_region(m, region, target).model).ok


def test_restrict_rejects_bad_arguments(chain4):
    with pytest.raises(EmptyTargets):
        restrict_to_region(chain4, [0, 1], [])
    with pytest.raises(ValueError):
        restrict_to_region(chain4, [0, 1], [3])


def test_proper_states_flags_trap():
    m = SparseSSP.from_lists([[[(0, 1.0, 0.0)]], [[(0, 0.5, 1.0), (2, 0.5, 1.0)]], [[(2, 1.0, 1.0)]]], goal=0)
    assert proper_states(m).tolist() == [True, False, False]


def test_partition_from_members_is_canonical():
    p = Partition.from_members(4, [(3, 2), (1,), (0,)])
    assert p.members == [(0,), (1,), (2, 3)]
    assert p.cluster_of.tolist() == [0, 1, 2, 2]
