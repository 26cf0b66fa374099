from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sspabs.domains import (
    CongestionField,
    ObstacleGrid,
    ParseError,
    bundled_maps,
    dumbbell_map,
    load_map,
    make_congested,
    make_gridworld,
    make_river,
    parse_map,
    river_mask,
    simulate_congestion,
)
from sspabs.mdp import validate_ssp
from sspabs.solvers import solve_ips, solve_vi

UP, DOWN, LEFT, RIGHT = range(4)
FWD, BACK, DIAG_UP, DIAG_DOWN = range(4)


def dist(model, s, a):
    """Outcome distribution as {next: prob}."""
    out = {}
    for y, p, _ in model.outcomes(s, a):
        out[y] = out.get(y, 0.0) + p
    return out


# -- gridworld --------------------------------------------------------------------

def test_deterministic_grid_values_are_manhattan():
    m = make_gridworld(3, 3, 1.0)
    v = solve_ips(m, goal=4).values
    assert v.tolist() == [2, 1, 2, 1, 0, 1, 2, 1, 2]


def test_interior_outcome_probabilities():
    m = make_gridworld(5, 5, 0.7)
    x = 12
    d = dist(m, x, RIGHT)
    assert d[x + 1] == pytest.approx(0.7)
    assert d[x - 1] == d[x - 5] == d[x + 5] == pytest.approx(0.1)
    assert all(c == 1.0 for _, _, c in m.outcomes(x, RIGHT))


def test_corner_redirects_blocked_mass_to_self():
    m = make_gridworld(5, 5, 0.7)
    # top-left corner, action up: up (0.7) and left (0.1) are blocked
    d = dist(m, 0, UP)
    assert d[0] == pytest.approx(0.8)
    assert d[1] == pytest.approx(0.1) and d[5] == pytest.approx(0.1)


@pytest.mark.parametrize("bad", [(1, 5, 0.7), (5, 1, 0.7), (5, 5, 0.0), (5, 5, 1.5)])
def test_gridworld_rejects_bad_parameters(bad):
    with pytest.raises(ValueError):
        make_gridworld(*bad)


# -- river ------------------------------------------------------------------------

def test_river_forward_distribution():
    m = make_river(10, 10)
    x = 2 * 10 + 3
    d = dist(m, x, FWD)
    assert d == pytest.approx({x + 1: 0.6, x - 10 + 1: 0.2, x + 10 + 1: 0.2})


def test_river_backward_distribution_and_costs():
    m = make_river(10, 10)
    x = 2 * 10 + 3
    d = dist(m, x, BACK)
    assert d == pytest.approx({x - 1: 0.7, x + 1: 0.1, x - 10 + 1: 0.1, x + 10 + 1: 0.1})
    costs = {a: {c for _, _, c in m.outcomes(x, a)} for a in range(4)}
    assert costs[FWD] == {1.0} and costs[BACK] == {5.0}
    assert costs[DIAG_UP] == costs[DIAG_DOWN] == {math.sqrt(2.0)}


def test_river_fork_wall_and_adjacent_cells():
    w = h = 10
    mask = river_mask(w, h)
    assert not mask[5, 5:].any() and mask[5, :5].all() and mask.sum() == 95
    m = make_river(w, h)
    ids = -np.ones((h, w), dtype=int)
    ids[mask] = np.arange(mask.sum())
    x = ids[4, 6]  # directly above the wall
    d = dist(m, x, DIAG_DOWN)
    # diagonal down-forward (0.6) into the wall stays put; forward 0.2 and diag-up 0.2 move
    assert d[x] == pytest.approx(0.6)
    assert d[ids[4, 7]] == pytest.approx(0.2) and d[ids[3, 7]] == pytest.approx(0.2)


def test_river_rejects_odd_sizes():
    with pytest.raises(ValueError):
        make_river(9, 10)


# -- maps ---------------------------------------------------------------------------

def test_parse_small_map():
    g = parse_map("type octile\nheight 2\nwidth 2\nmap\n..\n.G\n")
    assert g.passable_count == 4


def test_parse_width_mismatch_reports_row():
    text = "type octile\nheight 3\nwidth 3\nmap\n...\n...\n..\n"
    with pytest.raises(ParseError) as exc:
        parse_map(text)
    assert exc.value.row == 3


def test_parse_unknown_terrain_reports_column():
    with pytest.raises(ParseError) as exc:
        parse_map("type octile\nheight 1\nwidth 3\nmap\n.x.\n")
    assert exc.value.column == 2


def test_bundled_bg1_like_map_size():
    g = load_map(bundled_maps()["bg1_like"])
    assert g.passable_count == 6176
    assert len(g.components()) == 1


def test_map_text_round_trip():
    g = dumbbell_map()
    assert np.array_equal(parse_map(g.to_text()).passable, g.passable)


# -- congestion ------------------------------------------------------------------------

def test_congestion_on_open_row_is_nearly_uniform():
    g = ObstacleGrid(width=20, height=1, passable=np.ones((1, 20), dtype=bool))
    f = simulate_congestion(g, units=10_000, steps=50, seed=1, f_max=0.9).failure[0]
    # interior cells of a reflecting walk carry nearly equal occupation
    assert f.max() == pytest.approx(0.9)
    assert f[2:-2].min() >= 0.8


def test_congestion_tracks_degree_in_dumbbell():
    # a simple random walk visits cells in proportion to their passable degree,
    # so the 2-neighbour corridor cell sees half the traffic of its 4-neighbour entrances
    g = dumbbell_map(room=4, corridor=1)
    f = simulate_congestion(g, units=4000, steps=400, seed=3).failure
    corridor, entrance = f[2, 4], (f[2, 3] + f[2, 5]) / 2
    assert corridor / entrance == pytest.approx(0.5, abs=0.05)


def test_congestion_one_unit_one_step():
    g = ObstacleGrid(width=5, height=5, passable=np.ones((5, 5), dtype=bool))
    f = simulate_congestion(g, units=1, steps=1, seed=0).failure
    assert int((f > 0).sum()) == 2
    with pytest.raises(ValueError):
        simulate_congestion(g, units=0, steps=1)


def test_congestion_is_deterministic():
    g = dumbbell_map()
    a = simulate_congestion(g, units=50, steps=30, seed=9).failure
    b = simulate_congestion(g, units=50, steps=30, seed=9).failure
    assert np.array_equal(a, b, equal_nan=True)


def test_zero_field_equals_gridworld():
    g = ObstacleGrid(width=6, height=4, passable=np.ones((4, 6), dtype=bool))
    field = CongestionField(failure=np.zeros((4, 6)), f_max=0.9)
    a, b = make_congested(g, field, 0.7), make_gridworld(6, 4, 0.7)
    assert a.to_lists() == b.to_lists()


def test_half_failure_composition():
    g = ObstacleGrid(width=5, height=5, passable=np.ones((5, 5), dtype=bool))
    field = CongestionField(failure=np.full((5, 5), 0.5), f_max=0.9)
    d = dist(make_congested(g, field, 0.7), 12, RIGHT)
    assert d[12] == pytest.approx(0.5)
    assert d[13] == pytest.approx(0.35)
    assert d[11] == d[7] == d[17] == pytest.approx(0.05)


def _two_route_map():
    # a short corridor through the middle wall, and a long way round the bottom
    rows = [
        ".....@.....",
        ".....@.....",
        "...........",
        ".....@.....",
        ".....@.....",
        ".@@@@@@@@@.",
        "...........",
    ]
    text = "type octile\nheight 7\nwidth 11\nmap\n" + "\n".join(rows) + "\n"
    return parse_map(text)


def test_congested_corridor_is_avoided_when_failure_is_high():
    g = _two_route_map()
    cells = g.cells()
    ids = {rc: i for i, rc in enumerate(cells)}
    start, goal = ids[(2, 3)], ids[(2, 7)]

    def first_action(fail):
        field = np.where(g.passable, 0.0, np.nan)
        field[2, 5] = fail
        m = make_congested(g, CongestionField(failure=field, f_max=0.999), 1.0)
        return int(solve_vi(m, goal=goal).policy[start])

    assert first_action(0.0) == RIGHT
    # with certain-ish failure in the corridor, heading down towards the detour is better
    assert first_action(0.99) != RIGHT


# -- properties -------------------------------------------------------------------------

@given(st.sampled_from(["grid", "river", "congested"]), st.integers(0, 10**6))
def test_generators_valid_for_any_goal(kind, seed):
    if kind == "grid":
        m = make_gridworld(6, 5, 0.7)
    elif kind == "river":
        m = make_river(6, 6)
    else:
        g = dumbbell_map()
        m = make_congested(g, simulate_congestion(g, units=20, steps=20, seed=seed), 0.7)
    goal = seed % m.n
    assert validate_ssp(m.with_goal(goal)).ok


def test_generators_are_deterministic():
    assert make_gridworld(7, 6, 0.6).to_lists() == make_gridworld(7, 6, 0.6).to_lists()
    assert make_river(8, 8).to_lists() == make_river(8, 8).to_lists()


def test_mass_is_conserved_everywhere():
    for m in (make_gridworld(7, 5, 0.7), make_river(8, 6)):
        sums = np.add.reduceat(m.out_prob, m.out_ptr[:-1])
        assert np.max(np.abs(sums - 1.0)) <= 1e-12
