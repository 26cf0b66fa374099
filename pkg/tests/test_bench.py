from __future__ import annotations

import math

import numpy as np
import pytest

from sspabs.abstraction import BuildParams, build_hierarchy
from sspabs.bench import (
    CSV_COLUMNS,
    ExperimentConfig,
    format_csv,
    geometric_mean,
    make_hierarchy,
    make_model,
    parse_config_text,
    read_csv,
    run_bench,
)
from sspabs.domains import make_congested, parse_map
from sspabs.solvers import solve_vi


def small_cfg(**kw):
    base = dict(width=10, height=10, problems=15, timing="none", eps=4.0)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def small_run():
    cfg = small_cfg()
    model = make_model(cfg)
    h = make_hierarchy(cfg, model)
    rows, summary = run_bench(model, h, cfg)
    return cfg, model, h, rows, summary


def test_geometric_mean_examples():
    assert geometric_mean([1.0, 4.0]) == pytest.approx(2.0, abs=1e-15)
    assert math.isnan(geometric_mean([]))


def test_rows_are_complete_and_consistent(small_run):
    cfg, model, _, rows, summary = small_run
    assert [r.problem_id for r in rows] == list(range(cfg.problems))
    for r in rows:
        assert r.start != r.goal
        vstar = solve_vi(model, goal=r.goal, tol=1e-12).values[r.start]
        assert r.baseline_cost == pytest.approx(vstar, rel=1e-7)
        assert r.subopt_ratio == r.abs_cost / r.baseline_cost
        assert r.subopt_ratio >= 1.0 - 1e-9
        assert r.eval_method == "exact" and r.reach_rate == 1.0
        assert math.isnan(r.baseline_time_s) and math.isnan(r.abs_time_s)
    assert summary.solved == cfg.problems and summary.failed == 0


def test_csv_layout_and_summary_recomputes(small_run):
    cfg, _, _, rows, summary = small_run
    text = format_csv(cfg, rows, summary)
    body = [line for line in text.splitlines() if not line.startswith("#")]
    assert body[0] == ",".join(CSV_COLUMNS)
    config, parsed, summ = read_csv(text)
    assert ExperimentConfig.from_mapping(config) == cfg
    geo = geometric_mean(float(r["subopt_ratio"]) for r in parsed)
    assert abs(geo - float(summ["geo_subopt"])) <= 1e-12
    assert int(summ["solved"]) == len(parsed)


def test_timing_none_is_byte_identical(small_run):
    cfg, model, h, rows, summary = small_run
    rows2, summary2 = run_bench(model, h, cfg)
    assert format_csv(cfg, rows, summary) == format_csv(cfg, rows2, summary2)


def test_wall_timing_fills_time_fields():
    cfg = small_cfg(problems=5, timing="wall")
    model = make_model(cfg)
    rows, summary = run_bench(model, make_hierarchy(cfg, model), cfg)
    assert all(r.baseline_time_s > 0 and r.abs_time_s > 0 for r in rows)
    assert all(r.time_ratio == pytest.approx(r.baseline_time_s / r.abs_time_s) for r in rows)
    assert summary.geo_time_ratio > 0 and summary.build_time_s > 0


def test_unreachable_pairs_are_rejected_and_resampled():
    # two rooms with no door between them
    rows_ = ["....@....", "....@....", "....@...."]
    grid = parse_map("type octile\nheight 3\nwidth 9\nmap\n" + "\n".join(rows_) + "\n")
    model = make_congested(grid, None, 0.7)
    h = build_hierarchy(model, 1, BuildParams(k=1, eps=4.0))
    cfg = small_cfg(problems=10)
    rows, summary = run_bench(model, h, cfg)
    assert len(rows) == 10 and summary.rejected > 0
    assert all(math.isfinite(r.baseline_cost) for r in rows)


def test_monte_carlo_path_above_exact_limit():
    cfg = small_cfg(problems=3, exact_limit=10, mc_episodes=50)
    model = make_model(cfg)
    rows, _ = run_bench(model, make_hierarchy(cfg, model), cfg)
    assert all(r.eval_method == "mc" for r in rows)
    assert all(r.reach_rate == 1.0 for r in rows)


def test_config_parsing():
    text = "# comment\nwidth = 20\n\neps=inf\ntiming=none\n"
    cfg = ExperimentConfig.from_mapping(parse_config_text(text))
    assert cfg.width == 20 and cfg.eps == math.inf and cfg.timing == "none"
    with pytest.raises(KeyError):
        ExperimentConfig.from_mapping({"bogus": "1"})
    with pytest.raises(ValueError):
        parse_config_text("no equals sign")
    with pytest.raises(ValueError):
        ExperimentConfig(domain="maze")


def test_congested_config_builds_from_bundled_map():
    cfg = small_cfg(domain="congested", units=50, steps=50)
    m = make_model(cfg)
    assert m.n == 846
    assert np.array_equal(m.out_prob, make_model(cfg).out_prob)


def test_oversized_chain_falls_back_to_monte_carlo():
    cfg = small_cfg(problems=3, chain_limit=20, mc_episodes=50)
    model = make_model(cfg)
    rows, _ = run_bench(model, make_hierarchy(cfg, model), cfg)
    assert all(r.eval_method == "mc" and r.reach_rate == 1.0 for r in rows)
