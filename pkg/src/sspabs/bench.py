"""Benchmark protocol: random (start, goal) problems, IPS baseline against the planner.

Every problem is solved from scratch by :func:`solve_ips` (the baseline) and
by :func:`plan` on a prebuilt hierarchy. The induced controller's cost is
evaluated exactly when the model and its augmented chain are small enough
(``exact_limit`` ground states, ``chain_limit`` chain states) and by Monte
Carlo otherwise. Results
are written as CSV with the full configuration in ``# key=value`` header
lines and geometric-mean summaries in trailing comment lines.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .abstraction import BuildParams, Hierarchy, build_hierarchy
from .analysis import ChainTooLarge, evaluate_induced, monte_carlo_eval
from .domains import bundled_maps, load_map, make_congested, make_gridworld, make_river, simulate_congestion
from .mdp import SparseSSP
from .planner import plan
from .solvers import DEFAULT_TOL, solve_ips

CSV_COLUMNS = ("problem_id", "start", "goal", "baseline_time_s", "baseline_cost", "abs_time_s",
               "abs_cost", "subopt_ratio", "time_ratio", "reach_rate", "eval_method")
TIMING_MODES = ("wall", "none")
DOMAINS = ("grid", "river", "congested")


@dataclass
class ExperimentConfig:
    """Everything needed to regenerate a model, its hierarchy and a benchmark run."""

    domain: str = "grid"
    width: int = 50
    height: int = 50
    P: float = 0.7
    map: str = ""
    units: int = 1000
    steps: int = 1000
    fmax: float = 0.9
    levels: int = 1
    k: int = 2
    prune: int = 4
    eps: float = 4.0
    mu: float = 0.1
    margin: int = 2
    problems: int = 200
    seed: int = 0
    mc_episodes: int = 200
    exact_limit: int = 20_000
    chain_limit: int = 200_000
    baseline_tol: float = DEFAULT_TOL
    timing: str = "wall"

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}")
        if self.timing not in TIMING_MODES:
            raise ValueError(f"timing must be one of {TIMING_MODES}")
        if self.problems < 1 or self.mc_episodes < 1:
            raise ValueError("problems and mc_episodes must be positive")
        if self.levels < 0:
            raise ValueError("levels must be nonnegative")

    @property
    def build_params(self) -> BuildParams:
        return BuildParams(k=self.k, p=self.prune, eps=self.eps, mu=self.mu, margin=self.margin)

    def items(self) -> list[tuple[str, str]]:
        return [(k, _fmt(v)) for k, v in sorted(asdict(self).items())]

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        """Build from string values (config files, CSV headers); unknown keys raise."""
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            t = types[key]
            kw[key] = int(raw) if t == "int" else float(raw) if t == "float" else str(raw)
        return cls(**kw)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {no}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# -- model and hierarchy from a config -------------------------------------------------

def make_model(cfg: ExperimentConfig) -> SparseSSP:
    if cfg.domain == "grid":
        return make_gridworld(cfg.width, cfg.height, cfg.P)
    if cfg.domain == "river":
        return make_river(cfg.width, cfg.height)
    path = cfg.map or str(bundled_maps()["congested"])
    grid = load_map(path)
    field = simulate_congestion(grid, units=cfg.units, steps=cfg.steps, seed=cfg.seed, f_max=cfg.fmax)
    return make_congested(grid, field, cfg.P)


def make_hierarchy(cfg: ExperimentConfig, model: SparseSSP) -> Hierarchy:
    return build_hierarchy(model, cfg.levels, cfg.build_params)


# -- the benchmark ---------------------------------------------------------------------

@dataclass
class ResultRow:
    problem_id: int
    start: int
    goal: int
    baseline_time_s: float
    baseline_cost: float
    abs_time_s: float
    abs_cost: float
    subopt_ratio: float
    time_ratio: float
    reach_rate: float
    eval_method: str


@dataclass
class BenchSummary:
    geo_subopt: float
    geo_time_ratio: float
    mean_abs_time_s: float
    mean_baseline_time_s: float
    solved: int
    failed: int
    rejected: int
    build_time_s: float


def geometric_mean(values) -> float:
    arr = np.asarray(list(values), dtype=float)
    if len(arr) == 0:
        return math.nan
    return float(np.exp(np.mean(np.log(arr))))


def _build_time(h: Hierarchy) -> float:
    return float(sum(lvl.stats.get("build_time", 0.0) for lvl in h.levels))


def _warm_up(model: SparseSSP, hierarchy: Hierarchy) -> None:
    # compile the kernels and the goal-independent tables outside the timed region
    g = model.n - 1
    solve_ips(model, goal=g, allow_partial=True)
    try:
        plan(hierarchy, g)
    except Exception:
        pass
    hierarchy.ground_maps


def run_bench(model: SparseSSP, hierarchy: Hierarchy, cfg: ExperimentConfig, log=None):
    """Run ``cfg.problems`` problems; returns ``(rows, summary)``.

    Pairs whose goal the baseline cannot reach from the start are rejected
    and redrawn. Problems on which the planner fails are kept as rows with
    infinite cost and counted in ``summary.failed``.
    """
    rng = np.random.default_rng(cfg.seed)
    timed = cfg.timing == "wall"
    _warm_up(model, hierarchy)
    rows: list[ResultRow] = []
    rejected = failed = 0
    exact = model.n <= cfg.exact_limit
    cap = 50 * model.n
    while len(rows) < cfg.problems:
        s, g = (int(v) for v in rng.choice(model.n, size=2, replace=False))
        t0 = time.perf_counter()
        base = solve_ips(model, tol=cfg.baseline_tol, goal=g, allow_partial=True)
        tb = time.perf_counter() - t0
        bcost = float(base.values[s])
        if not math.isfinite(bcost):
            rejected += 1
            continue
        pid = len(rows)
        method = "exact" if exact else "mc"
        try:
            t0 = time.perf_counter()
            pl = plan(hierarchy, g, start=s)
            ta = time.perf_counter() - t0
            acost = None
            if exact:
                try:
                    acost = float(evaluate_induced(hierarchy, pl, [s], limit=cfg.chain_limit)[0])
                    reach = 1.0
                except ChainTooLarge:
                    method = "mc"
            if acost is None:
                mc = monte_carlo_eval(hierarchy, pl, s, cfg.mc_episodes, cap=cap, seed=cfg.seed * 1_000_003 + pid)
                acost, reach = mc.mean, mc.reach_rate
        except Exception as exc:  # kept as a failed row
            failed += 1
            if log:
                log(f"problem {pid} (start {s}, goal {g}) failed: {exc}")
            ta, acost, reach, method = math.nan, math.inf, 0.0, f"failed:{type(exc).__name__}"
        if reach < 1.0 and method != "exact" and not method.startswith("failed"):
            failed += 1
        rows.append(ResultRow(
            problem_id=pid, start=s, goal=g,
            baseline_time_s=tb if timed else math.nan, baseline_cost=bcost,
            abs_time_s=ta if timed else math.nan, abs_cost=acost,
            subopt_ratio=acost / bcost,
            time_ratio=tb / ta if timed and ta > 0 else math.nan,
            reach_rate=reach, eval_method=method))
    good = [r for r in rows if math.isfinite(r.subopt_ratio) and r.reach_rate == 1.0]
    summary = BenchSummary(
        geo_subopt=geometric_mean(r.subopt_ratio for r in good),
        geo_time_ratio=geometric_mean(r.time_ratio for r in good) if timed else math.nan,
        mean_abs_time_s=float(np.mean([r.abs_time_s for r in good])) if timed and good else math.nan,
        mean_baseline_time_s=float(np.mean([r.baseline_time_s for r in good])) if timed and good else math.nan,
        solved=len(good), failed=failed, rejected=rejected,
        build_time_s=_build_time(hierarchy) if timed else math.nan)
    return rows, summary


def format_csv(cfg: ExperimentConfig, rows, summary: BenchSummary, extra: dict | None = None) -> str:
    buf = io.StringIO()
    for k, v in cfg.items():
        buf.write(f"# {k}={v}\n")
    for k, v in sorted((extra or {}).items()):
        buf.write(f"# {k}={_fmt(v)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    for k, v in asdict(summary).items():
        buf.write(f"# summary {k}={_fmt(v)}\n")
    return buf.getvalue()


def read_csv(text: str):
    """Inverse of :func:`format_csv`: ``(config, rows, summary)`` as string dicts."""
    config, summary, body = {}, {}, []
    for line in text.splitlines():
        if line.startswith("# summary "):
            k, v = line[len("# summary "):].split("=", 1)
            summary[k] = v
        elif line.startswith("# "):
            k, v = line[2:].split("=", 1)
            config[k] = v
        elif line:
            body.append(line)
    rows = list(csv.DictReader(body))
    return config, rows, summary
