"""``sspabs`` command line: gen, build, solve, bench, verify.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable files,
unreachable goals), 3 verification failure.
"""
from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path

from . import storage
from .abstraction import DegenerateLevel, build_hierarchy
from .analysis import ChainTooLarge, ImproperInduced, evaluate_induced, monte_carlo_eval
from .bench import ExperimentConfig, format_csv, make_model, parse_config_text, run_bench
from .domains import ParseError
from .mdp import SSPError
from .planner import plan
from .solvers import solve_ips
from .verify import suite_bounds, suite_connectivity, suite_passed, suite_properness, suite_solvers

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# flag name -> ExperimentConfig field, for flags that may also come from --config
_CONFIG_FLAGS = {
    "domain": "domain", "width": "width", "height": "height", "p": "P", "map": "map", "units": "units",
    "steps": "steps", "fmax": "fmax", "seed": "seed", "levels": "levels", "k": "k", "prune": "prune",
    "eps": "eps", "mu": "mu", "margin": "margin", "problems": "problems", "mc_episodes": "mc_episodes",
    "exact_limit": "exact_limit", "chain_limit": "chain_limit", "baseline_tol": "baseline_tol", "timing": "timing",
}


def _config(args) -> ExperimentConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_text(Path(args.config).read_text()))
    for flag, key in _CONFIG_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = str(v)
    try:
        return ExperimentConfig.from_mapping(values)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _domain_flags(p):
    p.add_argument("--config", help="flat key=value config file; flags override it")
    p.add_argument("--domain", choices=("grid", "river", "congested"))
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--p", type=float, help="success probability of grid moves")
    p.add_argument("--map", help="map file for the congested domain (default: bundled)")
    p.add_argument("--units", type=int, help="congestion simulation walkers")
    p.add_argument("--steps", type=int, help="congestion simulation steps")
    p.add_argument("--fmax", type=float, help="largest failure probability")
    p.add_argument("--seed", type=int)


def _build_flags(p):
    p.add_argument("--levels", type=int, help="abstraction levels; 0 builds the level-0 model only")
    p.add_argument("--k", type=int, help="link candidate neighbourhood")
    p.add_argument("--prune", type=int, help="abstract actions kept per state")
    p.add_argument("--eps", type=float, help="cost spread threshold")
    p.add_argument("--mu", type=float, help="success probability spread threshold")
    p.add_argument("--margin", type=int, help="extra BFS depth of repair regions")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sspabs", description="Option-based abstraction hierarchies for SSP planning.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a domain model")
    _domain_flags(g)
    g.add_argument("--out", required=True)

    b = sub.add_parser("build", help="build an abstraction hierarchy")
    b.add_argument("--model", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--config")
    b.add_argument("--strict", action="store_true", help="fail instead of stopping at a degenerate level")
    _build_flags(b)

    s = sub.add_parser("solve", help="plan for one start/goal pair")
    s.add_argument("--hierarchy", required=True)
    s.add_argument("--model", help="model file; must match the hierarchy's ground model")
    s.add_argument("--start", type=int, required=True)
    s.add_argument("--goal", type=int, required=True)
    s.add_argument("--baseline", action="store_true", help="also solve exactly and report the ratio")
    s.add_argument("--episodes", type=int, default=200, help="Monte Carlo episodes on large models")
    s.add_argument("--exact-limit", dest="exact_limit", type=int, default=20_000)
    s.add_argument("--chain-limit", dest="chain_limit", type=int, default=200_000,
                   help="augmented chain states allowed for exact evaluation")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--plan-out", dest="plan_out", help="write the plan to this file")
    s.add_argument("--timing", choices=("wall", "none"), default="wall")

    r = sub.add_parser("bench", help="run the random-problem benchmark")
    _domain_flags(r)
    _build_flags(r)
    r.add_argument("--model", help="use this model instead of generating one")
    r.add_argument("--hierarchy", help="use this hierarchy instead of building one")
    r.add_argument("--problems", type=int)
    r.add_argument("--mc-episodes", dest="mc_episodes", type=int)
    r.add_argument("--exact-limit", dest="exact_limit", type=int)
    r.add_argument("--chain-limit", dest="chain_limit", type=int)
    r.add_argument("--baseline-tol", dest="baseline_tol", type=float)
    r.add_argument("--timing", choices=("wall", "none"))
    r.add_argument("--out", help="CSV path (default: stdout)")

    v = sub.add_parser("verify", help="run a verification suite")
    v.add_argument("--suite", required=True, choices=("solvers", "connectivity", "bounds", "properness"))
    v.add_argument("--instances", type=int, default=None)
    v.add_argument("--max-n", dest="max_n", type=int, default=None)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--hierarchy", help="hierarchy file (connectivity, properness)")
    v.add_argument("--episodes", type=int, default=1000)
    v.add_argument("--verbose", action="store_true")
    return ap


# -- commands --------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _config(args)
    model = make_model(cfg)
    storage.save_model(model, args.out)
    print(f"{cfg.domain}: {model.n} states, {model.n_actions} actions -> {args.out}")
    return EXIT_OK


def cmd_build(args) -> int:
    cfg = _config(args)
    model = storage.load_model(args.model)
    t0 = time.perf_counter()
    h = build_hierarchy(model, cfg.levels, cfg.build_params, strict=args.strict)
    total = time.perf_counter() - t0
    storage.save_hierarchy(h, args.out)
    print(f"ground: {model.n} states, {model.n_actions} actions")
    for i, lvl in enumerate(h.levels, start=0 if h.level0 else 1):
        tag = " (degenerate)" if lvl.stats.get("degenerate") else ""
        print(f"level {i}: {lvl.n_states} states, {lvl.abstract_model.n_actions} actions, "
              f"{lvl.stats.get('splits', 0)} splits, {lvl.stats.get('build_time', 0.0):.2f}s{tag}")
    if h.depth < h.requested:
        print(f"warning: stopped at depth {h.depth} of {h.requested} requested", file=sys.stderr)
    print(f"build time {total:.2f}s -> {args.out}")
    return EXIT_OK


def cmd_solve(args) -> int:
    h = storage.load_hierarchy(args.hierarchy)
    if args.model:
        if storage.model_to_bytes(storage.load_model(args.model)) != storage.model_to_bytes(h.ground):
            print("error: model does not match the hierarchy's ground model", file=sys.stderr)
            return EXIT_DATA
    n = h.ground.n
    s, g = args.start, args.goal
    if not (0 <= s < n and 0 <= g < n):
        raise UsageError(f"start and goal must lie in [0, {n})")
    timed = args.timing == "wall"
    t0 = time.perf_counter()
    pl = plan(h, g, start=s)
    tp = time.perf_counter() - t0
    if args.plan_out:
        storage.save_plan(pl, args.plan_out)
    cost = None
    if s == g:
        cost, method = 0.0, "exact"
    elif n <= args.exact_limit:
        try:
            cost, method = float(evaluate_induced(h, pl, [s], limit=args.chain_limit)[0]), "exact"
        except ChainTooLarge:
            pass
    if cost is None:
        mc = monte_carlo_eval(h, pl, s, args.episodes, cap=50 * n, seed=args.seed)
        cost, method = mc.mean, f"mc({args.episodes}, reach {mc.reach_rate:.4f})"
    if timed:
        print(f"plan time {tp:.6f}s")
    print(f"expected cost {cost!r} [{method}]")
    if args.baseline:
        t0 = time.perf_counter()
        opt = float(solve_ips(h.ground, goal=g, allow_partial=True).values[s])
        tb = time.perf_counter() - t0
        if timed:
            print(f"baseline time {tb:.6f}s")
        print(f"optimal cost {opt!r}")
        ratio = 1.0 if opt == cost == 0.0 else cost / opt if opt > 0 else math.inf
        print(f"ratio {ratio!r}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    extra = {}
    if args.model:
        model = storage.load_model(args.model)
        extra["model_file"] = Path(args.model).name
    else:
        model = make_model(cfg)
    if args.hierarchy:
        h = storage.load_hierarchy(args.hierarchy)
        extra["hierarchy_file"] = Path(args.hierarchy).name
        if storage.model_to_bytes(h.ground) != storage.model_to_bytes(model):
            if args.model:
                print("error: model does not match the hierarchy's ground model", file=sys.stderr)
                return EXIT_DATA
            model = h.ground
    else:
        h = build_hierarchy(model, cfg.levels, cfg.build_params)
    extra["depth"] = h.depth
    extra["abstract_states"] = h.levels[-1].n_states if h.levels else model.n
    rows, summary = run_bench(model, h, cfg, log=lambda m: print(m, file=sys.stderr))
    text = format_csv(cfg, rows, summary, extra)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"geo subopt {summary.geo_subopt:.4f}, geo speedup {summary.geo_time_ratio:.2f}, "
          f"solved {summary.solved}, failed {summary.failed}, rejected {summary.rejected}", file=sys.stderr)
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.suite == "solvers":
        checks = suite_solvers(instances=args.instances or 100, max_n=args.max_n or 200, seed=args.seed)
    elif args.suite == "bounds":
        checks, _ = suite_bounds(instances=args.instances or 200, max_n=args.max_n or 60, seed=args.seed)
    else:
        if not args.hierarchy:
            raise UsageError(f"--hierarchy is required for the {args.suite} suite")
        h = storage.load_hierarchy(args.hierarchy)
        if args.suite == "connectivity":
            checks = suite_connectivity(h)
        else:
            checks = suite_properness(h, episodes=args.episodes, seed=args.seed, name=Path(args.hierarchy).name)
    failed = [c for c in checks if not c.passed]
    for c in checks:
        if args.verbose or not c.passed:
            print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    print(f"{args.suite}: {len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_OK if suite_passed(checks) else EXIT_VERIFY


COMMANDS = {"gen": cmd_gen, "build": cmd_build, "solve": cmd_solve, "bench": cmd_bench, "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, storage.FormatError, ParseError, SSPError, ImproperInduced, DegenerateLevel) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
