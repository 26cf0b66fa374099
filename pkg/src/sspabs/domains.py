"""Benchmark SSP generators: noisy gridworlds, the river, congested game maps.

Every generator returns a goal-free template; callers pick a goal per
problem (``SparseSSP.with_goal`` or the ``goal=`` argument of the solvers).
Movement that would leave the grid or enter an obstacle keeps the agent in
place and still pays the action's cost.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdp import SparseSSP

# up, down, left, right as (drow, dcol)
GRID_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
GRID_ACTION_NAMES = ("up", "down", "left", "right")

# forward (+x), backward (-x), diagonal up-forward, diagonal down-forward
RIVER_MOVES = ((0, 1), (0, -1), (-1, 1), (1, 1))
RIVER_ACTION_NAMES = ("forward", "backward", "up-forward", "down-forward")
RIVER_COSTS = (1.0, 5.0, math.sqrt(2.0), math.sqrt(2.0))

PASSABLE = frozenset(".G")
IMPASSABLE = frozenset("@T#")


class ParseError(ValueError):
    def __init__(self, message, line, column=None, row=None):
        loc = f"line {line}" + (f", column {column}" if column is not None else "")
        super().__init__(f"{message} ({loc})")
        self.line = line
        self.column = column
        self.row = row


@dataclass
class ObstacleGrid:
    width: int
    height: int
    passable: np.ndarray  # (height, width) bool
    source: str = ""

    def __post_init__(self):
        self.passable = np.asarray(self.passable, dtype=bool)
        if self.passable.shape != (self.height, self.width):
            raise ValueError("passable mask shape does not match dimensions")
        if not self.passable.any():
            raise ValueError("grid has no passable cell")

    @property
    def passable_count(self) -> int:
        return int(self.passable.sum())

    def cells(self) -> list[tuple[int, int]]:
        """Passable cells in row-major order; index = state id."""
        rr, cc = np.nonzero(self.passable)
        return list(zip(rr.tolist(), cc.tolist()))

    def components(self) -> list[int]:
        """Sizes of the 4-connected passable components, largest first."""
        seen = np.zeros_like(self.passable)
        sizes = []
        for r0, c0 in self.cells():
            if seen[r0, c0]:
                continue
            seen[r0, c0] = True
            stack = [(r0, c0)]
            size = 0
            while stack:
                r, c = stack.pop()
                size += 1
                for dr, dc in GRID_MOVES:
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < self.height and 0 <= cc < self.width and self.passable[rr, cc] and not seen[rr, cc]:
                        seen[rr, cc] = True
                        stack.append((rr, cc))
            sizes.append(size)
        return sorted(sizes, reverse=True)

    def to_text(self) -> str:
        rows = ["".join("." if p else "@" for p in row) for row in self.passable]
        return "\n".join(["type octile", f"height {self.height}", f"width {self.width}", "map", *rows]) + "\n"


@dataclass
class CongestionField:
    """Per-cell failure probability; NaN on impassable cells."""

    failure: np.ndarray  # (height, width)
    f_max: float

    def at(self, r: int, c: int) -> float:
        return float(self.failure[r, c])


def _grid_model(passable: np.ndarray, moves, probs_for, costs, fail=None) -> SparseSSP:
    """Shared builder: ``probs_for(a)`` gives the move distribution of action ``a``."""
    h, w = passable.shape
    rr, cc = np.nonzero(passable)
    ids = -np.ones((h, w), dtype=np.int64)
    ids[rr, cc] = np.arange(len(rr))
    acts = []
    tags = []
    labels = []
    for r, c in zip(rr.tolist(), cc.tolist()):
        s = int(ids[r, c])
        f = 0.0 if fail is None else float(fail[r, c])
        dest = []
        for dr, dc in moves:
            r2, c2 = r + dr, c + dc
            if 0 <= r2 < h and 0 <= c2 < w and passable[r2, c2]:
                dest.append(int(ids[r2, c2]))
            else:
                dest.append(s)
        sacts = []
        for a in range(len(moves)):
            outs = []
            if f > 0.0:
                outs.append((s, f, costs[a]))
            for m, p in enumerate(probs_for(a)):
                if p > 0.0:
                    outs.append((dest[m], (1.0 - f) * p, costs[a]))
            sacts.append(outs)
        acts.append(sacts)
        tags.append(list(range(len(moves))))
        labels.append((r, c))
    return SparseSSP.from_lists(acts, goal=None, tags=tags, labels=labels)


def _gridworld_probs(P: float):
    other = (1.0 - P) / 3.0
    table = []
    for a in range(4):
        table.append(tuple(P if m == a else other for m in range(4)))
    return lambda a: table[a]


def make_gridworld(w: int, h: int, P: float = 0.7) -> SparseSSP:
    """Empty ``w`` x ``h`` noisy gridworld, unit costs, success probability ``P``."""
    if w < 2 or h < 2:
        raise ValueError("gridworld needs w, h >= 2")
    if not 0.0 < P <= 1.0:
        raise ValueError("P must lie in (0, 1]")
    return _grid_model(np.ones((h, w), dtype=bool), GRID_MOVES, _gridworld_probs(P), (1.0,) * 4)


def river_mask(w: int, h: int) -> np.ndarray:
    mask = np.ones((h, w), dtype=bool)
    mask[h // 2, w // 2 :] = False
    return mask


def make_river(w: int, h: int) -> SparseSSP:
    """River with a left-to-right current and a fork wall on row h/2 from column w/2."""
    if w < 4 or h < 4 or w % 2 or h % 2:
        raise ValueError("river needs even w, h >= 4")
    table = [
        (0.6, 0.0, 0.2, 0.2),
        (0.1, 0.7, 0.1, 0.1),
        (0.2, 0.0, 0.6, 0.2),
        (0.2, 0.0, 0.2, 0.6),
    ]
    return _grid_model(river_mask(w, h), RIVER_MOVES, lambda a: table[a], RIVER_COSTS)


def load_map(path) -> ObstacleGrid:
    """Parse a MovingAI-style ``.map`` file."""
    path = Path(path)
    text = path.read_text()
    return parse_map(text, source=path.name)


def parse_map(text: str, source: str = "") -> ObstacleGrid:
    lines = text.splitlines()
    header: dict[str, str] = {}
    i = 0
    while i < len(lines):
        raw = lines[i].strip()
        i += 1
        if not raw:
            continue
        if raw == "map":
            break
        parts = raw.split()
        if len(parts) != 2 or parts[0] not in ("type", "height", "width"):
            raise ParseError(f"unexpected header line {raw!r}", line=i)
        header[parts[0]] = parts[1]
    else:
        raise ParseError("missing 'map' section", line=len(lines))
    try:
        height = int(header["height"])
        width = int(header["width"])
    except KeyError as e:
        raise ParseError(f"missing header field {e.args[0]}", line=i) from None
    except ValueError:
        raise ParseError("height/width must be integers", line=i) from None
    if height < 1 or width < 1:
        raise ParseError("height/width must be positive", line=i)
    body = lines[i : i + height]
    if len(body) < height:
        raise ParseError(f"expected {height} rows, found {len(body)}", line=len(lines), row=len(body) + 1)
    passable = np.zeros((height, width), dtype=bool)
    for r, row in enumerate(body):
        lineno = i + r + 1
        if len(row) != width:
            raise ParseError(f"row {r + 1} has width {len(row)}, expected {width}", line=lineno, row=r + 1)
        for c, ch in enumerate(row):
            if ch in PASSABLE:
                passable[r, c] = True
            elif ch not in IMPASSABLE:
                raise ParseError(f"unknown terrain {ch!r}", line=lineno, column=c + 1, row=r + 1)
    if not passable.any():
        raise ParseError("map has no passable cell", line=i)
    return ObstacleGrid(width=width, height=height, passable=passable, source=source)


def simulate_congestion(grid: ObstacleGrid, units: int = 1000, steps: int = 1000, seed: int = 0,
                        f_max: float = 0.9) -> CongestionField:
    """Average cell occupation of random walkers, scaled linearly to ``[0, f_max]``."""
    if units < 1 or steps < 1:
        raise ValueError("units and steps must be >= 1")
    if not 0.0 <= f_max < 1.0:
        raise ValueError("f_max must lie in [0, 1)")
    cells = grid.cells()
    n = len(cells)
    ids = -np.ones((grid.height, grid.width), dtype=np.int64)
    for k, (r, c) in enumerate(cells):
        ids[r, c] = k
    nbr = np.zeros((n, 4), dtype=np.int64)
    deg = np.zeros(n, dtype=np.int64)
    for k, (r, c) in enumerate(cells):
        for dr, dc in GRID_MOVES:
            r2, c2 = r + dr, c + dc
            if 0 <= r2 < grid.height and 0 <= c2 < grid.width and grid.passable[r2, c2]:
                nbr[k, deg[k]] = ids[r2, c2]
                deg[k] += 1
        for j in range(deg[k], 4):
            nbr[k, j] = k
    rng = np.random.default_rng(seed)
    pos = rng.integers(0, n, size=units)
    visits = np.bincount(pos, minlength=n).astype(np.float64)
    for _ in range(steps):
        d = deg[pos]
        pick = np.floor(rng.random(units) * np.maximum(d, 1)).astype(np.int64)
        pos = np.where(d > 0, nbr[pos, pick], pos)
        visits += np.bincount(pos, minlength=n)
    occ = visits / visits.max()
    field = np.full((grid.height, grid.width), np.nan)
    for k, (r, c) in enumerate(cells):
        field[r, c] = f_max * occ[k]
    return CongestionField(failure=field, f_max=f_max)


def make_congested(grid: ObstacleGrid, field: CongestionField | None, P: float = 0.7) -> SparseSSP:
    """Noisy gridworld over the passable cells where each action fails (stays put) w.p. f(x)."""
    if not 0.0 < P <= 1.0:
        raise ValueError("P must lie in (0, 1]")
    fail = None
    if field is not None:
        if field.failure.shape != grid.passable.shape:
            raise ValueError("congestion field does not match the grid")
        fail = np.where(grid.passable, np.nan_to_num(field.failure), 0.0)
    return _grid_model(grid.passable, GRID_MOVES, _gridworld_probs(P), (1.0,) * 4, fail=fail)


def dumbbell_map(room: int = 4, corridor: int = 1) -> ObstacleGrid:
    """Two open rooms joined by a one-cell corridor (test fixture)."""
    w = 2 * room + corridor
    h = room + 1
    mask = np.zeros((h, w), dtype=bool)
    mask[:room, :room] = True
    mask[:room, room + corridor :] = True
    mask[room // 2, room : room + corridor] = True
    return ObstacleGrid(width=w, height=h, passable=mask, source="dumbbell")


def rooms_map(width: int, height: int, room: int, seed: int = 0, door_prob: float = 0.6) -> ObstacleGrid:
    """Room-and-corridor layout: a lattice of rooms separated by walls with random doors.

    Doors of a random spanning tree are always opened so the map is connected;
    the remaining walls get a door with probability ``door_prob``.
    """
    rng = np.random.default_rng(seed)
    mask = np.ones((height, width), dtype=bool)
    step = room + 1
    for r in range(room, height, step):
        mask[r, :] = False
    for c in range(room, width, step):
        mask[:, c] = False
    nr = max(1, len(range(0, height, step)))
    nc = max(1, len(range(0, width, step)))

    def span(k, limit):
        lo = k * step
        return lo, min(lo + room, limit)

    walls = []
    for i in range(nr):
        for j in range(nc):
            if j + 1 < nc:
                walls.append(((i, j), (i, j + 1)))
            if i + 1 < nr:
                walls.append(((i, j), (i + 1, j)))
    order = rng.permutation(len(walls))
    parent = {(i, j): (i, j) for i in range(nr) for j in range(nc)}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for k in order.tolist():
        a, b = walls[k]
        joined = find(a) != find(b)
        if joined:
            parent[find(a)] = find(b)
        if joined or rng.random() < door_prob:
            (i, j), (i2, j2) = a, b
            if i2 == i:
                r0, r1 = span(i, height)
                wc = (j + 1) * step - 1
                if wc >= width or r1 <= r0:
                    continue
                width_door = max(1, min(2, r1 - r0))
                rd = int(rng.integers(r0, r1 - width_door + 1))
                mask[rd : rd + width_door, wc] = True
            else:
                c0, c1 = span(j, width)
                wr = (i + 1) * step - 1
                if wr >= height or c1 <= c0:
                    continue
                width_door = max(1, min(2, c1 - c0))
                cd = int(rng.integers(c0, c1 - width_door + 1))
                mask[wr, cd : cd + width_door] = True
    return ObstacleGrid(width=width, height=height, passable=mask, source=f"rooms-{width}x{height}-{room}-{seed}")


def bundled_maps() -> dict[str, Path]:
    d = Path(__file__).parent / "maps"
    return {p.stem: p for p in sorted(d.glob("*.map"))}


# -- small synthetic models ------------------------------------------------------

def make_chain(n: int, cost: float = 1.0) -> SparseSSP:
    """Deterministic chain 0 -> 1 -> ... -> n-1; the last state loops on itself."""
    if n < 1:
        raise ValueError("chain needs at least one state")
    acts = [[[(min(s + 1, n - 1), 1.0, cost)]] for s in range(n)]
    return SparseSSP.from_lists(acts, tags=[[0]] * n)


def random_ssp(n: int, seed=0, actions=(1, 3), outcomes=(1, 3), costs=(0.5, 2.0),
               deterministic: bool = False, goal: int = 0, absorbing: bool = True) -> SparseSSP:
    """Random SSP in which every state can reach ``goal``.

    States get a random rank (the goal ranks first); one action per state has
    an outcome leading to a strictly lower-ranked state, which makes the
    all-progress policy proper. With ``absorbing=False`` the goal gets random
    actions like every other state and a goal-free template is returned.
    """
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    rank = rng.permutation(n)
    rank[rank == 0] = rank[goal]
    rank[goal] = 0
    by_rank = np.argsort(rank)
    acts = []
    for x in range(n):
        if x == goal and absorbing:
            acts.append([[(goal, 1.0, 0.0)]])
            continue
        na = int(rng.integers(actions[0], actions[1] + 1))
        progress = int(rng.integers(na)) if x != goal else -1
        sacts = []
        for a in range(na):
            no = 1 if deterministic else int(rng.integers(outcomes[0], outcomes[1] + 1))
            ys = rng.integers(0, n, size=no)
            if a == progress:
                ys[0] = by_rank[int(rng.integers(rank[x]))]
            w = rng.random(no) + 0.05
            ps = w / w.sum()
            cs = rng.uniform(costs[0], costs[1], size=no)
            sacts.append([(int(y), float(p), float(c)) for y, p, c in zip(ys, ps, cs)])
        acts.append(sacts)
    return SparseSSP.from_lists(acts, goal=goal if absorbing else None)
