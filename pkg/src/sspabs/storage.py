"""Binary persistence for models, hierarchies and plans.

Model file layout (all little-endian)::

    magic   4s   b"SSPM"
    version u32
    n       u64
    goal    i64  (-1 when the model is a goal-free template)
    n_rows  u64  total number of (state, action) rows
    n_out   u64  total number of outcomes
    flags   u32  bit 0: action tags present, bit 1: labels present
    lwidth  u32  label columns (0 when absent)
    act_ptr i64[n + 1], out_ptr i64[n_rows + 1], out_next i64[n_out],
    out_prob f64[n_out], out_cost f64[n_out],
    [action_tag i64[n_rows]], [labels i64[n * lwidth]]

Hierarchies and plans use a bundle: ``b"SSPB"``, version, the length of a
JSON header (sorted keys) and then the raw arrays the header describes.
Timing data is never written, so identical inputs give identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .abstraction import AbstractionLevel, BuildParams, ConnectivityStats, Hierarchy, OptionDef, Partition
from .mdp import SparseSSP
from .planner import HierarchicalPlan

MODEL_MAGIC = b"SSPM"
BUNDLE_MAGIC = b"SSPB"
VERSION = 1
_MODEL_HEAD = struct.Struct("<4sIQqQQII")
_BUNDLE_HEAD = struct.Struct("<4sIQ")


class FormatError(ValueError):
    pass


# -- models --------------------------------------------------------------------------

def model_to_bytes(model: SparseSSP) -> bytes:
    n = model.n
    flags = (1 if model.action_tag is not None else 0) | (2 if model.labels is not None else 0)
    lwidth = 0
    if model.labels is not None:
        lab = np.asarray(model.labels).reshape(n, -1)
        lwidth = lab.shape[1]
    head = _MODEL_HEAD.pack(MODEL_MAGIC, VERSION, n, -1 if model.goal is None else int(model.goal),
                            model.n_actions, len(model.out_next), flags, lwidth)
    parts = [head]
    for arr, dt in ((model.act_ptr, "<i8"), (model.out_ptr, "<i8"), (model.out_next, "<i8"),
                    (model.out_prob, "<f8"), (model.out_cost, "<f8")):
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    if model.action_tag is not None:
        parts.append(np.ascontiguousarray(model.action_tag, dtype="<i8").tobytes())
    if model.labels is not None:
        parts.append(np.ascontiguousarray(lab, dtype="<i8").tobytes())
    return b"".join(parts)


def model_from_bytes(data: bytes) -> SparseSSP:
    if len(data) < _MODEL_HEAD.size:
        raise FormatError("truncated model header")
    magic, version, n, goal, n_rows, n_out, flags, lwidth = _MODEL_HEAD.unpack_from(data, 0)
    if magic != MODEL_MAGIC:
        raise FormatError("not a model file")
    if version != VERSION:
        raise FormatError(f"unsupported model version {version}")
    off = _MODEL_HEAD.size

    def take(count, dt):
        nonlocal off
        nbytes = count * 8
        if off + nbytes > len(data):
            raise FormatError("truncated model body")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off)
        off += nbytes
        return arr.astype(np.int64 if dt == "<i8" else np.float64)

    act_ptr = take(n + 1, "<i8")
    out_ptr = take(n_rows + 1, "<i8")
    out_next = take(n_out, "<i8")
    out_prob = take(n_out, "<f8")
    out_cost = take(n_out, "<f8")
    tags = take(n_rows, "<i8") if flags & 1 else None
    labels = take(n * lwidth, "<i8").reshape(n, lwidth) if flags & 2 else None
    if off != len(data):
        raise FormatError("trailing bytes after model body")
    return SparseSSP(act_ptr=act_ptr, out_ptr=out_ptr, out_next=out_next, out_prob=out_prob,
                     out_cost=out_cost, goal=None if goal < 0 else int(goal), action_tag=tags, labels=labels)


def save_model(model: SparseSSP, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> SparseSSP:
    return model_from_bytes(Path(path).read_bytes())


# -- bundles ---------------------------------------------------------------------------

def bundle_to_bytes(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    specs = []
    blobs = []
    off = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype.kind in "iub":
            arr = np.ascontiguousarray(arr, dtype="<i8")
            dt = "i8"
        elif arr.dtype.kind == "f":
            arr = np.ascontiguousarray(arr, dtype="<f8")
            dt = "f8"
        else:
            raise TypeError(f"array {name} has unsupported dtype {arr.dtype}")
        b = arr.tobytes()
        specs.append([name, dt, list(arr.shape), off, len(b)])
        blobs.append(b)
        off += len(b)
    header = json.dumps({"kind": kind, "meta": meta, "arrays": specs}, sort_keys=True,
                        separators=(",", ":")).encode()
    return _BUNDLE_HEAD.pack(BUNDLE_MAGIC, VERSION, len(header)) + header + b"".join(blobs)


def bundle_from_bytes(data: bytes, kind: str | None = None):
    if len(data) < _BUNDLE_HEAD.size:
        raise FormatError("truncated bundle header")
    magic, version, hlen = _BUNDLE_HEAD.unpack_from(data, 0)
    if magic != BUNDLE_MAGIC:
        raise FormatError("not a bundle file")
    if version != VERSION:
        raise FormatError(f"unsupported bundle version {version}")
    start = _BUNDLE_HEAD.size
    try:
        header = json.loads(data[start : start + hlen])
    except ValueError as exc:
        raise FormatError("corrupt bundle header") from exc
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"expected a {kind} bundle, found {header.get('kind')!r}")
    base = start + hlen
    arrays = {}
    for name, dt, shape, off, nbytes in header["arrays"]:
        if base + off + nbytes > len(data):
            raise FormatError(f"array {name} runs past the end of the file")
        raw = np.frombuffer(data, dtype="<" + dt, count=nbytes // 8, offset=base + off)
        arrays[name] = raw.astype(np.int64 if dt == "i8" else np.float64).reshape(shape)
    return header["meta"], arrays


def _ragged(seqs) -> tuple[np.ndarray, np.ndarray]:
    lens = [len(s) for s in seqs]
    ptr = np.zeros(len(seqs) + 1, dtype=np.int64)
    np.cumsum(lens, out=ptr[1:])
    flat = np.concatenate([np.asarray(s) for s in seqs]) if seqs and ptr[-1] else np.zeros(0)
    return ptr, flat


def _unragged(ptr, flat):
    return [flat[ptr[i] : ptr[i + 1]] for i in range(len(ptr) - 1)]


_STAT_KEYS = ("candidates", "splits", "dropped", "solved", "actions_before_prune", "degenerate")


def hierarchy_to_bytes(h: Hierarchy) -> bytes:
    arrays = {"ground": np.frombuffer(model_to_bytes(h.ground), dtype=np.uint8)}
    levels_meta = []
    for i, lvl in enumerate(h.levels):
        p = f"L{i}."
        levels_meta.append({
            "params": {k: getattr(lvl.params, k) for k in ("k", "p", "eps", "mu", "margin", "exit_cost")},
            "stats": {k: lvl.stats[k] for k in _STAT_KEYS if k in lvl.stats},
        })
        arrays[p + "cluster_of"] = lvl.partition.cluster_of
        arrays[p + "abstract"] = np.frombuffer(model_to_bytes(lvl.abstract_model), dtype=np.uint8)
        opts = lvl.options
        arrays[p + "src_tgt"] = np.array([[o.source, o.target] for o in opts], dtype=np.int64).reshape(-1, 2)
        for field in ("initiation", "termination", "region", "states", "actions"):
            ptr, flat = _ragged([np.asarray(getattr(o, field), dtype=np.int64) for o in opts])
            arrays[p + field + ".ptr"] = ptr
            arrays[p + field] = flat.astype(np.int64)
        for field in ("costs", "success"):
            ptr, flat = _ragged([np.asarray(getattr(o.stats, field), dtype=np.float64) for o in opts])
            arrays[p + field + ".ptr"] = ptr
            arrays[p + field] = flat.astype(np.float64)
    meta = {"levels": levels_meta, "level0": h.level0, "requested": h.requested}
    return bundle_to_bytes("hierarchy", meta, arrays)


def hierarchy_from_bytes(data: bytes) -> Hierarchy:
    meta, arrays = bundle_from_bytes(data, "hierarchy")
    ground = model_from_bytes(arrays["ground"].astype(np.uint8).tobytes())
    levels = []
    for i, lm in enumerate(meta["levels"]):
        p = f"L{i}."
        cof = arrays[p + "cluster_of"]
        k = int(cof.max()) + 1 if len(cof) else 0
        members = [[] for _ in range(k)]
        for x, c in enumerate(cof.tolist()):
            members[c].append(x)
        part = Partition(cluster_of=cof, members=[tuple(m) for m in members])
        amodel = model_from_bytes(arrays[p + "abstract"].astype(np.uint8).tobytes())
        fields = {f: _unragged(arrays[p + f + ".ptr"], arrays[p + f])
                  for f in ("initiation", "termination", "region", "states", "actions", "costs", "success")}
        opts = []
        for j, (s, t) in enumerate(arrays[p + "src_tgt"].tolist()):
            opts.append(OptionDef(
                initiation=tuple(fields["initiation"][j].tolist()),
                termination=tuple(fields["termination"][j].tolist()),
                region=fields["region"][j].astype(np.int64),
                states=fields["states"][j].astype(np.int64),
                actions=fields["actions"][j].astype(np.int64),
                stats=ConnectivityStats(costs=tuple(fields["costs"][j].tolist()),
                                        success=tuple(fields["success"][j].tolist())),
                source=s, target=t))
        levels.append(AbstractionLevel(partition=part, abstract_model=amodel, options=opts,
                                       params=BuildParams(**lm["params"]), stats=dict(lm["stats"])))
    return Hierarchy(ground=ground, levels=levels, level0=meta["level0"], requested=meta["requested"])


def save_hierarchy(h: Hierarchy, path) -> None:
    Path(path).write_bytes(hierarchy_to_bytes(h))


def load_hierarchy(path) -> Hierarchy:
    return hierarchy_from_bytes(Path(path).read_bytes())


def plan_to_bytes(pl: HierarchicalPlan) -> bytes:
    meta = {"ground_goal": pl.ground_goal, "goal_chain": list(pl.goal_chain), "margin": pl.margin}
    arrays = {"region": pl.region, "approach_states": pl.approach_states,
              "approach_actions": pl.approach_actions, "top_values": pl.top_values,
              "top_policy": pl.top_policy}
    return bundle_to_bytes("plan", meta, arrays)


def plan_from_bytes(data: bytes) -> HierarchicalPlan:
    meta, a = bundle_from_bytes(data, "plan")
    return HierarchicalPlan(ground_goal=meta["ground_goal"], goal_chain=list(meta["goal_chain"]),
                            region=a["region"], approach_states=a["approach_states"],
                            approach_actions=a["approach_actions"], top_values=a["top_values"],
                            top_policy=a["top_policy"], margin=meta["margin"])


def save_plan(pl: HierarchicalPlan, path) -> None:
    Path(path).write_bytes(plan_to_bytes(pl))


def load_plan(path) -> HierarchicalPlan:
    return plan_from_bytes(Path(path).read_bytes())
