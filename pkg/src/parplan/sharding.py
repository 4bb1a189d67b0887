"""Intra-tensor sharding for split TaskGraphs.

Each operator is a sharding unit. A unit is matched against the pattern table
given the ShardingInfo of its inputs; among the matches the pattern with the
smallest communication volume is applied (ties go to the lower pattern id).

Built-in table:

=====  ===========  =====================================================
SP1    matmul       rhs split on its column dim, output all-gathered
SP2    matmul       contraction dim split on both sides, output all-reduced
EW     elementwise  pass-through, keeps the incoming layout
SM     softmax      row-wise pass-through, last dim must stay whole
=====  ===========  =====================================================

``register_pattern`` adds entries.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Optional, Sequence

from .balance import LoadAssignment, largest_remainder
from .errors import UnsplittableDimensionError, UnsupportedSplitError
from .model_ir import CompGraph, OpNode, TensorSpec, estimate_op_cost


@dataclass(frozen=True)
class ShardingInfo:
    dims: tuple

    @classmethod
    def complete(cls, rank: int) -> "ShardingInfo":
        return cls((0,) * rank)

    @classmethod
    def split(cls, rank: int, dim: int) -> "ShardingInfo":
        return cls(tuple(1 if i == dim else 0 for i in range(rank)))

    @property
    def is_complete(self) -> bool:
        return not any(self.dims)

    @property
    def split_dims(self) -> tuple:
        return tuple(i for i, s in enumerate(self.dims) if s)

    @property
    def split_dim(self) -> Optional[int]:
        dims = self.split_dims
        return dims[0] if len(dims) == 1 else None

    def __str__(self):
        return "[" + ",".join(str(s) for s in self.dims) + "]"


@dataclass(frozen=True)
class Collective:
    kind: str  # "allgather" | "allreduce"
    tensor: str
    dim: Optional[int] = None

    def __str__(self):
        return f"AllGather({self.tensor}, {self.dim})" if self.kind == "allgather" else f"AllReduce({self.tensor})"


@dataclass(frozen=True)
class ShardingUnit:
    ops: tuple
    input_infos: tuple

    def __post_init__(self):
        if not self.ops:
            raise ValueError("empty sharding unit")

    @property
    def op(self) -> OpNode:
        return self.ops[0]

    @property
    def kind(self) -> str:
        return self.ops[0].kind


@dataclass(frozen=True)
class ShardingPattern:
    id: str
    unit_kind: str
    input_infos: tuple
    output_info: ShardingInfo
    comm_op: Optional[Collective]
    rewrite: str
    # (input index, dim) whose extent is divided among the devices, or None if replicated
    shard_axis: Optional[tuple] = None


PatternRule = Callable[[ShardingUnit, Mapping[str, TensorSpec]], Optional[ShardingPattern]]
PATTERN_TABLE: dict = {}


def register_pattern(kind: str, rule: PatternRule) -> PatternRule:
    PATTERN_TABLE.setdefault(kind, []).append(rule)
    return rule


def compatible(current: ShardingInfo, required: ShardingInfo) -> bool:
    # a whole tensor can be sliced locally for free
    return current == required or current.is_complete


def _single_splits(unit: ShardingUnit) -> bool:
    return all(len(i.split_dims) <= 1 for i in unit.input_infos)


def _sp1(unit, tensors):
    op = unit.op
    if len(op.inputs) != 2 or not _single_splits(unit):
        return None
    lhs, rhs = (tensors[t] for t in op.inputs)
    out = tensors[op.outputs[0]]
    req = (ShardingInfo.complete(lhs.rank), ShardingInfo.split(rhs.rank, rhs.rank - 1))
    if not all(compatible(c, r) for c, r in zip(unit.input_infos, req)):
        return None
    return ShardingPattern("SP1", "matmul", req, ShardingInfo.split(out.rank, out.rank - 1),
                           Collective("allgather", out.id, out.rank - 1),
                           "column-parallel matmul; all-gather the output columns", (1, rhs.rank - 1))


def _sp2(unit, tensors):
    op = unit.op
    if len(op.inputs) != 2 or not _single_splits(unit):
        return None
    lhs, rhs = (tensors[t] for t in op.inputs)
    out = tensors[op.outputs[0]]
    req = (ShardingInfo.split(lhs.rank, lhs.rank - 1), ShardingInfo.split(rhs.rank, rhs.rank - 2))
    if not all(compatible(c, r) for c, r in zip(unit.input_infos, req)):
        return None
    return ShardingPattern("SP2", "matmul", req, ShardingInfo.complete(out.rank),
                           Collective("allreduce", out.id),
                           "row-parallel matmul over the contraction dim; all-reduce partial sums",
                           (0, lhs.rank - 1))


def _passthrough_info(unit, tensors) -> Optional[ShardingInfo]:
    if not _single_splits(unit):
        return None
    split = [i for i in unit.input_infos if not i.is_complete]
    if any(s != split[0] for s in split):
        return None
    out = tensors[unit.op.outputs[0]]
    if not split:
        return ShardingInfo.complete(out.rank)
    info = split[0]
    ranks = {tensors[t].rank for t in unit.op.inputs} | {out.rank}
    if len(ranks) != 1:
        return None
    return info


def _elementwise(unit, tensors):
    info = _passthrough_info(unit, tensors)
    if info is None:
        return None
    req = tuple(info for _ in unit.input_infos)
    first = next((i for i, c in enumerate(unit.input_infos) if not c.is_complete), 0)
    axis = None if info.is_complete else (first, info.split_dim)
    return ShardingPattern("EW", "elementwise", req, info, None, "elementwise on each shard", axis)


def _softmax(unit, tensors):
    if len(unit.op.inputs) != 1:
        return None
    info = _passthrough_info(unit, tensors)
    if info is None or (info.dims and info.dims[-1]):
        return None
    axis = None if info.is_complete else (0, info.split_dim)
    return ShardingPattern("SM", "softmax", (info,), info, None, "row-wise softmax on each shard", axis)


register_pattern("matmul", _sp1)
register_pattern("matmul", _sp2)
register_pattern("elementwise", _elementwise)
register_pattern("softmax", _softmax)


def match_patterns(unit: ShardingUnit, tensors: Mapping[str, TensorSpec]) -> list:
    """Every pattern in the table compatible with the unit's kind and input ShardingInfo."""
    out = []
    for rule in PATTERN_TABLE.get(unit.kind, []):
        p = rule(unit, tensors)
        if p is not None:
            out.append(p)
    return out


def collective_bytes(c: Optional[Collective], tensors: Mapping[str, TensorSpec], k: int) -> Fraction:
    """Ring-collective traffic proxy: all-reduce 2(k-1)/k * bytes, all-gather (k-1)/k * bytes."""
    if c is None or k <= 1:
        return Fraction(0)
    nbytes = tensors[c.tensor].nbytes
    if c.kind == "allreduce":
        return Fraction(2 * (k - 1), k) * nbytes
    return Fraction(k - 1, k) * nbytes


def pattern_comm_cost(p: ShardingPattern, tensors: Mapping[str, TensorSpec], k: int) -> Fraction:
    return collective_bytes(p.comm_op, tensors, k)


def select_pattern(patterns: Sequence[ShardingPattern], tensors, k: int) -> ShardingPattern:
    return min(patterns, key=lambda p: (pattern_comm_cost(p, tensors, k), p.id))


@dataclass(frozen=True)
class Layout:
    """Where a tensor lives across the k devices of a split TaskGraph."""
    info: ShardingInfo
    sizes: Optional[tuple] = None  # extent held by each device along the split dim

    @property
    def split_dim(self):
        return self.info.split_dim


@dataclass(frozen=True)
class CollectiveSpec:
    collective: Collective
    bytes: Fraction  # traffic per step at the reference batch
    reason: str  # "pattern" | "relayout"


@dataclass(frozen=True)
class UnitPlan:
    op_id: str
    pattern: ShardingPattern
    shard_sizes: Optional[tuple]
    flop_share: tuple  # fraction of the op's FLOP per device
    param_share: tuple
    act_share: tuple
    input_infos: tuple = ()  # layouts the pattern was matched against


@dataclass(frozen=True)
class ShardedTaskGraph:
    tg_index: int
    k: int
    ratios: LoadAssignment
    units: tuple
    collectives: tuple
    output_layouts: Mapping[str, Layout] = field(default_factory=dict)
    # boundary input -> dim the first consumer partitions it on (None: needs the whole tensor)
    input_partition: Mapping[str, Optional[int]] = field(default_factory=dict)

    def device_forward_flop(self, g: CompGraph) -> tuple:
        """Forward FLOP per device at the reference batch."""
        out = [Fraction(0)] * self.k
        for u in self.units:
            f = estimate_op_cost(g.op(u.op_id), g.tensors)[0]
            for d in range(self.k):
                out[d] += u.flop_share[d] * f
        return tuple(out)

    def device_param_bytes(self, g: CompGraph) -> tuple:
        out = [Fraction(0)] * self.k
        for u in self.units:
            p = g.op(u.op_id).param_bytes
            for d in range(self.k):
                out[d] += u.param_share[d] * p
        return tuple(out)

    def device_activation_bytes(self, g: CompGraph) -> tuple:
        out = [Fraction(0)] * self.k
        for u in self.units:
            a = estimate_op_cost(g.op(u.op_id), g.tensors)[1]
            for d in range(self.k):
                out[d] += u.act_share[d] * a
        return tuple(out)

    def comm_bytes(self) -> Fraction:
        return sum((c.bytes for c in self.collectives), Fraction(0))

    def pattern_ids(self) -> dict:
        return {u.op_id: u.pattern.id for u in self.units}


def shard_sizes(extent: int, k: int, ratios: Optional[LoadAssignment], tensor_id: str, dim: int) -> tuple:
    if extent < k:
        raise UnsplittableDimensionError(tensor_id, dim, extent, k)
    weights = ratios.ratios if ratios is not None else [1] * k
    return largest_remainder(weights, extent, min_size=1)


def apply_split(tg, g: CompGraph, k: int, load_ratios: Optional[LoadAssignment] = None,
                incoming: Optional[Mapping[str, Layout]] = None, bridged: frozenset = frozenset(),
                deferred_outputs: frozenset = frozenset()) -> ShardedTaskGraph:
    """Replace every unit of a split TaskGraph with its cheapest matching distributed pattern.

    ``incoming`` gives the layout of tensors arriving from the previous TaskGraph;
    those in ``bridged`` can be made whole by the bridge layer at no cost here,
    any other non-matching split input gets an explicit all-gather. Outputs in
    ``deferred_outputs`` keep their split layout (the bridge gathers them).
    Shards along the split dim follow ``load_ratios`` (even when None).
    """
    if load_ratios is not None and len(load_ratios) != k:
        raise ValueError(f"{len(load_ratios)} load ratios for {k} shards")
    tensors = g.tensors
    incoming = dict(incoming or {})
    layouts = dict(incoming)
    ratios = load_ratios or LoadAssignment.even(k)
    units = []
    collectives = []
    input_partition = {}

    def layout_of(t):
        return layouts.get(t) or Layout(ShardingInfo.complete(tensors[t].rank))

    for op in tg.ops:
        current = [layout_of(t) for t in op.inputs]
        unit = ShardingUnit((op,), tuple(c.info for c in current))
        cands = match_patterns(unit, tensors)
        if not cands and PATTERN_TABLE.get(op.kind):
            for t, c in zip(op.inputs, current):
                if c.info.is_complete:
                    continue
                if t not in bridged:
                    coll = Collective("allgather", t, c.split_dim)
                    collectives.append(CollectiveSpec(coll, collective_bytes(coll, tensors, k), "relayout"))
                layouts[t] = Layout(ShardingInfo.complete(tensors[t].rank))
            current = [layout_of(t) for t in op.inputs]
            unit = ShardingUnit((op,), tuple(c.info for c in current))
            cands = match_patterns(unit, tensors)
        if not cands:
            raise UnsupportedSplitError(op.id, op.kind)
        p = select_pattern(cands, tensors, k)

        for t, req in zip(op.inputs, p.input_infos):
            if t in incoming and t not in input_partition:
                input_partition[t] = req.split_dim

        sizes = None
        if p.shard_axis is not None:
            idx, dim = p.shard_axis
            t = op.inputs[idx]
            src = layout_of(t)
            if src.split_dim == dim and src.sizes is not None and t not in incoming:
                sizes = src.sizes
            else:
                sizes = shard_sizes(tensors[t].shape[dim], k, ratios, t, dim)
            extent = tensors[t].shape[dim]
            share = tuple(Fraction(s, extent) for s in sizes)
        else:
            share = tuple(Fraction(1) for _ in range(k))

        out_id = op.outputs[0]
        deferred = p.comm_op is not None and p.comm_op.kind == "allgather" and out_id in deferred_outputs
        if p.comm_op is not None and not deferred:
            collectives.append(CollectiveSpec(p.comm_op, pattern_comm_cost(p, tensors, k), "pattern"))
            out_layout = Layout(ShardingInfo.complete(tensors[out_id].rank))
        elif p.output_info.is_complete:
            out_layout = Layout(p.output_info)
        else:
            out_layout = Layout(p.output_info, sizes)
        for t in op.outputs:
            layouts[t] = out_layout if t == out_id else Layout(ShardingInfo.complete(tensors[t].rank))

        if p.id in ("SP1", "SP2"):
            param_share = share
        else:
            param_share = tuple(Fraction(1) for _ in range(k))
        act_share = share if not out_layout.info.is_complete else tuple(Fraction(1) for _ in range(k))
        units.append(UnitPlan(op.id, p, sizes, share, param_share, act_share, unit.input_infos))

    produced = {t for op in tg.ops for t in op.outputs}
    output_layouts = {t: layouts[t] for t in sorted(produced) if t in layouts}
    return ShardedTaskGraph(tg.index, k, ratios, tuple(units), tuple(collectives), output_layouts, input_partition)


# --- scalar reference evaluator (2-D integer tensors, matmul and elementwise add) ---

def _matmul(a, b):
    n = len(b[0]) if b else 0
    return [[sum(a[i][x] * b[x][j] for x in range(len(b))) for j in range(n)] for i in range(len(a))]


def _add(*ms):
    return [[sum(m[i][j] for m in ms) for j in range(len(ms[0][0]))] for i in range(len(ms[0]))]


def _slice(m, dim, start, stop):
    if dim == 0:
        return [row[:] for row in m[start:stop]]
    return [row[start:stop] for row in m]


def _concat(parts, dim):
    if dim == 0:
        return [row[:] for p in parts for row in p]
    return [sum((p[i] for p in parts), []) for i in range(len(parts[0]))]


def _offsets(sizes):
    out = [0]
    for s in sizes:
        out.append(out[-1] + s)
    return out


def evaluate_reference(g: CompGraph, ops: Sequence[OpNode], inputs: Mapping[str, list]) -> dict:
    """Run ops on whole tensors. matmul multiplies, elementwise sums its inputs."""
    env = dict(inputs)
    for op in ops:
        args = [env[t] for t in op.inputs]
        if op.kind == "matmul":
            env[op.outputs[0]] = _matmul(*args)
        elif op.kind == "elementwise":
            env[op.outputs[0]] = _add(*args)
        else:
            raise NotImplementedError(f"reference evaluator does not run {op.kind}")
    return env


def evaluate_sharded(g: CompGraph, tg, sharded: ShardedTaskGraph, inputs: Mapping[str, list]) -> dict:
    """Run a sharded TaskGraph device by device and recombine every tensor to its whole value.

    Values are ("whole", m), ("split", dim, [shard per device]) or ("partial", [summand per device]).
    """
    k = sharded.k
    env = {t: ("whole", v) for t, v in inputs.items()}

    def whole(v):
        if v[0] == "whole":
            return v[1]
        if v[0] == "split":
            return _concat(v[2], v[1])
        return _add(*v[1])

    def shards(v, dim, sizes):
        if v[0] == "split" and v[1] == dim and [len(s) if dim == 0 else len(s[0]) for s in v[2]] == list(sizes):
            return v[2]
        m = whole(v)
        off = _offsets(sizes)
        return [_slice(m, dim, off[d], off[d + 1]) for d in range(k)]

    for u in sharded.units:
        op = g.op(u.op_id)
        p = u.pattern
        args = [env[t] for t in op.inputs]
        out = op.outputs[0]
        if p.id == "SP1":
            lhs = whole(args[0])
            rhs = shards(args[1], 1, u.shard_sizes)
            val = ("split", 1, [_matmul(lhs, rhs[d]) for d in range(k)])
        elif p.id == "SP2":
            lhs = shards(args[0], 1, u.shard_sizes)
            rhs = shards(args[1], 0, u.shard_sizes)
            val = ("partial", [_matmul(lhs[d], rhs[d]) for d in range(k)])
        elif p.id == "EW":
            if p.output_info.is_complete:
                val = ("whole", _add(*[whole(a) for a in args]))
            else:
                dim = p.output_info.split_dim
                parts = [shards(a, dim, u.shard_sizes) for a in args]
                val = ("split", dim, [_add(*[pp[d] for pp in parts]) for d in range(k)])
        else:
            raise NotImplementedError(f"sharded evaluator does not run pattern {p.id}")
        if p.comm_op is not None and any(c.collective == p.comm_op for c in sharded.collectives):
            val = ("whole", whole(val))  # all-gather concatenates, all-reduce sums
        env[out] = val
    return {t: whole(v) for t, v in env.items()}
