"""Computation-graph IR: tensors, operators, annotation scopes and the model file format.

Model files are JSON documents with top-level keys ``tensors``, ``ops``,
``annotations`` and ``config`` (see ``data/schemas/model.schema.json``).
Only the forward pass is described; backward and optimizer work is derived.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property, lru_cache
from importlib import resources
from typing import Mapping, Optional, Sequence, Union

import jsonschema

from .errors import ModelError, UnprofiledOperatorError

DEFAULT_SCOPE = "__default__"
OP_KINDS = ("matmul", "conv", "elementwise", "softmax", "embedding", "generic")
# optimizer update cost, FLOP per parameter byte
APPLY_FLOP_PER_PARAM_BYTE = 1


@dataclass(frozen=True)
class TensorSpec:
    id: str
    shape: tuple
    elem_bytes: int = 4
    batch_dim: Optional[int] = None

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.numel * self.elem_bytes


@dataclass(frozen=True)
class OpNode:
    id: str
    kind: str
    inputs: tuple
    outputs: tuple
    param_bytes: int = 0
    flop: Optional[int] = None
    scope: str = DEFAULT_SCOPE


@dataclass(frozen=True)
class Replicate:
    device_count: int
    name = "replicate"

    def __str__(self):
        return f"replicate({self.device_count})"


@dataclass(frozen=True)
class Split:
    device_count: int
    name = "split"

    def __str__(self):
        return f"split({self.device_count})"


Primitive = Union[Replicate, Split]


def make_primitive(name: str, device_count: int) -> Primitive:
    if name == "replicate":
        return Replicate(device_count)
    if name == "split":
        if device_count < 2:
            raise ModelError("split requires device_count >= 2", name)
        return Split(device_count)
    raise ModelError(f"unknown primitive {name!r}")


@dataclass(frozen=True)
class Annotation:
    scope_id: str
    primitive: Primitive


@dataclass(frozen=True)
class PlanConfig:
    num_task_graph: Optional[int] = None
    num_micro_batch: int = 1
    auto_parallel: bool = False
    global_batch: Optional[int] = None
    optimizer_state_multiplier: Fraction = Fraction(2)
    backward_flop_multiplier: Fraction = Fraction(2)
    # lets every task graph of a replica reuse the same physical devices
    share_devices: bool = False

    def __post_init__(self):
        if self.num_micro_batch < 1:
            raise ModelError("num_micro_batch must be >= 1", "config")
        if self.auto_parallel and not self.num_task_graph:
            raise ModelError("auto_parallel requires num_task_graph", "config")
        if self.num_task_graph is not None and self.num_task_graph < 1:
            raise ModelError("num_task_graph must be >= 1", "config")
        if self.global_batch is not None and self.global_batch < 1:
            raise ModelError("global_batch must be >= 1", "config")
        if self.optimizer_state_multiplier < 0:
            raise ModelError("optimizer_state_multiplier must be >= 0", "config")
        if self.backward_flop_multiplier <= 0:
            raise ModelError("backward_flop_multiplier must be > 0", "config")

    @property
    def pipelined(self) -> bool:
        return self.num_micro_batch > 1


@dataclass(frozen=True)
class CompGraph:
    tensors: Mapping[str, TensorSpec]
    ops: tuple
    annotations: tuple = ()
    config: PlanConfig = field(default_factory=PlanConfig)

    @cached_property
    def producers(self) -> dict:
        return {t: op.id for op in self.ops for t in op.outputs}

    @cached_property
    def op_index(self) -> dict:
        return {op.id: i for i, op in enumerate(self.ops)}

    def op(self, op_id: str) -> OpNode:
        return self.ops[self.op_index[op_id]]

    @property
    def graph_inputs(self) -> list:
        return [t for t in self.tensors if t not in self.producers]

    @cached_property
    def reference_batch(self) -> int:
        """Batch size the tensor shapes are written at."""
        sizes = {t.shape[t.batch_dim] for t in self.tensors.values() if t.batch_dim is not None}
        if not sizes:
            return self.config.global_batch or 1
        return min(sizes)

    @property
    def global_batch(self) -> int:
        return self.config.global_batch or self.reference_batch

    def annotation(self, scope_id: str) -> Optional[Annotation]:
        for a in self.annotations:
            if a.scope_id == scope_id:
                return a
        return None

    def scope_runs(self) -> list:
        """Contiguous (scope_id, [ops]) runs in definition order."""
        runs = []
        for op in self.ops:
            if runs and runs[-1][0] == op.scope:
                runs[-1][1].append(op)
            else:
                runs.append((op.scope, [op]))
        return runs

    def with_config(self, **changes) -> "CompGraph":
        from dataclasses import replace
        return CompGraph(dict(self.tensors), self.ops, self.annotations, replace(self.config, **changes))


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    text = resources.files("parplan").joinpath("data", "schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate_document(doc, schema_name: str):
    try:
        jsonschema.validate(doc, load_schema(schema_name))
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ModelError(f"schema violation: {e.message}", where) from None


def _rational(value, name) -> Fraction:
    try:
        return Fraction(str(value))
    except (ValueError, ZeroDivisionError):
        raise ModelError(f"not a rational number: {value!r}", name) from None


def config_from_dict(d: Mapping) -> PlanConfig:
    kw = dict(d)
    for key in ("optimizer_state_multiplier", "backward_flop_multiplier"):
        if key in kw:
            kw[key] = _rational(kw[key], f"config.{key}")
    return PlanConfig(**kw)


def config_to_dict(c: PlanConfig) -> dict:
    return {
        "num_task_graph": c.num_task_graph,
        "num_micro_batch": c.num_micro_batch,
        "auto_parallel": c.auto_parallel,
        "global_batch": c.global_batch,
        "optimizer_state_multiplier": _fmt_rational(c.optimizer_state_multiplier),
        "backward_flop_multiplier": _fmt_rational(c.backward_flop_multiplier),
        "share_devices": c.share_devices,
    }


def _fmt_rational(x: Fraction):
    return float(x) if Fraction(float(x)) == x else str(x)


def graph_from_dict(doc: Mapping) -> CompGraph:
    validate_document(doc, "model")
    tensors = {}
    for t in doc["tensors"]:
        if t["id"] in tensors:
            raise ModelError("duplicate tensor id", t["id"])
        spec = TensorSpec(t["id"], tuple(t["shape"]), t.get("elem_bytes", 4), t.get("batch_dim"))
        if spec.batch_dim is not None and spec.batch_dim >= spec.rank:
            raise ModelError(f"batch_dim {spec.batch_dim} out of range for rank {spec.rank}", spec.id)
        tensors[spec.id] = spec
    ops = tuple(
        OpNode(o["id"], o["kind"], tuple(o["inputs"]), tuple(o["outputs"]),
               o.get("param_bytes", 0), o.get("flop"), o.get("scope", DEFAULT_SCOPE))
        for o in doc["ops"]
    )
    annotations = []
    for a in doc.get("annotations", []):
        annotations.append(Annotation(a["scope_id"], make_primitive(a["primitive"], a["device_count"])))
    try:
        config = config_from_dict(doc.get("config", {}))
    except TypeError as e:
        raise ModelError(str(e), "config") from None
    graph = CompGraph(tensors, ops, tuple(annotations), config)
    validate_graph(graph)
    return graph


def parse_model(text: str) -> CompGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelError(f"not valid JSON: {e}") from None
    return graph_from_dict(doc)


def load_model(path) -> CompGraph:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ModelError(f"cannot read model file: {e.strerror}", str(path)) from None
    return parse_model(text)


def graph_to_dict(g: CompGraph) -> dict:
    tensors = []
    for t in g.tensors.values():
        d = {"id": t.id, "shape": list(t.shape), "elem_bytes": t.elem_bytes}
        if t.batch_dim is not None:
            d["batch_dim"] = t.batch_dim
        tensors.append(d)
    ops = []
    for op in g.ops:
        d = {"id": op.id, "kind": op.kind, "inputs": list(op.inputs), "outputs": list(op.outputs),
             "param_bytes": op.param_bytes}
        if op.flop is not None:
            d["flop"] = op.flop
        if op.scope != DEFAULT_SCOPE:
            d["scope"] = op.scope
        ops.append(d)
    annotations = [{"scope_id": a.scope_id, "primitive": a.primitive.name,
                    "device_count": a.primitive.device_count} for a in g.annotations]
    return {"tensors": tensors, "ops": ops, "annotations": annotations, "config": config_to_dict(g.config)}


def dump_model(g: CompGraph) -> str:
    return json.dumps(graph_to_dict(g), indent=2)


def validate_graph(g: CompGraph) -> None:
    """Raise ModelError on any structural problem; returns None when the graph is sound."""
    seen_ops = set()
    producers = {}
    for op in g.ops:
        if op.id in seen_ops:
            raise ModelError("duplicate op id", op.id)
        seen_ops.add(op.id)
        if op.kind not in OP_KINDS:
            raise ModelError(f"unknown operator kind {op.kind!r}", op.id)
        if op.param_bytes < 0 or (op.flop is not None and op.flop < 0):
            raise ModelError("param_bytes and flop must be non-negative", op.id)
        for t in op.inputs + op.outputs:
            if t not in g.tensors:
                raise ModelError(f"dangling reference to undefined tensor {t!r}", op.id)
        for t in op.outputs:
            if t in producers:
                raise ModelError(f"tensor {t!r} is produced by both {producers[t]!r} and {op.id!r}", op.id)
            producers[t] = op.id

    scope_ids = set()
    for a in g.annotations:
        if a.scope_id in scope_ids:
            raise ModelError("duplicate annotation scope", a.scope_id)
        if a.scope_id == DEFAULT_SCOPE:
            raise ModelError("reserved scope id", a.scope_id)
        scope_ids.add(a.scope_id)
    for op in g.ops:
        if op.scope != DEFAULT_SCOPE and op.scope not in scope_ids:
            raise ModelError(f"scope {op.scope!r} has no annotation", op.id)

    _check_acyclic(g, producers)

    closed = set()
    current = None
    for op in g.ops:
        if op.scope != current:
            if op.scope in closed:
                raise ModelError(f"scope {op.scope!r} is interleaved with another scope", op.id)
            if current is not None:
                closed.add(current)
            current = op.scope

    batch_sizes = {t.shape[t.batch_dim] for t in g.tensors.values() if t.batch_dim is not None}
    if len(batch_sizes) > 1:
        raise ModelError(f"tensors disagree on the batch size: {sorted(batch_sizes)}", "tensors")


def _check_acyclic(g: CompGraph, producers: Mapping[str, str]) -> None:
    deps = {op.id: {producers[t] for t in op.inputs if t in producers} for op in g.ops}
    state = {}
    for root in deps:
        if root in state:
            continue
        stack = [(root, iter(sorted(deps[root])))]
        state[root] = "open"
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = "done"
                stack.pop()
            elif state.get(nxt) == "open":
                raise ModelError(f"cycle detected through {nxt!r}", node)
            elif nxt not in state:
                state[nxt] = "open"
                stack.append((nxt, iter(sorted(deps[nxt]))))


def estimate_op_cost(op: OpNode, tensors: Mapping[str, TensorSpec]) -> tuple:
    """Forward (flop, activation_bytes) of one operator at the reference batch."""
    outs = [tensors[t] for t in op.outputs]
    activation_bytes = sum(t.nbytes for t in outs)
    if op.flop is not None:
        return op.flop, activation_bytes
    if op.kind == "matmul":
        if len(op.inputs) != 2:
            raise ModelError("matmul takes exactly two inputs", op.id)
        lhs, rhs = (tensors[t] for t in op.inputs)
        if lhs.rank < 2 or rhs.rank < 2 or lhs.shape[-1] != rhs.shape[-2]:
            raise ModelError(f"matmul shapes {list(lhs.shape)} x {list(rhs.shape)} do not contract", op.id)
        # [.., m, k] x [k, n] -> 2*m*k*n
        return 2 * lhs.numel * rhs.shape[-1], activation_bytes
    if op.kind == "elementwise":
        return sum(t.numel for t in outs), activation_bytes
    if op.kind == "softmax":
        return 5 * sum(t.numel for t in outs), activation_bytes
    raise UnprofiledOperatorError(op.id, op.kind)


def forward_flops(g: CompGraph) -> dict:
    return {op.id: estimate_op_cost(op, g.tensors)[0] for op in g.ops}


def derive_backward_costs(g: CompGraph) -> dict:
    """Backward FLOP per op: the forward FLOP times the configured multiplier."""
    mult = g.config.backward_flop_multiplier
    return {op_id: mult * f for op_id, f in forward_flops(g).items()}


def apply_flop(op: OpNode) -> int:
    return op.param_bytes * APPLY_FLOP_PER_PARAM_BYTE


def total_step_flop(g: CompGraph) -> Fraction:
    """Forward plus backward FLOP of the whole graph (the apply phase is charged separately)."""
    fwd = forward_flops(g)
    bwd = derive_backward_costs(g)
    return sum(Fraction(fwd[k]) + bwd[k] for k in fwd)
