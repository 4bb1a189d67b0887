"""Plan documents: versioned JSON serialisation of an ExecutionPlan."""
from __future__ import annotations

import json
from fractions import Fraction

from .balance import LoadAssignment
from .cluster import VirtualDevice, cluster_from_dict, cluster_to_dict
from .errors import InputError, ModelError
from .model_ir import graph_from_dict, graph_to_dict, make_primitive, validate_document
from .plan import ExecutionPlan
from .planner import assemble_plan
from .schedule_sim import peak_memory
from .taskgraph import TaskGraph

VERSION = 1


def _num(x):
    """Exact integers stay integers; other rationals become floats."""
    x = Fraction(x)
    return int(x) if x.denominator == 1 else float(x)


def _sharding_doc(sh):
    if sh is None:
        return None
    return {
        "patterns": sh.pattern_ids(),
        "shard_sizes": {u.op_id: list(u.shard_sizes) for u in sh.units if u.shard_sizes is not None},
        "collectives": [{"kind": c.collective.kind, "tensor": c.collective.tensor, "dim": c.collective.dim,
                         "bytes": _num(c.bytes), "reason": c.reason} for c in sh.collectives],
    }


def plan_to_document(plan: ExecutionPlan) -> dict:
    mem = peak_memory(plan)
    return {
        "version": VERSION,
        "model": graph_to_dict(plan.graph),
        "cluster": cluster_to_dict(plan.cluster),
        "options": {"balanced": plan.balanced, "fuse_bridges": plan.fuse},
        "nested_dp_degree": plan.nested_dp_degree,
        "idle_devices": list(plan.idle_devices),
        "replica_batches": list(plan.replica_batches),
        "taskgraphs": [
            {"index": tg.index, "scope": tg.scope, "strategy": tg.strategy.name,
             "device_count": tg.device_count, "ops": list(tg.op_ids),
             "profile": {"tg_flop": p.tg_flop, "tg_mem": p.tg_mem, "param_bytes": p.param_bytes,
                         "activation_bytes_per_microbatch": p.activation_bytes_per_microbatch,
                         "cached_microbatches": p.cached_microbatches}}
            for tg, p in zip(plan.taskgraphs, plan.profiles)
        ],
        "replicas": [
            {"index": r, "stages": [
                {"taskgraph": s, "devices": list(vd.devices),
                 "load_ratios": plan.assignments[r][s].as_floats(),
                 "load_ratios_exact": [str(x) for x in plan.assignments[r][s].ratios],
                 "batch_split": None if plan.batch_splits[r][s] is None else list(plan.batch_splits[r][s]),
                 "sharding": _sharding_doc(plan.shardings[r][s])}
                for s, vd in enumerate(rep)]}
            for r, rep in enumerate(plan.virtual_devices)
        ],
        "bridges": [
            {"producer_tg": b.producer_tg, "consumer_tg": b.consumer_tg, "tensor": b.tensor, "mode": b.mode,
             "dim": b.dim, "gathered_bytes": b.gathered_bytes, "consumer_degree": b.consumer_degree,
             "partition_dim": b.partition_dim, "fused": b.fused, "comm_bytes": _num(b.comm_bytes)}
            for b in plan.bridges
        ],
        "collectives": [
            {"id": c.id, "taskgraph": c.tg_index, "level": c.level, "devices": list(c.devices), "bytes": c.bytes}
            for c in plan.grad_syncs
        ],
        "memory": {"stage_peak": list(mem.stage_peak), "device_peak": mem.device_peak,
                   "defects": list(mem.defects)},
        "warnings": list(plan.warnings),
    }


def plan_from_document(doc) -> ExecutionPlan:
    """Rebuild a plan from the decisions recorded in a document (strategies, devices, load ratios)."""
    validate_document(doc, "plan")
    if doc["version"] != VERSION:
        raise InputError(f"unsupported plan document version {doc['version']}")
    g = graph_from_dict(doc["model"])
    cluster = cluster_from_dict(doc["cluster"])
    try:
        tgs = tuple(
            TaskGraph(t["index"], tuple(g.op(o) for o in t["ops"]),
                      make_primitive(t["strategy"], t["device_count"]), t["scope"])
            for t in doc["taskgraphs"]
        )
        vds, assignments = [], []
        for rep in doc["replicas"]:
            vds.append(tuple(VirtualDevice(st["taskgraph"], rep["index"], tuple(st["devices"]))
                             for st in rep["stages"]))
            assignments.append(tuple(LoadAssignment(tuple(Fraction(x) for x in st["load_ratios_exact"]))
                                     for st in rep["stages"]))
    except (KeyError, ValueError) as e:
        raise ModelError(f"malformed plan document: {e}") from None
    opts = doc["options"]
    return assemble_plan(g, cluster, tgs, vds, doc["idle_devices"], assignments,
                         opts["balanced"], opts["fuse_bridges"], doc["warnings"])


def dumps_plan(plan: ExecutionPlan) -> str:
    return json.dumps(plan_to_document(plan), indent=2, sort_keys=True) + "\n"


def parse_plan(text: str) -> ExecutionPlan:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelError(f"not valid JSON: {e}") from None
    return plan_from_document(doc)


def load_plan(path) -> ExecutionPlan:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ModelError(f"cannot read plan file: {e.strerror}", str(path)) from None
    return parse_plan(text)
