"""Planning pipeline: TaskGraphs -> VirtualDevices -> balancing -> sharding -> bridges -> plan."""
from __future__ import annotations

import logging
from dataclasses import replace
from fractions import Fraction
from typing import Optional, Sequence

from . import balance
from .bridge import boundary_tensors, fuse_bridges, insert_bridges, producer_layout, strategies_differ
from .cluster import Cluster, generate_virtual_devices, reorder_pipeline_devices
from .errors import PlanningError
from .model_ir import DEFAULT_SCOPE, CompGraph, Replicate, Split
from .plan import ExecutionPlan, GradSync
from .sharding import apply_split
from .taskgraph import (TaskGraph, auto_partition, cached_for_stage, partition_by_annotation,
                        profile_taskgraph)

log = logging.getLogger(__name__)


def _replica_batches(g: CompGraph, degree: int) -> tuple:
    if g.global_batch < degree:
        raise PlanningError(f"underfull batch: global batch {g.global_batch} < {degree} model replicas")
    return balance.largest_remainder([1] * degree, g.global_batch, min_size=1)


def _stage_profile(g: CompGraph, tgs, s: int, replica_batch: int):
    n, k = len(tgs), g.config.num_micro_batch
    return profile_taskgraph(tgs[s], g, cached_for_stage(n, s, k), Fraction(replica_batch, k))


def _balance(g, cluster, tgs, vds, replica_batches, balanced: bool) -> tuple:
    out = []
    for r, rep in enumerate(vds):
        row = []
        for s, tg in enumerate(tgs):
            devices = [cluster.device(d) for d in rep[s].devices]
            k = len(devices)
            replicated = isinstance(tg.strategy, Replicate)
            if k == 1:
                a = balance.LoadAssignment((1,))
            elif not balanced:
                a = balance.LoadAssignment.even(k)
                if replicated:
                    b = balance.assignment_to_batches(a, replica_batches[r])
                    a = balance.LoadAssignment(tuple(Fraction(x, replica_batches[r]) for x in b))
            else:
                prof = _stage_profile(g, tgs, s, replica_batches[r])
                a = balance.memory_constraint_balance(prof, devices,
                                                      replica_batches[r] if replicated else None)
            row.append(a)
        out.append(tuple(row))
    return tuple(out)


def _shard(g, tgs, vds, assignments) -> tuple:
    out = []
    for r in range(len(vds)):
        row = []
        for s, tg in enumerate(tgs):
            if not isinstance(tg.strategy, Split):
                row.append(None)
                continue
            incoming, bridged, deferred = {}, frozenset(), frozenset()
            if s > 0:
                prev = tgs[s - 1]
                shared = boundary_tensors(g, prev, tg)
                incoming = {t: producer_layout(g, prev, row[s - 1], t) for t in shared}
                if strategies_differ(prev.strategy, tg.strategy):
                    bridged = frozenset(shared)
            if s + 1 < len(tgs):
                deferred = frozenset(boundary_tensors(g, tg, tgs[s + 1]))
            row.append(apply_split(tg, g, tg.device_count, assignments[r][s], incoming, bridged, deferred))
        out.append(tuple(row))
    return tuple(out)


def _grad_syncs(g, tgs, profiles, vds, shardings) -> tuple:
    degree = len(vds)
    out = []
    for s, tg in enumerate(tgs):
        params = profiles[s].param_bytes
        if isinstance(tg.strategy, Replicate):
            if tg.device_count > 1 and params:
                for r in range(degree):
                    out.append(GradSync(f"allreduce:tg{s}:r{r}", s, "intra", vds[r][s].devices, params, replica=r))
            per_position = [params] * tg.device_count
        else:
            per_position = [max(round(shardings[r][s].device_param_bytes(g)[j]) for r in range(degree))
                            for j in range(tg.device_count)]
        if degree > 1:
            for j, nbytes in enumerate(per_position):
                if nbytes:
                    devices = tuple(vds[r][s].devices[j] for r in range(degree))
                    out.append(GradSync(f"allreduce:tg{s}:p{j}", s, "cross", devices, nbytes, position=j))
    return tuple(out)


def assemble_plan(g: CompGraph, cluster: Cluster, tgs: Sequence[TaskGraph], vds, idle=(),
                  assignments=None, balanced: bool = True, fuse: bool = True, warnings=()) -> ExecutionPlan:
    """Finish a plan from resolved TaskGraphs and VirtualDevices.

    ``assignments`` ([replica][taskgraph] LoadAssignment) is computed when omitted.
    """
    tgs = tuple(tgs)
    vds = tuple(tuple(rep) for rep in vds)
    degree = len(vds)
    replica_batches = _replica_batches(g, degree)
    profiles = tuple(_stage_profile(g, tgs, s, replica_batches[0]) for s in range(len(tgs)))
    if assignments is None:
        assignments = _balance(g, cluster, tgs, vds, replica_batches, balanced)
    assignments = tuple(tuple(row) for row in assignments)
    splits = []
    for r, row in enumerate(assignments):
        splits.append(tuple(
            balance.assignment_to_batches(a, replica_batches[r]) if isinstance(tg.strategy, Replicate) else None
            for tg, a in zip(tgs, row)
        ))
    shardings = _shard(g, tgs, vds, assignments)
    plan = ExecutionPlan(
        graph=g, cluster=cluster, taskgraphs=tgs, profiles=profiles, virtual_devices=vds,
        nested_dp_degree=degree, idle_devices=tuple(idle), replica_batches=replica_batches,
        assignments=assignments, batch_splits=tuple(splits), shardings=shardings,
        warnings=tuple(warnings), balanced=balanced, fuse=fuse,
    )
    plan = insert_bridges(plan)
    if fuse:
        plan = fuse_bridges(plan)
    return replace(plan, grad_syncs=_grad_syncs(g, tgs, profiles, vds, shardings))


def build_plan(g: CompGraph, cluster: Cluster, balanced: bool = True, fuse: bool = True) -> ExecutionPlan:
    """Run the whole planning pipeline on an annotated (or auto-parallel) model."""
    cfg = g.config
    warnings = []
    if cfg.auto_parallel:
        n = cfg.num_task_graph
        vds, degree, idle = generate_virtual_devices(cluster, [1] * n)
        if n > 1:
            vds = tuple(reorder_pipeline_devices(rep, cluster) for rep in vds)
        stage_devices = [cluster.device(vd.devices[0]) for vd in vds[0]]
        micro = Fraction(g.global_batch, degree * cfg.num_micro_batch)
        tgs = auto_partition(g, n, stage_devices, micro)
    else:
        tgs = partition_by_annotation(g)
        if cfg.num_task_graph is not None and cfg.num_task_graph != len(tgs):
            warnings.append(f"num_task_graph={cfg.num_task_graph} ignored: annotations give {len(tgs)} task graph(s)")
        counts = [tg.device_count for tg in tgs]
        vds, degree, idle = generate_virtual_devices(cluster, counts, cfg.share_devices)
        if len(tgs) > 1 and not cfg.share_devices:
            vds = tuple(reorder_pipeline_devices(rep, cluster) for rep in vds)
    if idle:
        warnings.append(f"{len(idle)} device(s) idle: {', '.join(idle)}")
    for w in warnings:
        log.info(w)
    return assemble_plan(g, cluster, tgs, vds, idle, None, balanced, fuse, warnings)


def data_parallel_graph(g: CompGraph) -> CompGraph:
    """The same model with every annotation dropped: plain nested data parallelism."""
    ops = tuple(replace(op, scope=DEFAULT_SCOPE) for op in g.ops)
    cfg = replace(g.config, auto_parallel=False, num_task_graph=None, share_devices=False)
    return CompGraph(dict(g.tensors), ops, (), cfg)
