"""The resolved distributed execution plan."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .cluster import Cluster
from .model_ir import CompGraph, PlanConfig, Replicate, Split


@dataclass(frozen=True)
class GradSync:
    """Gradient all-reduce for one TaskGraph, either inside a replica or across replicas."""
    id: str
    tg_index: int
    level: str  # "intra" | "cross"
    devices: tuple
    bytes: int
    replica: Optional[int] = None
    position: Optional[int] = None


@dataclass(frozen=True)
class ExecutionPlan:
    graph: CompGraph
    cluster: Cluster
    taskgraphs: tuple
    profiles: tuple
    virtual_devices: tuple  # [replica][taskgraph] -> VirtualDevice
    nested_dp_degree: int
    idle_devices: tuple
    replica_batches: tuple
    assignments: tuple  # [replica][taskgraph] -> LoadAssignment
    batch_splits: tuple  # [replica][taskgraph] -> per-device samples (replicate) or None
    shardings: tuple  # [replica][taskgraph] -> ShardedTaskGraph or None
    bridges: tuple = ()
    grad_syncs: tuple = ()
    warnings: tuple = ()
    balanced: bool = True
    fuse: bool = True

    @property
    def config(self) -> PlanConfig:
        return self.graph.config

    @property
    def num_stages(self) -> int:
        return len(self.taskgraphs)

    @property
    def num_micro_batch(self) -> int:
        return self.config.num_micro_batch

    def devices_of(self, replica: int, tg: int) -> tuple:
        return self.virtual_devices[replica][tg].devices

    def used_devices(self) -> list:
        seen = {}
        for rep in self.virtual_devices:
            for vd in rep:
                for d in vd.devices:
                    seen.setdefault(d, None)
        return list(seen)


def grad_sync_bytes(plan: ExecutionPlan) -> int:
    """Gradient bytes one model replica has to synchronise per step.

    Parameters with more than one copy (replicated TaskGraphs, or any TaskGraph
    under nested data parallelism) are synchronised; split parameters are local.
    """
    total = 0
    for tg, prof in zip(plan.taskgraphs, plan.profiles):
        if isinstance(tg.strategy, Replicate) and (tg.device_count > 1 or plan.nested_dp_degree > 1):
            total += prof.param_bytes
        elif isinstance(tg.strategy, Split) and plan.nested_dp_degree > 1:
            total += prof.param_bytes
    return total


def data_parallel_sync_bytes(plan: ExecutionPlan) -> int:
    """What plain data parallelism over the whole model would synchronise."""
    return sum(op.param_bytes for op in plan.graph.ops)
