"""Bridge layers between consecutive TaskGraphs with different strategies.

A replicated producer holds its outputs split along the batch dim, a split
producer holds them split along its shard dim. When the consumer runs a
different strategy or degree, a bridge gathers the full tensor. If the consumer
immediately re-partitions on the gather dim, the gather/partition pair is fused
into a direct re-shard.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Optional

from .errors import MissingBatchDimError
from .model_ir import CompGraph, Replicate, Split
from .sharding import Layout, ShardingInfo


@dataclass(frozen=True)
class BridgeSpec:
    producer_tg: int
    consumer_tg: int
    tensor: str
    mode: str  # "gather_batch" | "gather_split"
    dim: int
    gathered_bytes: int
    consumer_degree: int
    partition_dim: Optional[int] = None
    fused: bool = False

    def __post_init__(self):
        if self.producer_tg == self.consumer_tg:
            raise ValueError("a bridge joins two different task graphs")

    @property
    def id(self) -> str:
        return f"bridge:tg{self.producer_tg}->tg{self.consumer_tg}:{self.tensor}"

    @property
    def reshard_bytes(self) -> Fraction:
        k = self.consumer_degree
        return Fraction(k - 1, k) * self.gathered_bytes

    @property
    def comm_bytes(self) -> Fraction:
        """Traffic per step at the reference batch, for the forward direction."""
        if self.fused:
            return self.reshard_bytes
        partition = self.reshard_bytes if self.partition_dim is not None else 0
        return Fraction(self.gathered_bytes) + partition

    def describe(self) -> str:
        label = "GatherBatch" if self.mode == "gather_batch" else "GatherSplit"
        fused = " fused" if self.fused else ""
        return f"tg{self.producer_tg}->tg{self.consumer_tg} {label}({self.dim}) on {self.tensor}{fused}"


def strategies_differ(a, b) -> bool:
    return type(a) is not type(b) or a.device_count != b.device_count


def boundary_tensors(g: CompGraph, producer, consumer) -> list:
    produced = {t for op in producer.ops for t in op.outputs}
    return sorted({t for op in consumer.ops for t in op.inputs if t in produced})


def producer_layout(g: CompGraph, tg, sharded, tensor: str) -> Layout:
    spec = g.tensors[tensor]
    if isinstance(tg.strategy, Split):
        if sharded is not None and tensor in sharded.output_layouts:
            return sharded.output_layouts[tensor]
        return Layout(ShardingInfo.complete(spec.rank))
    if tg.device_count > 1 and spec.batch_dim is not None:
        return Layout(ShardingInfo.split(spec.rank, spec.batch_dim))
    return Layout(ShardingInfo.complete(spec.rank))


def consumer_partition_dim(g: CompGraph, tg, sharded, tensor: str) -> Optional[int]:
    if isinstance(tg.strategy, Split):
        return sharded.input_partition.get(tensor) if sharded is not None else None
    if tg.device_count > 1:
        return g.tensors[tensor].batch_dim
    return None


def plan_bridges(g: CompGraph, taskgraphs, shardings) -> tuple:
    """BridgeSpecs for every partitioned boundary tensor between mismatched neighbours.

    ``shardings`` maps TaskGraph index to its ShardedTaskGraph (or None).
    """
    out = []
    for prod, cons in zip(taskgraphs, taskgraphs[1:]):
        if not strategies_differ(prod.strategy, cons.strategy):
            continue
        for t in boundary_tensors(g, prod, cons):
            spec = g.tensors[t]
            if isinstance(prod.strategy, Replicate):
                if prod.device_count == 1:
                    continue
                if spec.batch_dim is None:
                    raise MissingBatchDimError(t)
                mode, dim = "gather_batch", spec.batch_dim
            else:
                layout = producer_layout(g, prod, shardings.get(prod.index), t)
                if layout.info.is_complete:
                    continue
                mode, dim = "gather_split", layout.split_dim
            out.append(BridgeSpec(prod.index, cons.index, t, mode, dim, spec.nbytes, cons.device_count,
                                  consumer_partition_dim(g, cons, shardings.get(cons.index), t)))
    return tuple(out)


def insert_bridges(plan):
    shardings = {tg.index: plan.shardings[0][tg.index] for tg in plan.taskgraphs}
    return replace(plan, bridges=plan_bridges(plan.graph, plan.taskgraphs, shardings))


def fuse_bridge(b: BridgeSpec) -> BridgeSpec:
    return replace(b, fused=b.partition_dim is not None and b.partition_dim == b.dim)


def fuse_bridges(plan):
    return replace(plan, bridges=tuple(fuse_bridge(b) for b in plan.bridges), fuse=True)


def bridge_bytes(bridges) -> Fraction:
    return sum((b.comm_bytes for b in bridges), Fraction(0))
