"""Physical devices, clusters and VirtualDevice generation."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Sequence

from .errors import InsufficientDevicesError, ModelError
from .model_ir import validate_document

log = logging.getLogger(__name__)

DEFAULT_LINK_LATENCY = 10e-6


@dataclass(frozen=True)
class DeviceSpec:
    id: str
    flops_per_sec: float
    mem_bytes: int
    node_id: str
    intra_node_bw: float
    inter_node_bw: float

    def __post_init__(self):
        if self.flops_per_sec <= 0 or self.mem_bytes <= 0:
            raise ModelError("flops_per_sec and mem_bytes must be positive", self.id)
        if self.intra_node_bw < self.inter_node_bw:
            raise ModelError("intra_node_bw must be >= inter_node_bw", self.id)


@dataclass(frozen=True)
class Cluster:
    devices: tuple
    link_latency: float = DEFAULT_LINK_LATENCY

    def __post_init__(self):
        ids = [d.id for d in self.devices]
        if len(set(ids)) != len(ids):
            raise ModelError("device ids must be unique", "devices")
        if not ids:
            raise ModelError("cluster has no devices", "devices")

    def __len__(self):
        return len(self.devices)

    def device(self, device_id: str) -> DeviceSpec:
        for d in self.devices:
            if d.id == device_id:
                return d
        raise KeyError(device_id)

    def position(self, device_id: str) -> int:
        return [d.id for d in self.devices].index(device_id)

    def link_bandwidth(self, a: str, b: str) -> float:
        da, db = self.device(a), self.device(b)
        if da.node_id == db.node_id:
            return min(da.intra_node_bw, db.intra_node_bw)
        return min(da.inter_node_bw, db.inter_node_bw)

    def group_bandwidth(self, device_ids: Sequence[str]) -> float:
        """Slowest pairwise link inside a device group (inf for a single device)."""
        ids = list(dict.fromkeys(device_ids))
        bw = float("inf")
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                bw = min(bw, self.link_bandwidth(a, b))
        return bw


@dataclass(frozen=True)
class VirtualDevice:
    taskgraph_index: int
    replica_index: int
    devices: tuple


def cluster_from_dict(doc) -> Cluster:
    validate_document(doc, "cluster")
    devices = tuple(DeviceSpec(**d) for d in doc["devices"])
    return Cluster(devices, doc.get("link_latency", DEFAULT_LINK_LATENCY))


def cluster_to_dict(c: Cluster) -> dict:
    return {
        "link_latency": c.link_latency,
        "devices": [
            {"id": d.id, "flops_per_sec": d.flops_per_sec, "mem_bytes": d.mem_bytes, "node_id": d.node_id,
             "intra_node_bw": d.intra_node_bw, "inter_node_bw": d.inter_node_bw}
            for d in c.devices
        ],
    }


def parse_cluster(text: str) -> Cluster:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelError(f"not valid JSON: {e}") from None
    return cluster_from_dict(doc)


def load_cluster(path) -> Cluster:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ModelError(f"cannot read cluster file: {e.strerror}", str(path)) from None
    return parse_cluster(text)


def generate_virtual_devices(cluster: Cluster, counts: Sequence[int], share_devices: bool = False):
    """Assign physical devices to task graphs, replicating the layout for nested data parallelism.

    Devices are taken sequentially in cluster order. Returns ``(vds, degree, idle)`` where
    ``vds[r][i]`` is the VirtualDevice of task graph ``i`` in replica ``r``.

    With ``share_devices`` every task graph of a replica draws from the same block of
    ``max(counts)`` devices instead of disjoint blocks.
    """
    if not counts or any(c < 1 for c in counts):
        raise ModelError("device counts must be >= 1", "annotations")
    k = len(cluster.devices)
    per_replica = max(counts) if share_devices else sum(counts)
    if k < per_replica:
        raise InsufficientDevicesError(k, per_replica)
    degree = k // per_replica
    ids = [d.id for d in cluster.devices]
    vds = []
    for r in range(degree):
        block = ids[r * per_replica:(r + 1) * per_replica]
        replica = []
        offset = 0
        for i, c in enumerate(counts):
            if share_devices:
                replica.append(VirtualDevice(i, r, tuple(block[:c])))
            else:
                replica.append(VirtualDevice(i, r, tuple(block[offset:offset + c])))
                offset += c
        vds.append(tuple(replica))
    idle = tuple(ids[degree * per_replica:])
    if idle:
        log.warning("%d device(s) left idle: %d is not a multiple of %d (%s)",
                    len(idle), k, per_replica, ", ".join(idle))
    return tuple(vds), degree, idle


def order_devices_by_memory(vd: VirtualDevice, cluster: Cluster) -> VirtualDevice:
    """Sort a VirtualDevice's devices by memory capacity, largest first; ties keep cluster order."""
    ordered = sorted(vd.devices, key=lambda d: (-cluster.device(d).mem_bytes, cluster.position(d)))
    return VirtualDevice(vd.taskgraph_index, vd.replica_index, tuple(ordered))


def reorder_pipeline_devices(replica_vds: Sequence[VirtualDevice], cluster: Cluster) -> tuple:
    """Re-deal one replica's devices so earlier pipeline stages get the larger memories.

    The union of the replica's devices is sorted by memory and sliced back into
    stages with the original per-stage device counts.
    """
    merged = VirtualDevice(-1, replica_vds[0].replica_index,
                           tuple(d for vd in replica_vds for d in vd.devices))
    ordered = order_devices_by_memory(merged, cluster).devices
    out = []
    offset = 0
    for vd in replica_vds:
        n = len(vd.devices)
        out.append(VirtualDevice(vd.taskgraph_index, vd.replica_index, ordered[offset:offset + n]))
        offset += n
    return tuple(out)
