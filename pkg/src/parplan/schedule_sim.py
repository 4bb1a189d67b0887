"""Backward-first pipeline scheduling and discrete-event simulation of an ExecutionPlan.

Cost model: compute time = FLOP / device FLOP rate; a ring collective moving
``b`` bytes over ``n`` devices takes b / bw_min + (n - 1) * latency, where
bw_min is the slowest link class in the group. Every device has a compute lane
and a comm lane, so communication overlaps computation unless a dependency
orders them.
"""
from __future__ import annotations

import heapq
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .model_ir import Replicate, estimate_op_cost
from .plan import ExecutionPlan, data_parallel_sync_bytes, grad_sync_bytes
from .taskgraph import cached_for_stage

COMPUTE_KINDS = ("forward", "backward", "apply")


@dataclass(frozen=True)
class CostModel:
    link_latency: Optional[float] = None  # None: take the cluster's value

    def latency(self, cluster) -> float:
        return cluster.link_latency if self.link_latency is None else self.link_latency

    def collective_time(self, nbytes, devices, cluster) -> float:
        """Time to move ``nbytes`` (already ring-scaled) over a device group."""
        ids = list(dict.fromkeys(devices))
        n = len(ids)
        if n <= 1 or nbytes == 0:
            return 0.0
        return float(Fraction(nbytes) / Fraction(cluster.group_bandwidth(ids))) + (n - 1) * self.latency(cluster)


def allreduce_time(nbytes, group, cluster, latency: Optional[float] = None) -> float:
    """Ring all-reduce: 2(n-1)/n * bytes / bw_min + (n-1) * latency."""
    ids = list(dict.fromkeys(group))
    if not ids:
        raise ValueError("all-reduce over an empty group")
    n = len(ids)
    if n == 1:
        return 0.0
    return CostModel(latency).collective_time(Fraction(2 * (n - 1), n) * nbytes, ids, cluster)


@dataclass(frozen=True)
class ScheduleEvent:
    device_id: str
    kind: str  # forward | backward | apply | comm | bridge
    name: str
    start: float
    duration: float
    stage: Optional[int] = None
    micro: Optional[int] = None
    replica: int = 0
    lane: str = "compute"

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass(frozen=True)
class MemoryReport:
    stage_peak: tuple  # bytes, max over the devices running each stage
    device_peak: dict
    defects: tuple


@dataclass
class SimMetrics:
    step_time: float
    throughput: float
    busy_time: dict
    utilization: dict
    idle_fraction: dict
    bubble_fraction: float
    stage_peak_mem: tuple
    device_peak_mem: dict
    comm_bytes: float
    grad_sync_bytes: int
    dp_sync_bytes: int
    defects: tuple = ()

    @property
    def sync_reduction(self) -> float:
        if not self.dp_sync_bytes:
            return 0.0
        return 1 - self.grad_sync_bytes / self.dp_sync_bytes

    def to_dict(self) -> dict:
        return {
            "step_time": self.step_time,
            "throughput": self.throughput,
            "bubble_fraction": self.bubble_fraction,
            "comm_bytes": self.comm_bytes,
            "grad_sync_bytes": self.grad_sync_bytes,
            "dp_sync_bytes": self.dp_sync_bytes,
            "sync_reduction": self.sync_reduction,
            "devices": {d: {"busy_time": self.busy_time[d], "utilization": self.utilization[d],
                            "idle_fraction": self.idle_fraction[d]} for d in self.busy_time},
            "stage_peak_mem": list(self.stage_peak_mem),
            "device_peak_mem": dict(self.device_peak_mem),
            "defects": list(self.defects),
        }


# --- memory ---

def peak_memory(plan: ExecutionPlan) -> MemoryReport:
    """Per-stage and per-device peak bytes; stage s caches min(N - s, micro-batches) activations."""
    g = plan.graph
    cfg = g.config
    n, k = plan.num_stages, plan.num_micro_batch
    opt = 1 + cfg.optimizer_state_multiplier
    ref = g.reference_batch
    stage_peak = [0] * n
    per_device = defaultdict(Fraction)
    stages_on = defaultdict(list)
    for r, rep in enumerate(plan.virtual_devices):
        micro = Fraction(plan.replica_batches[r], k)
        for s, tg in enumerate(plan.taskgraphs):
            cached = cached_for_stage(n, s, k)
            prof = plan.profiles[s]
            if isinstance(tg.strategy, Replicate):
                act = sum(estimate_op_cost(op, g.tensors)[1] for op in tg.ops)
                split = plan.batch_splits[r][s]
                need = [prof.param_bytes * opt + act * Fraction(b, k) / ref * cached for b in split]
            else:
                sh = plan.shardings[r][s]
                params = sh.device_param_bytes(g)
                acts = sh.device_activation_bytes(g)
                need = [params[j] * opt + acts[j] * micro / ref * cached for j in range(tg.device_count)]
            for d, b in zip(rep[s].devices, need):
                per_device[d] += b
                stages_on[d].append(s)
                stage_peak[s] = max(stage_peak[s], math.ceil(b))
    device_peak = {d: math.ceil(b) for d, b in per_device.items()}
    defects = []
    for d, b in device_peak.items():
        cap = plan.cluster.device(d).mem_bytes
        if b > cap:
            stages = ",".join(str(s) for s in sorted(set(stages_on[d])))
            defects.append(f"simulated OOM on {d}: stage(s) {stages} need {b} bytes > {cap} bytes")
    return MemoryReport(tuple(stage_peak), device_peak, tuple(defects))


# --- task graph of the simulation ---

@dataclass
class _Task:
    id: str
    kind: str
    durations: dict  # device -> seconds
    deps: list
    stage: Optional[int] = None
    micro: Optional[int] = None
    replica: int = 0
    nbytes: Fraction = Fraction(0)
    seq: int = 0
    succs: list = field(default_factory=list)

    @property
    def lane(self) -> str:
        return "compute" if self.kind in COMPUTE_KINDS else "comm"

    @property
    def duration(self) -> float:
        return max(self.durations.values(), default=0.0)


class BackwardFirst:
    """1F1B: stage s keeps at most N - s forwards in flight; ready backwards go first."""
    rank = {"backward": 0, "forward": 1, "apply": 2, "bridge": 0, "comm": 0}

    def key(self, t: _Task):
        big = 1 << 30
        return (self.rank[t.kind], big if t.micro is None else t.micro,
                big if t.stage is None else t.stage, t.replica, t.seq)

    def admits(self, t: _Task, sim: "_Simulation") -> bool:
        key = (t.stage, t.replica)
        if t.kind == "forward":
            if sim.next_forward[key] != t.micro:
                return False
            in_flight = sim.next_forward[key] - sim.done_backward[key]
            return in_flight < sim.n - t.stage
        if t.kind == "backward":
            return sim.next_backward[key] == t.micro
        return True


def _tasks(plan: ExecutionPlan, cost: CostModel) -> list:
    g = plan.graph
    cl = plan.cluster
    n, k = plan.num_stages, plan.num_micro_batch
    mult = g.config.backward_flop_multiplier
    ref = g.reference_batch
    tasks = []

    def add(t):
        t.seq = len(tasks)
        tasks.append(t)
        return t

    fwd_ref = [sum((Fraction(estimate_op_cost(op, g.tensors)[0]) for op in tg.ops), Fraction(0))
               for tg in plan.taskgraphs]
    syncs_by_stage = defaultdict(list)
    for gs in plan.grad_syncs:
        syncs_by_stage[gs.tg_index].append(gs)
    bridges_into = defaultdict(list)
    for b in plan.bridges:
        bridges_into[b.consumer_tg].append(b)

    exits = {}  # (dir, s, m, r) -> last task of that step
    last_bwd = defaultdict(list)  # (s, r) -> tasks
    for r, rep in enumerate(plan.virtual_devices):
        micro = Fraction(plan.replica_batches[r], k)
        scale = micro / ref
        flops = []
        for s, tg in enumerate(plan.taskgraphs):
            devs = rep[s].devices
            if isinstance(tg.strategy, Replicate):
                per_sample = fwd_ref[s] / ref
                f = [per_sample * Fraction(b, k) for b in plan.batch_splits[r][s]]
            else:
                f = [x * scale for x in plan.shardings[r][s].device_forward_flop(g)]
            flops.append({d: x / Fraction(cl.device(d).flops_per_sec) for d, x in zip(devs, f)})

        def coll_time(s, nbytes):
            return cost.collective_time(nbytes, rep[s].devices, cl)

        for m in range(k):
            for s, tg in enumerate(plan.taskgraphs):
                deps = []
                if s > 0:
                    into = bridges_into[s]
                    if into:
                        for b in into:
                            union = rep[s - 1].devices + rep[s].devices
                            nbytes = b.comm_bytes * scale
                            x = add(_Task(f"{b.id}:fwd:m{m}:r{r}", "bridge",
                                          {d: cost.collective_time(nbytes, union, cl) for d in dict.fromkeys(union)},
                                          [exits["F", s - 1, m, r]], s, m, r, nbytes))
                            deps.append(x)
                    else:
                        deps.append(exits["F", s - 1, m, r])
                t = add(_Task(f"F{s}:m{m}:r{r}", "forward", {d: float(v) for d, v in flops[s].items()},
                              deps, s, m, r))
                exits["F", s, m, r] = t
                sh = plan.shardings[r][s]
                if sh is not None and sh.collectives:
                    nbytes = sh.comm_bytes() * scale
                    exits["F", s, m, r] = add(_Task(f"shard:F{s}:m{m}:r{r}", "comm",
                                                    {d: coll_time(s, nbytes) for d in rep[s].devices},
                                                    [t], s, m, r, nbytes))
        for m in range(k):
            for s in reversed(range(n)):
                if s == n - 1:
                    deps = [exits["F", s, m, r]]
                else:
                    into = bridges_into[s + 1]
                    deps = []
                    for b in into:
                        union = rep[s].devices + rep[s + 1].devices
                        nbytes = b.comm_bytes * scale
                        deps.append(add(_Task(f"{b.id}:bwd:m{m}:r{r}", "bridge",
                                              {d: cost.collective_time(nbytes, union, cl) for d in dict.fromkeys(union)},
                                              [exits["B", s + 1, m, r]], s, m, r, nbytes)))
                    if not into:
                        deps.append(exits["B", s + 1, m, r])
                t = add(_Task(f"B{s}:m{m}:r{r}", "backward",
                              {d: float(v * mult) for d, v in flops[s].items()}, deps, s, m, r))
                exits["B", s, m, r] = t
                sh = plan.shardings[r][s]
                if sh is not None and sh.collectives:
                    nbytes = sh.comm_bytes() * scale
                    exits["B", s, m, r] = add(_Task(f"shard:B{s}:m{m}:r{r}", "comm",
                                                    {d: coll_time(s, nbytes) for d in rep[s].devices},
                                                    [t], s, m, r, nbytes))
                last_bwd[s, r].append(exits["B", s, m, r])

    for s, tg in enumerate(plan.taskgraphs):
        intra = {}
        for gs in syncs_by_stage[s]:
            if gs.level == "intra":
                intra[gs.replica] = add(_Task(gs.id, "comm", {
                    d: allreduce_time(gs.bytes, gs.devices, cl, cost.latency(cl)) for d in gs.devices},
                    list(last_bwd[s, gs.replica]), s, None, gs.replica, Fraction(2 * (len(gs.devices) - 1), len(gs.devices)) * gs.bytes))
        cross = []
        for gs in syncs_by_stage[s]:
            if gs.level == "cross":
                deps = []
                for r in range(plan.nested_dp_degree):
                    deps += [intra[r]] if r in intra else last_bwd[s, r]
                n_dev = len(gs.devices)
                cross.append(add(_Task(gs.id, "comm", {
                    d: allreduce_time(gs.bytes, gs.devices, cl, cost.latency(cl)) for d in gs.devices},
                    deps, s, None, 0, Fraction(2 * (n_dev - 1), n_dev) * gs.bytes)))
        for r, rep in enumerate(plan.virtual_devices):
            devs = rep[s].devices
            if isinstance(tg.strategy, Replicate):
                params = [Fraction(plan.profiles[s].param_bytes)] * len(devs)
            else:
                params = list(plan.shardings[r][s].device_param_bytes(g))
            if not any(params):
                continue
            deps = list(cross) if cross else ([intra[r]] if r in intra else list(last_bwd[s, r]))
            add(_Task(f"apply{s}:r{r}", "apply",
                      {d: float(p / Fraction(cl.device(d).flops_per_sec)) for d, p in zip(devs, params)},
                      deps, s, None, r))
    return tasks


class _Simulation:
    def __init__(self, plan: ExecutionPlan, tasks: list, policy=None):
        self.plan = plan
        self.n = plan.num_stages
        self.tasks = tasks
        self.policy = policy or BackwardFirst()
        self.next_forward = defaultdict(int)
        self.next_backward = defaultdict(int)
        self.done_backward = defaultdict(int)

    def run(self) -> list:
        pending = {}
        for t in self.tasks:
            pending[t.id] = len(t.deps)
            for d in t.deps:
                d.succs.append(t)
        ready = [t for t in self.tasks if not t.deps]
        lane_free = defaultdict(float)
        heap = []  # (time, tiebreak, task or None for a lane wake-up)
        self.counter = 0
        events = []
        now = 0.0
        remaining = len(self.tasks)
        while remaining:
            progress = True
            while progress:
                progress = False
                for t in sorted(ready, key=self.policy.key):
                    lanes = [(d, t.lane) for d in t.durations]
                    if any(lane_free[l] > now for l in lanes) or not self.policy.admits(t, self):
                        continue
                    ready.remove(t)
                    self._start(t, now, lane_free, heap, events)
                    progress = True
                    break
            if not heap:
                raise RuntimeError("schedule deadlock: no runnable task")
            now = heap[0][0]
            while heap and heap[0][0] == now:
                _, _, t = heapq.heappop(heap)
                if t is None:
                    continue
                remaining -= 1
                if t.kind == "backward":
                    self.done_backward[t.stage, t.replica] += 1
                for s in t.succs:
                    pending[s.id] -= 1
                    if pending[s.id] == 0:
                        ready.append(s)
        return sorted(events, key=lambda e: (e.start, e.device_id, e.lane, e.name))

    def _start(self, t: _Task, now, lane_free, heap, events):
        key = (t.stage, t.replica)
        if t.kind == "forward":
            self.next_forward[key] += 1
        elif t.kind == "backward":
            self.next_backward[key] += 1
        for d, dur in t.durations.items():
            lane_free[d, t.lane] = now + dur
            self.counter += 1
            heapq.heappush(heap, (now + dur, self.counter, None))
            if dur > 0:
                events.append(ScheduleEvent(d, t.kind, t.id, now, dur, t.stage, t.micro, t.replica, t.lane))
        self.counter += 1
        heapq.heappush(heap, (now + t.duration, self.counter, t))


def build_pipeline_schedule(plan: ExecutionPlan, cost: Optional[CostModel] = None, policy=None) -> list:
    """Timeline of the plan under the backward-first schedule, sorted by (start, device)."""
    return _Simulation(plan, _tasks(plan, cost or CostModel()), policy).run()


def metrics_from_events(plan: ExecutionPlan, events, comm_bytes=0) -> SimMetrics:
    step = max((e.end for e in events), default=0.0)
    used = plan.used_devices()
    busy = {d: 0.0 for d in used}
    for e in events:
        if e.lane == "compute":
            busy[e.device_id] += e.duration
    util = {d: (min(1.0, busy[d] / step) if step > 0 else 1.0) for d in used}
    idle = {d: 1.0 - util[d] for d in used}
    for d in plan.idle_devices:
        busy[d], util[d], idle[d] = 0.0, 0.0, 1.0
    mem = peak_memory(plan)
    return SimMetrics(
        step_time=step,
        throughput=plan.graph.global_batch / step if step > 0 else 0.0,
        busy_time=busy, utilization=util, idle_fraction=idle,
        bubble_fraction=sum(idle[d] for d in used) / len(used) if used else 0.0,
        stage_peak_mem=mem.stage_peak, device_peak_mem=mem.device_peak,
        comm_bytes=float(comm_bytes),
        grad_sync_bytes=grad_sync_bytes(plan), dp_sync_bytes=data_parallel_sync_bytes(plan),
        defects=mem.defects,
    )


def run(plan: ExecutionPlan, cost: Optional[CostModel] = None):
    """Simulate one training step; returns (SimMetrics, events)."""
    cost = cost or CostModel()
    tasks = _tasks(plan, cost)
    comm = sum((t.nbytes for t in tasks if t.lane == "comm"), Fraction(0))
    events = _Simulation(plan, tasks).run()
    return metrics_from_events(plan, events, comm), events


def simulate(plan: ExecutionPlan, cost: Optional[CostModel] = None) -> SimMetrics:
    return run(plan, cost)[0]
