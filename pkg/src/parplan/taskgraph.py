"""TaskGraph formation (from annotations or automatic cuts) and TaskGraph profiling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

from . import balance
from .errors import InfeasibleError, PlanningError
from .model_ir import (DEFAULT_SCOPE, CompGraph, Replicate, apply_flop, estimate_op_cost)

MAX_CUT_GROUPS = 64


@dataclass(frozen=True)
class TaskGraph:
    index: int
    ops: tuple
    strategy: object
    scope: str = DEFAULT_SCOPE

    @property
    def op_ids(self) -> tuple:
        return tuple(op.id for op in self.ops)

    @property
    def device_count(self) -> int:
        return self.strategy.device_count


@dataclass(frozen=True)
class TaskGraphProfile:
    tg_flop: int
    tg_mem: int
    activation_bytes_per_microbatch: int
    param_bytes: int
    forward_flop: int = 0
    backward_flop: int = 0
    apply_flop: int = 0
    cached_microbatches: int = 1
    micro_batch: Fraction = Fraction(1)


def partition_by_annotation(g: CompGraph) -> tuple:
    """One TaskGraph per contiguous scope run; unannotated ops become a replicate(1) TaskGraph."""
    tgs = []
    for scope, ops in g.scope_runs():
        ann = g.annotation(scope)
        strategy = ann.primitive if ann is not None else Replicate(1)
        tgs.append(TaskGraph(len(tgs), tuple(ops), strategy, scope))
    return tuple(tgs)


def topological_ops(g: CompGraph) -> list:
    """Ops in a topological order that keeps definition order wherever possible."""
    producers = g.producers
    remaining = {op.id: {producers[t] for t in op.inputs if t in producers} for op in g.ops}
    done = set()
    order = []
    while len(order) < len(g.ops):
        for op in g.ops:
            if op.id not in done and remaining[op.id] <= done:
                order.append(op)
                done.add(op.id)
                break
    return order


def cached_for_stage(num_stages: int, stage: int, num_micro_batch: int) -> int:
    """Forward activations stage ``stage`` (0-based) keeps alive: N - s, capped by the micro-batch count."""
    return max(1, min(num_stages - stage, num_micro_batch))


def _op_costs(g: CompGraph, ops) -> tuple:
    fwd = act = params = app = 0
    for op in ops:
        f, a = estimate_op_cost(op, g.tensors)
        fwd += f
        act += a
        params += op.param_bytes
        app += apply_flop(op)
    return fwd, act, params, app


def _profile_from_sums(g: CompGraph, fwd, act, params, app, cached, micro_batch) -> TaskGraphProfile:
    cfg = g.config
    scale = Fraction(micro_batch) / g.reference_batch
    fwd_mb = fwd * scale
    bwd_mb = fwd_mb * cfg.backward_flop_multiplier
    act_mb = round(act * scale)
    tg_flop = round(fwd_mb + bwd_mb) + app
    tg_mem = round(params * (1 + cfg.optimizer_state_multiplier)) + act_mb * cached
    return TaskGraphProfile(tg_flop, tg_mem, act_mb, params, round(fwd_mb), round(bwd_mb), app,
                            cached, Fraction(micro_batch))


def default_micro_batch(g: CompGraph, replicas: int = 1) -> Fraction:
    return Fraction(g.global_batch, replicas * g.config.num_micro_batch)


def profile_taskgraph(tg: TaskGraph, g: CompGraph, cached_microbatches: int,
                      micro_batch: Optional[Fraction] = None) -> TaskGraphProfile:
    """FLOP and peak memory of one TaskGraph at the given micro-batch size.

    tg_mem = params * (1 + optimizer_state_multiplier) + activations_per_micro * cached.
    """
    if cached_microbatches < 1:
        raise ValueError("cached_microbatches must be >= 1")
    if micro_batch is None:
        micro_batch = default_micro_batch(g)
    return _profile_from_sums(g, *_op_costs(g, tg.ops), cached_microbatches, micro_batch)


def _coalesce(g: CompGraph, ops: list, limit: int) -> list:
    """Group contiguous ops into at most ``limit`` groups of roughly equal forward FLOP."""
    if len(ops) <= limit:
        return [[op] for op in ops]
    flops = [estimate_op_cost(op, g.tensors)[0] for op in ops]
    total = sum(flops) or 1
    cum = [0]
    for f in flops:
        cum.append(cum[-1] + f)
    bounds = [0]
    for k in range(1, limit):
        target = Fraction(k * total, limit)
        idx = next((i for i in range(1, len(ops)) if cum[i] >= target), len(ops) - 1)
        idx = max(bounds[-1] + 1, min(idx, len(ops) - (limit - k)))
        bounds.append(idx)
    bounds.append(len(ops))
    return [ops[a:b] for a, b in zip(bounds, bounds[1:])]


def cut_targets(g: CompGraph, n: int, devices, micro_batch) -> list:
    """Per-stage FLOP shares to aim for, from memory-constrained balancing of the whole model."""
    whole = _profile_from_sums(g, *_op_costs(g, g.ops), 1, micro_batch)
    try:
        return list(balance.memory_constraint_balance(whole, devices).ratios)
    except PlanningError:
        return balance.proportional_targets(devices)


def auto_partition(g: CompGraph, n: int, vd_devices: Sequence, micro_batch: Optional[Fraction] = None) -> tuple:
    """Cut the model into ``n`` contiguous replicate(1) TaskGraphs, one per entry of ``vd_devices``.

    Among cuts whose every stage fits its device memory (stage s caching
    min(n - s, micro-batches) activations), returns the one minimising
    sum_s |flop_share_s - target_s|; ties go to the lexicographically smallest
    list of segment sizes. Exact dynamic programming over cut positions; ops are
    first coalesced into at most 64 FLOP-weighted groups.
    """
    if n < 1 or len(vd_devices) != n:
        raise PlanningError(f"auto partition needs one device per stage ({n} stages, {len(vd_devices)} devices)")
    if micro_batch is None:
        micro_batch = default_micro_batch(g)
    ops = topological_ops(g)
    groups = _coalesce(g, ops, MAX_CUT_GROUPS)
    if len(groups) < n:
        raise PlanningError(f"cannot cut {len(groups)} operator group(s) into {n} task graphs")
    sums = [_op_costs(g, grp) for grp in groups]
    prefix = [(0, 0, 0, 0)]
    for s in sums:
        prefix.append(tuple(a + b for a, b in zip(prefix[-1], s)))

    def stage_profile(s, i, j):
        seg = tuple(b - a for a, b in zip(prefix[i], prefix[j]))
        return _profile_from_sums(g, *seg, cached_for_stage(n, s, g.config.num_micro_batch), micro_batch)

    total_flop = stage_profile(0, 0, len(groups)).tg_flop or 1
    targets = cut_targets(g, n, vd_devices, micro_batch)
    m = len(groups)
    # best[j] -> (cost, sizes) for the first s stages covering groups[:j]
    best = {0: (Fraction(0), ())}
    for s in range(n):
        dm = vd_devices[s].mem_bytes
        nxt = {}
        for i, (cost, sizes) in best.items():
            # leave at least one group for each remaining stage
            for j in range(i + 1, m - (n - s - 1) + 1):
                if s == n - 1 and j != m:
                    continue
                prof = stage_profile(s, i, j)
                if prof.tg_mem > dm:
                    continue
                cand = (cost + abs(Fraction(prof.tg_flop, total_flop) - targets[s]), sizes + (j - i,))
                if j not in nxt or cand < nxt[j]:
                    nxt[j] = cand
        best = nxt
        if not best:
            break
    if m not in best:
        deficits = []
        for s in range(n):
            smallest = min(stage_profile(s, i, i + 1).tg_mem for i in range(m))
            deficits.append((smallest - vd_devices[s].mem_bytes, -s))
        worst, neg_s = max(deficits)
        s = -neg_s
        raise InfeasibleError(
            f"infeasible: no contiguous cut into {n} task graphs fits device memory; "
            f"tightest stage {s} on {vd_devices[s].id} ({vd_devices[s].mem_bytes} bytes)",
            {vd_devices[s].id: max(worst, 0)},
        )
    sizes = best[m][1]
    tgs = []
    start = 0
    for s, size in enumerate(sizes):
        seg_ops = tuple(op for grp in groups[start:start + size] for op in grp)
        tgs.append(TaskGraph(s, seg_ops, Replicate(1), f"auto{s}"))
        start += size
    return tuple(tgs)


def cut_sizes(tgs: Sequence[TaskGraph]) -> list:
    return [len(tg.ops) for tg in tgs]
