"""Hardware-aware intra-TaskGraph load balancing.

Load ratios are kept as exact fractions so that the ratios always sum to one.
The memory-constrained balancer starts from compute-proportional ratios and
moves load from the most memory-overloaded device to the free device with the
lowest FLOP utilization until nothing is out of memory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

from .errors import InfeasibleError, PlanningError


@dataclass(frozen=True)
class LoadAssignment:
    ratios: tuple

    def __post_init__(self):
        ratios = tuple(Fraction(r) for r in self.ratios)
        object.__setattr__(self, "ratios", ratios)
        if any(r < 0 for r in ratios):
            raise ValueError(f"negative load ratio in {ratios}")
        if ratios and sum(ratios) != 1:
            raise ValueError(f"load ratios sum to {sum(ratios)}, not 1")

    def __len__(self):
        return len(self.ratios)

    def as_floats(self) -> list:
        return [float(r) for r in self.ratios]

    @classmethod
    def even(cls, n: int) -> "LoadAssignment":
        return cls(tuple(Fraction(1, n) for _ in range(n)))


@dataclass
class BalanceState:
    load_ratios: list
    mem_utils: list
    flop_utils: list
    oom_devices: list = field(default_factory=list)
    free_devices: list = field(default_factory=list)
    # samples per unit of load; None means continuous ratios
    granularity: Optional[int] = None


def _flops(devices) -> list:
    return [Fraction(d.flops_per_sec) for d in devices]


def proportional_targets(devices) -> list:
    df = _flops(devices)
    total = sum(df)
    return [f / total for f in df]


def init_proportional(profile, devices) -> LoadAssignment:
    if not devices:
        raise PlanningError("cannot balance over zero devices")
    return LoadAssignment(tuple(proportional_targets(devices)))


def objective(a: LoadAssignment, devices) -> Fraction:
    """Sum over devices of |L_i - DF_i / sum(DF)|."""
    return sum(abs(l - p) for l, p in zip(a.ratios, proportional_targets(devices)))


def largest_remainder(weights: Sequence, total: int, min_size: int = 0) -> tuple:
    """Integers proportional to ``weights`` that sum to ``total``.

    Floors first, then hands leftover units to the largest fractional remainders
    (lower index wins ties). Entries below ``min_size`` borrow from the largest entry.
    """
    n = len(weights)
    if n == 0:
        return ()
    if total < min_size * n:
        raise ValueError(f"cannot give {n} parts at least {min_size} each out of {total}")
    w = [Fraction(x) for x in weights]
    wsum = sum(w)
    exact = [x * total / wsum for x in w] if wsum else [Fraction(total, n)] * n
    sizes = [math.floor(x) for x in exact]
    leftover = total - sum(sizes)
    order = sorted(range(n), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[:leftover]:
        sizes[i] += 1
    for i in range(n):
        while sizes[i] < min_size:
            donor = max(range(n), key=lambda j: (sizes[j], -j))
            sizes[donor] -= 1
            sizes[i] += 1
    return tuple(sizes)


def assignment_to_batches(a: LoadAssignment, global_batch: int) -> tuple:
    """Per-device batch sizes (each >= 1) that sum to ``global_batch``."""
    if global_batch < len(a):
        raise PlanningError(f"underfull batch: global batch {global_batch} < {len(a)} devices")
    return largest_remainder(a.ratios, global_batch, min_size=1)


def _utils(state: BalanceState, i: int, profile, devices):
    l = state.load_ratios[i]
    dev = devices[i]
    state.mem_utils[i] = l * profile.tg_mem / dev.mem_bytes
    state.flop_utils[i] = l * profile.tg_flop / Fraction(dev.flops_per_sec)


def init_state(profile, devices, granularity: Optional[int] = None) -> BalanceState:
    a = init_proportional(profile, devices)
    ratios = list(a.ratios)
    if granularity is not None:
        ratios = [Fraction(b, granularity) for b in assignment_to_batches(a, granularity)]
    n = len(devices)
    state = BalanceState(ratios, [Fraction(0)] * n, [Fraction(0)] * n, granularity=granularity)
    for i in range(n):
        _utils(state, i, profile, devices)
        if state.mem_utils[i] > 1:
            state.oom_devices.append(i)
        else:
            state.free_devices.append(i)
    return state


def _capacity(profile, dev) -> Fraction:
    """Largest load ratio the device can hold."""
    if profile.tg_mem == 0:
        return Fraction(1)
    return Fraction(dev.mem_bytes, profile.tg_mem)


def shift_load(state: BalanceState, peak: int, valley: int, profile, devices) -> bool:
    """Move load from ``peak`` to ``valley``; False when the valley has no room left.

    The amount is the smaller of the peak's overload and the valley's headroom,
    rounded to whole samples when the state has a batch granularity. The peak
    leaves ``oom_devices`` once it fits.
    """
    over = state.load_ratios[peak] - _capacity(profile, devices[peak])
    head = _capacity(profile, devices[valley]) - state.load_ratios[valley]
    if state.granularity is None:
        delta = min(over, head)
    else:
        g = state.granularity
        units = min(math.ceil(over * g), math.floor(head * g),
                    int(state.load_ratios[peak] * g) - 1)
        delta = Fraction(max(units, 0), g)
    if delta <= 0:
        return False
    state.load_ratios[peak] -= delta
    state.load_ratios[valley] += delta
    _utils(state, peak, profile, devices)
    _utils(state, valley, profile, devices)
    if state.mem_utils[peak] <= 1:
        state.oom_devices.remove(peak)
    return True


def _full(state: BalanceState, i: int, profile, devices) -> bool:
    head = _capacity(profile, devices[i]) - state.load_ratios[i]
    if state.granularity is not None:
        return math.floor(head * state.granularity) <= 0
    return head <= 0


def run_balance(state: BalanceState, profile, devices) -> int:
    """Peak-to-valley loop; returns the number of iterations.

    A valley left without headroom is dropped straight away: any later shift
    into it would fail and pop it anyway.
    """
    steps = 0
    while state.oom_devices and state.free_devices:
        steps += 1
        peak = max(state.oom_devices, key=lambda i: (state.mem_utils[i], -i))
        valley = min(state.free_devices, key=lambda i: (state.flop_utils[i], state.mem_utils[i], i))
        if not shift_load(state, peak, valley, profile, devices) or _full(state, valley, profile, devices):
            state.free_devices.remove(valley)
    return steps


def memory_constraint_balance(profile, devices, granularity: Optional[int] = None) -> LoadAssignment:
    """Compute-proportional load ratios repaired so that L_i * TG_mem <= DM_i on every device.

    Raises InfeasibleError when the devices cannot hold the task graph.
    """
    if not devices:
        raise PlanningError("cannot balance over zero devices")
    total_mem = sum(d.mem_bytes for d in devices)
    if total_mem < profile.tg_mem:
        ratios = proportional_targets(devices)
        overload = {d.id: int(math.ceil(l * profile.tg_mem - d.mem_bytes))
                    for d, l in zip(devices, ratios) if l * profile.tg_mem > d.mem_bytes}
        raise InfeasibleError(
            f"infeasible: task graph needs {profile.tg_mem} bytes but the devices hold {total_mem}",
            overload,
        )
    state = init_state(profile, devices, granularity)
    run_balance(state, profile, devices)
    if state.oom_devices:
        overload = {
            devices[i].id: int(math.ceil(state.load_ratios[i] * profile.tg_mem - devices[i].mem_bytes))
            for i in state.oom_devices
        }
        tightest = max(overload, key=lambda d: (overload[d], d))
        raise InfeasibleError(
            f"infeasible: no load shift fits the memory bounds; tightest device {tightest} "
            f"over by {overload[tightest]} bytes",
            overload,
        )
    return LoadAssignment(tuple(state.load_ratios))
