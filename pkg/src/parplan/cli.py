"""parplan command line: ``parplan plan`` and ``parplan simulate``.

Exit codes: 0 ok, 1 input error, 2 planning infeasible, 3 simulated OOM.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .cluster import load_cluster
from .document import dumps_plan, load_plan, plan_to_document
from .errors import ParplanError
from .model_ir import load_model
from .planner import build_plan
from .schedule_sim import run, simulate
from .trace import emit_trace

log = logging.getLogger("parplan")

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_OOM = 0, 1, 2, 3
MiB = 1 << 20


def _mib(x) -> str:
    return f"{float(x) / MiB:.2f} MiB"


def plan_report(plan) -> str:
    doc = plan_to_document(plan)
    lines = [
        f"task graphs: {plan.num_stages}   nested data-parallel degree: {plan.nested_dp_degree}   "
        f"micro-batches: {plan.num_micro_batch}   global batch: {plan.graph.global_batch}",
    ]
    for tg, prof in zip(plan.taskgraphs, plan.profiles):
        lines.append(f"TG{tg.index} [{tg.scope}] {tg.strategy}  ops={len(tg.ops)}  "
                     f"params={_mib(prof.param_bytes)}  tg_mem={_mib(prof.tg_mem)}  tg_flop={prof.tg_flop}")
        for r, rep in enumerate(plan.virtual_devices):
            ratios = ", ".join(str(x) for x in plan.assignments[r][tg.index].ratios)
            line = f"  replica {r}: {' '.join(rep[tg.index].devices)}  load [{ratios}]"
            split = plan.batch_splits[r][tg.index]
            if split is not None:
                line += f"  batch {list(split)}"
            sh = plan.shardings[r][tg.index]
            if sh is not None:
                pats = ", ".join(f"{op}:{p}" for op, p in sh.pattern_ids().items())
                line += f"  patterns {pats}"
            lines.append(line)
    for b in plan.bridges:
        lines.append(f"bridge {b.describe()}  {_mib(b.comm_bytes)}")
    for c in plan.grad_syncs:
        lines.append(f"allreduce {c.id} over {len(c.devices)} device(s)  {_mib(c.bytes)}")
    mem = doc["memory"]
    lines.append("stage peak memory: " + ", ".join(_mib(x) for x in mem["stage_peak"]))
    for d in mem["defects"]:
        lines.append(f"DEFECT {d}")
    for w in plan.warnings:
        lines.append(f"warning: {w}")
    return "\n".join(lines) + "\n"


def sim_report(m, compare=None) -> str:
    lines = [
        f"step_time: {m.step_time:.9g} s",
        f"throughput: {m.throughput:.9g} samples/s",
        f"bubble_fraction: {m.bubble_fraction:.6f}",
        f"comm_bytes: {m.comm_bytes:.0f}",
        f"grad_sync_bytes per replica: {_mib(m.grad_sync_bytes)} (data parallel: {_mib(m.dp_sync_bytes)}, "
        f"reduction {100 * m.sync_reduction:.2f}%)",
    ]
    for d in m.busy_time:
        lines.append(f"  {d}: utilization {m.utilization[d]:.6f}  busy {m.busy_time[d]:.9g} s")
    lines.append("stage peak memory: " + ", ".join(_mib(x) for x in m.stage_peak_mem))
    if compare is not None:
        even, balanced, speedup = compare
        lines.append(f"even step_time: {even:.9g} s")
        lines.append(f"balanced step_time: {balanced:.9g} s")
        lines.append(f"speedup: {speedup:.2f}x")
    for d in m.defects:
        lines.append(f"DEFECT {d}")
    return "\n".join(lines) + "\n"


def _add_overrides(p):
    p.add_argument("--num-task-graph", type=int)
    p.add_argument("--num-micro-batch", type=int)
    p.add_argument("--auto-parallel", action="store_true", default=None)
    p.add_argument("--global-batch", type=int)
    p.add_argument("--no-balance", action="store_true", help="split load evenly instead of balancing")
    p.add_argument("--no-fuse", action="store_true", help="keep gather+partition bridge pairs unfused")
    p.add_argument("--format", choices=["text", "structured"], default="text")


def _graph_with_overrides(args):
    g = load_model(args.model)
    changes = {}
    for flag in ("num_task_graph", "num_micro_batch", "auto_parallel", "global_batch"):
        value = getattr(args, flag)
        if value is not None:
            changes[flag] = value
    return g.with_config(**changes) if changes else g


def _plan_from_args(args, balanced=None):
    if balanced is None:
        balanced = not args.no_balance
    if getattr(args, "plan", None):
        plan = load_plan(args.plan)
        if balanced != plan.balanced:
            plan = build_plan(plan.graph, plan.cluster, balanced=balanced, fuse=plan.fuse)
        return plan
    return build_plan(_graph_with_overrides(args), load_cluster(args.cluster), balanced=balanced,
                      fuse=not args.no_fuse)


def _write(path, text):
    try:
        with open(path, "w") as f:
            f.write(text)
    except OSError as e:
        raise ParplanError(f"cannot write {path}: {e.strerror}") from None


def cmd_plan(args) -> int:
    plan = _plan_from_args(args)
    text = dumps_plan(plan)
    if args.output:
        _write(args.output, text)
    sys.stdout.write(text if args.format == "structured" else plan_report(plan))
    return EXIT_OK


def cmd_simulate(args) -> int:
    if not args.plan and not (args.model and args.cluster):
        raise ParplanError("simulate needs --plan PLAN or MODEL CLUSTER")
    plan = _plan_from_args(args)
    metrics, events = run(plan)
    compare = None
    if args.compare:
        even = metrics if not plan.balanced else simulate(_plan_from_args(args, balanced=False))
        bal = metrics if plan.balanced else simulate(_plan_from_args(args, balanced=True))
        compare = (even.step_time, bal.step_time,
                   even.step_time / bal.step_time if bal.step_time > 0 else 1.0)
    if args.trace:
        emit_trace(events, args.trace)
    if args.format == "structured":
        doc = {"metrics": metrics.to_dict()}
        if compare is not None:
            doc["compare"] = {"even_step_time": compare[0], "balanced_step_time": compare[1],
                              "speedup": compare[2]}
        sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(sim_report(metrics, compare))
    if metrics.defects:
        for d in metrics.defects:
            print(f"error: {d}", file=sys.stderr)
        return EXIT_OOM
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parplan", description="Plan and simulate distributed training.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="build an execution plan")
    p.add_argument("model")
    p.add_argument("cluster")
    p.add_argument("-o", "--output", help="write the plan document here")
    _add_overrides(p)
    p.set_defaults(func=cmd_plan)

    s = sub.add_parser("simulate", help="simulate one training step")
    s.add_argument("model", nargs="?")
    s.add_argument("cluster", nargs="?")
    s.add_argument("--plan", help="plan document from 'parplan plan -o'")
    s.add_argument("--trace", help="write a Chrome trace-event file")
    s.add_argument("--compare", nargs="?", const="both", choices=["both", "even", "balanced"],
                   help="simulate even and balanced allocations and print the speedup")
    _add_overrides(s)
    s.set_defaults(func=cmd_simulate)
    return parser


def _setup_logging():
    level = os.environ.get("PARPLAN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ParplanError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
