import json

import pytest

from helpers import fixture_path
from parplan.cli import main
from parplan.cluster import load_cluster
from parplan.document import load_plan, plan_to_document
from parplan.model_ir import load_model
from parplan.planner import build_plan
from parplan.schedule_sim import run, simulate
from parplan.trace import dumps_trace, emit_trace

F = fixture_path


def call(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_plan_classification(capsys, tmp_path):
    out_file = tmp_path / "plan.json"
    code, out, _ = call(capsys, "plan", F("classification.json"), F("cluster_8gpu.json"), "-o", out_file)
    assert code == 0
    assert "replicate(8)" in out and "split(8)" in out and out.count("bridge ") == 1
    doc = json.loads(out_file.read_text())
    assert doc["version"] == 1
    assert [t["strategy"] for t in doc["taskgraphs"]] == ["replicate", "split"]
    assert len(doc["bridges"]) == 1


def test_plan_structured_is_the_document(capsys):
    code, out, _ = call(capsys, "plan", F("pipeline.json"), F("cluster_2gpu.json"), "--format", "structured")
    doc = json.loads(out)
    assert code == 0 and doc["nested_dp_degree"] == 1 and len(doc["taskgraphs"]) == 2
    assert [len(s["devices"]) for s in doc["replicas"][0]["stages"]] == [1, 1]


def test_insufficient_devices_exit_2(capsys, tmp_path):
    model = json.loads(open(F("pipeline.json")).read())
    for a in model["annotations"]:
        a["device_count"] = 2
    cl = json.loads(open(F("cluster_8gpu.json")).read())
    cl["devices"] = cl["devices"][:3]
    (tmp_path / "m.json").write_text(json.dumps(model))
    (tmp_path / "c.json").write_text(json.dumps(cl))
    code, _, err = call(capsys, "plan", tmp_path / "m.json", tmp_path / "c.json")
    assert code == 2
    assert "3" in err and "4" in err


def test_input_errors_exit_1(capsys, tmp_path):
    code, _, err = call(capsys, "plan", tmp_path / "missing.json", F("cluster_2gpu.json"))
    assert code == 1 and "cannot read" in err
    (tmp_path / "bad.json").write_text('{"tensors": []}')
    code, _, err = call(capsys, "plan", tmp_path / "bad.json", F("cluster_2gpu.json"))
    assert code == 1 and "schema" in err
    code, _, err = call(capsys, "simulate")
    assert code == 1


def test_infeasible_exit_2(capsys, tmp_path):
    model = json.loads(open(F("hetero_dp.json")).read())
    model["ops"][0]["param_bytes"] = 20 * 2 ** 30  # x3 with optimizer state > 2 x 16 GiB
    (tmp_path / "m.json").write_text(json.dumps(model))
    code, _, err = call(capsys, "plan", tmp_path / "m.json", F("cluster_16gb.json"))
    assert code == 2 and "infeasible" in err


def test_hetero_compare(capsys):
    code, out, _ = call(capsys, "simulate", F("hetero_dp.json"), F("cluster_hetero.json"), "--compare")
    assert code == 0
    assert "speedup: 1.50x" in out


def test_compare_structured(capsys):
    code, out, _ = call(capsys, "simulate", F("hetero_dp.json"), F("cluster_hetero.json"), "--compare",
                        "--format", "structured")
    doc = json.loads(out)
    assert doc["compare"]["speedup"] == 1.5
    assert doc["metrics"]["step_time"] == 2.0


def test_trace_event_count(capsys, tmp_path):
    trace = tmp_path / "out.trace"
    code, _, _ = call(capsys, "simulate", F("pipeline.json"), F("cluster_2gpu.json"), "--trace", trace)
    assert code == 0
    events = json.loads(trace.read_text())["traceEvents"]
    fb = [e for e in events if e["cat"] in ("forward", "backward")]
    assert len(fb) == 2 * 2 * 8
    rest = [e for e in events if e["cat"] not in ("forward", "backward")]
    assert all(e["cat"] in ("apply", "comm", "bridge") for e in rest)
    assert len([e for e in rest if e["cat"] == "apply"]) == 2
    assert all(e["ph"] == "X" and e["dur"] > 0 for e in events)
    assert [(e["ts"], e["tid"]) for e in events] == sorted((e["ts"], e["tid"]) for e in events)


def test_oom_exit_3(capsys):
    code, out, err = call(capsys, "simulate", F("oom.json"), F("cluster_16gb.json"))
    assert code == 3
    assert "simulated OOM" in err and "DEFECT" in out


def test_plan_file_round_trip(capsys, tmp_path):
    plan_file = tmp_path / "h.plan"
    call(capsys, "plan", F("hybrid.json"), F("cluster_8gpu.json"), "-o", plan_file)
    code, from_file, _ = call(capsys, "simulate", "--plan", plan_file, "--format", "structured")
    code2, direct, _ = call(capsys, "simulate", F("hybrid.json"), F("cluster_8gpu.json"), "--format", "structured")
    assert code == code2 == 0 and from_file == direct
    doc = json.loads(plan_file.read_text())
    assert plan_to_document(load_plan(plan_file)) == doc


def test_overrides(capsys):
    code, out, _ = call(capsys, "plan", F("pipeline.json"), F("cluster_2gpu.json"), "--num-micro-batch", "4",
                        "--format", "structured")
    assert json.loads(out)["model"]["config"]["num_micro_batch"] == 4
    code, out, _ = call(capsys, "plan", F("linear.json"), F("cluster_2gpu.json"), "--auto-parallel",
                        "--num-task-graph", "2", "--format", "structured")
    doc = json.loads(out)
    assert code == 0 and [t["scope"] for t in doc["taskgraphs"]] == ["auto0", "auto1"]


def test_no_fuse_flag(capsys):
    _, fused, _ = call(capsys, "plan", F("hybrid.json"), F("cluster_8gpu.json"), "--format", "structured")
    _, unfused, _ = call(capsys, "plan", F("hybrid.json"), F("cluster_8gpu.json"), "--no-fuse", "--format", "structured")
    assert json.loads(fused)["bridges"][0]["fused"] is True
    assert json.loads(unfused)["bridges"][0]["fused"] is False


def test_log_env(capsys, monkeypatch):
    monkeypatch.setenv("PARPLAN_LOG", "debug")
    code, _, _ = call(capsys, "plan", F("linear.json"), F("cluster_2gpu.json"))
    assert code == 0


def test_empty_trace_document(tmp_path):
    p = tmp_path / "empty.trace"
    emit_trace([], p)
    assert json.loads(p.read_text())["traceEvents"] == []


def test_trace_deterministic(tmp_path):
    plan = build_plan(load_model(F("classification.json")), load_cluster(F("cluster_8gpu.json")))
    a, b = tmp_path / "a", tmp_path / "b"
    emit_trace(run(plan)[1], a)
    emit_trace(run(plan)[1], b)
    assert a.read_bytes() == b.read_bytes()


def test_two_stage_two_micro_trace():
    plan = build_plan(load_model(F("pipeline.json")).with_config(num_micro_batch=2), load_cluster(F("cluster_2gpu.json")))
    events = json.loads(dumps_trace(run(plan)[1]))["traceEvents"]
    assert len([e for e in events if e["cat"] in ("forward", "backward")]) == 8


def test_unwritable_trace(capsys, tmp_path):
    code, _, err = call(capsys, "simulate", F("linear.json"), F("cluster_2gpu.json"), "--trace", tmp_path / "no" / "x")
    assert code == 1 and "cannot write" in err
