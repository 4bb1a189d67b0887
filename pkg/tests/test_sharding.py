import random
from fractions import Fraction

import pytest

from helpers import matmul_graph, random_matmul_chain
from parplan.balance import LoadAssignment
from parplan.errors import UnsplittableDimensionError, UnsupportedSplitError
from parplan.model_ir import Annotation, CompGraph, OpNode, PlanConfig, Split, TensorSpec
from parplan.sharding import (PATTERN_TABLE, Layout, ShardingInfo, ShardingUnit, apply_split,
                              evaluate_reference, evaluate_sharded, match_patterns, pattern_comm_cost,
                              select_pattern, shard_sizes)
from parplan.taskgraph import partition_by_annotation

MB = 10 ** 6


def unit(g, op_id, infos):
    return ShardingUnit((g.op(op_id),), tuple(infos))


def test_matmul_unsplit_matches_both():
    g = matmul_graph(32, 1024, 100000)
    pats = match_patterns(unit(g, "mm", [ShardingInfo.complete(2)] * 2), g.tensors)
    assert sorted(p.id for p in pats) == ["SP1", "SP2"]
    sp1 = next(p for p in pats if p.id == "SP1")
    assert sp1.input_infos[1] == ShardingInfo((0, 1)) and sp1.comm_op.kind == "allgather"
    sp2 = next(p for p in pats if p.id == "SP2")
    assert sp2.input_infos == (ShardingInfo((0, 1)), ShardingInfo((1, 0))) and sp2.comm_op.kind == "allreduce"


def test_pattern_costs_fc_head():
    g = matmul_graph(32, 1024, 100000)
    pats = {p.id: p for p in match_patterns(unit(g, "mm", [ShardingInfo.complete(2)] * 2), g.tensors)}
    assert g.tensors["c"].nbytes == 12.8 * MB
    assert pattern_comm_cost(pats["SP2"], g.tensors, 4) == Fraction(192, 10) * MB
    assert pattern_comm_cost(pats["SP1"], g.tensors, 4) == Fraction(96, 10) * MB
    assert pattern_comm_cost(pats["SP1"], g.tensors, 1) == 0
    assert select_pattern(list(pats.values()), g.tensors, 4).id == "SP1"


def test_elementwise_passthrough_and_conv_unmatched():
    t = {"a": TensorSpec("a", (6, 4)), "b": TensorSpec("b", (6, 4))}
    g = CompGraph(t, (OpNode("e", "elementwise", ("a",), ("b",)), OpNode("c", "conv", ("b",), ("a",), flop=1)))
    pats = match_patterns(unit(g, "e", [ShardingInfo((1, 0))]), t)
    assert [p.id for p in pats] == ["EW"] and pats[0].output_info == ShardingInfo((1, 0)) and pats[0].comm_op is None
    assert match_patterns(unit(g, "c", [ShardingInfo.complete(2)]), t) == []


def test_two_dim_split_rejected():
    g = matmul_graph(4, 4, 4)
    assert match_patterns(unit(g, "mm", [ShardingInfo((1, 1)), ShardingInfo.complete(2)]), g.tensors) == []


def test_softmax_keeps_last_dim_whole():
    t = {"a": TensorSpec("a", (6, 4)), "b": TensorSpec("b", (6, 4))}
    g = CompGraph(t, (OpNode("s", "softmax", ("a",), ("b",)),))
    assert [p.id for p in match_patterns(unit(g, "s", [ShardingInfo((1, 0))]), t)] == ["SM"]
    assert match_patterns(unit(g, "s", [ShardingInfo((0, 1))]), t) == []


def ew_graph(shape=(6, 4), k=2):
    t = {"a": TensorSpec("a", shape), "b": TensorSpec("b", shape)}
    return CompGraph(t, (OpNode("e", "elementwise", ("a",), ("b",), scope="s"),), (Annotation("s", Split(k)),))


def test_even_shards_on_second_dim():
    g = ew_graph()
    tg = partition_by_annotation(g)[0]
    sh = apply_split(tg, g, 2, incoming={"a": Layout(ShardingInfo((0, 1)))})
    assert sh.units[0].shard_sizes == (2, 2)  # shards [6,2] and [6,2]
    assert sh.output_layouts["b"].info == ShardingInfo((0, 1))


def test_uneven_shards_follow_ratios():
    assert shard_sizes(8, 2, LoadAssignment((Fraction(3, 4), Fraction(1, 4))), "t", 0) == (6, 2)
    g = matmul_graph(4, 4, 8)
    tg = partition_by_annotation(g)[0]
    sh = apply_split(tg, g, 2, LoadAssignment((Fraction(3, 4), Fraction(1, 4))))
    assert sh.units[0].pattern.id == "SP1" and sh.units[0].shard_sizes == (6, 2)
    assert sh.device_param_bytes(g) == (Fraction(3, 4) * 128, Fraction(1, 4) * 128)


def test_fc_head_selects_sp1():
    g = matmul_graph(32, 1024, 100000)
    sh = apply_split(partition_by_annotation(g)[0], g, 4)
    assert sh.pattern_ids() == {"mm": "SP1"}
    assert sh.comm_bytes() == Fraction(96, 10) * MB


def test_unsplittable_dimension():
    g = matmul_graph(4, 4, 3)
    with pytest.raises(UnsplittableDimensionError):
        apply_split(partition_by_annotation(g)[0], g, 4)


def test_unsupported_split():
    t = {"a": TensorSpec("a", (6, 4)), "b": TensorSpec("b", (6, 4))}
    g = CompGraph(t, (OpNode("c", "conv", ("a",), ("b",), flop=5, scope="s"),), (Annotation("s", Split(2)),))
    with pytest.raises(UnsupportedSplitError, match="c"):
        apply_split(partition_by_annotation(g)[0], g, 2)


def test_contraction_split_input_uses_sp2():
    g = matmul_graph(4, 8, 4)
    sh = apply_split(partition_by_annotation(g)[0], g, 2, incoming={"a": Layout(ShardingInfo((0, 1)))})
    assert sh.pattern_ids() == {"mm": "SP2"}
    assert sh.input_partition == {"a": 1}


def test_relayout_inserts_allgather_unless_bridged():
    g = matmul_graph(4, 8, 4)
    tg = partition_by_annotation(g)[0]
    sh = apply_split(tg, g, 2, incoming={"a": Layout(ShardingInfo((1, 0)))})
    assert [c.reason for c in sh.collectives] == ["relayout", "pattern"]
    sh = apply_split(tg, g, 2, incoming={"a": Layout(ShardingInfo((1, 0)))}, bridged=frozenset({"a"}))
    assert [c.reason for c in sh.collectives] == ["pattern"]
    assert sh.input_partition == {"a": None}


def test_deferred_output_keeps_split_layout():
    g = matmul_graph(4, 8, 4)
    sh = apply_split(partition_by_annotation(g)[0], g, 2, deferred_outputs=frozenset({"c"}))
    assert sh.collectives == ()
    assert sh.output_layouts["c"].info == ShardingInfo((0, 1)) and sh.output_layouts["c"].sizes == (2, 2)


def ring_cost(kind, nbytes, k):
    # independent restatement of the ring formulas
    if kind is None:
        return 0
    factor = 2 * (k - 1) if kind == "allreduce" else (k - 1)
    return Fraction(factor * nbytes, k)


def check_chain(rng, k):
    g, incoming = random_matmul_chain(rng, k)
    tg = partition_by_annotation(g)[0]
    ratios = None
    if rng.random() < 0.5:
        w = [rng.randint(1, 5) for _ in range(k)]
        ratios = LoadAssignment(tuple(Fraction(x, sum(w)) for x in w))
    sh = apply_split(tg, g, k, ratios, incoming)
    inputs = {t: [[rng.randint(-5, 5) for _ in range(g.tensors[t].shape[1])] for _ in range(g.tensors[t].shape[0])]
              for t in g.graph_inputs}
    want = evaluate_reference(g, g.ops, inputs)
    got = evaluate_sharded(g, tg, sh, inputs)
    for t in want:
        assert got[t] == want[t], t
    for u in sh.units:
        op = g.op(u.op_id)
        costs = {}
        for rule in PATTERN_TABLE[op.kind]:
            p = rule(ShardingUnit((op,), u.input_infos), g.tensors)
            if p is not None:
                kind = p.comm_op.kind if p.comm_op else None
                nbytes = g.tensors[p.comm_op.tensor].nbytes if p.comm_op else 0
                costs[p.id] = ring_cost(kind, nbytes, k)
        best = min(costs.values())
        assert ring_cost(u.pattern.comm_op.kind if u.pattern.comm_op else None,
                         g.tensors[op.outputs[0]].nbytes, k) == best
        assert u.pattern.id == min(pid for pid, c in costs.items() if c == best)
        if u.shard_sizes is not None:
            idx, dim = u.pattern.shard_axis
            assert sum(u.shard_sizes) == g.tensors[op.inputs[idx]].shape[dim]


@pytest.mark.parametrize("k", [2, 3, 4])
def test_random_chains_recombine_exactly(k):
    rng = random.Random(100 + k)
    for _ in range(60):
        check_chain(rng, k)
