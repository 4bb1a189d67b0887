"""Small builders shared by the tests."""
from fractions import Fraction
from importlib import resources

from parplan.cluster import Cluster, DeviceSpec
from parplan.model_ir import (Annotation, CompGraph, OpNode, PlanConfig, Replicate, Split,
                              TensorSpec, validate_graph)

GB = 10 ** 9
GiB = 1 << 30
MiB = 1 << 20


def fixture_path(name):
    return str(resources.files("parplan") / "data" / "fixtures" / name)


def device(i, flops=1e12, mem=32 * GiB, node="n0", intra=100e9, inter=10e9, name=None):
    return DeviceSpec(name or f"d{i}", flops, mem, node, intra, inter)


def cluster(flops, mems=None, nodes=None, latency=0.0, **kw):
    mems = mems or [32 * GiB] * len(flops)
    nodes = nodes or ["n0"] * len(flops)
    return Cluster(tuple(device(i, f, m, n, **kw) for i, (f, m, n) in enumerate(zip(flops, mems, nodes))),
                   latency)


def chain(flops, params=None, act_bytes=None, scopes=None, annotations=(), batch=None, **config):
    """A chain of generic ops with explicit FLOP; op i writes tensor t{i+1}.

    ``act_bytes`` sets each output's byte size (a 1-D tensor of that many bytes).
    """
    n = len(flops)
    params = params or [0] * n
    act_bytes = act_bytes or [4] * n
    tensors = {"t0": TensorSpec("t0", (1,), 1)}
    ops = []
    for i in range(n):
        out = f"t{i + 1}"
        tensors[out] = TensorSpec(out, (act_bytes[i],), 1)
        scope = scopes[i] if scopes else "__default__"
        ops.append(OpNode(f"op{i}", "generic", (f"t{i}",), (out,), params[i], flops[i], scope))
    if batch is not None:
        config.setdefault("global_batch", batch)
    g = CompGraph(tensors, tuple(ops), tuple(annotations), PlanConfig(**config))
    validate_graph(g)
    return g


def two_stage(flop=100, param=0, act=64, micro=1, batch=None):
    return chain([flop, flop], [param, param], [act, act], ["s0", "s1"],
                 (Annotation("s0", Replicate(1)), Annotation("s1", Replicate(1))),
                 num_micro_batch=micro, global_batch=batch or micro)


def pipeline(n, flop=100, micro=1, param=0, act=64):
    scopes = [f"s{i}" for i in range(n)]
    anns = tuple(Annotation(s, Replicate(1)) for s in scopes)
    return chain([flop] * n, [param] * n, [act] * n, scopes, anns, num_micro_batch=micro, global_batch=micro)


def matmul_graph(m, k, n, elem_bytes=4):
    tensors = {
        "a": TensorSpec("a", (m, k), elem_bytes),
        "b": TensorSpec("b", (k, n), elem_bytes),
        "c": TensorSpec("c", (m, n), elem_bytes),
    }
    op = OpNode("mm", "matmul", ("a", "b"), ("c",), k * n * elem_bytes, None, "head")
    return CompGraph(tensors, (op,), (Annotation("head", Split(2)),), PlanConfig())


def frac(x):
    return Fraction(x).limit_denominator(10 ** 6)


def random_matmul_chain(rng, k, length=None, max_dim=8):
    """A split(k) chain of matmuls (and the odd elementwise add) with every dim in [k, max_dim].

    Returns (graph, incoming layouts for the first input).
    """
    from parplan.sharding import Layout, ShardingInfo

    length = length or rng.randint(1, 4)
    dims = [rng.randint(k, max_dim) for _ in range(length + 1)]
    m = rng.randint(k, max_dim)
    tensors = {"x0": TensorSpec("x0", (m, dims[0]), 4, 0)}
    ops = []
    cur = "x0"
    for i in range(length):
        w, out = f"w{i}", f"x{i + 1}"
        tensors[w] = TensorSpec(w, (dims[i], dims[i + 1]), 4)
        tensors[out] = TensorSpec(out, (m, dims[i + 1]), 4, 0)
        ops.append(OpNode(f"mm{i}", "matmul", (cur, w), (out,), dims[i] * dims[i + 1] * 4, None, "s"))
        cur = out
        if rng.random() < 0.3:
            b, out2 = f"b{i}", f"y{i}"
            tensors[b] = TensorSpec(b, (m, dims[i + 1]), 4)
            tensors[out2] = TensorSpec(out2, (m, dims[i + 1]), 4, 0)
            ops.append(OpNode(f"add{i}", "elementwise", (cur, b), (out2,), 0, None, "s"))
            cur = out2
    g = CompGraph(tensors, tuple(ops), (Annotation("s", Split(k)),), PlanConfig())
    validate_graph(g)
    choice = rng.choice([None, 0, 1])
    incoming = {} if choice is None else {"x0": Layout(ShardingInfo.split(2, choice))}
    return g, incoming


def random_plan(rng, max_stages=4, max_micro=8, allow_split=True):
    """A random pipeline of replicate/split stages on a random heterogeneous cluster, already planned."""
    from parplan.planner import build_plan

    n = rng.randint(1, max_stages)
    micro = rng.randint(1, max_micro)
    width = 8
    batch = 2 * micro * rng.randint(2, 4)  # >= 2 samples per device even with two nested replicas
    tensors = {"x0": TensorSpec("x0", (batch, width), 4, 0)}
    ops, anns = [], []
    for s in range(n):
        out = f"x{s + 1}"
        tensors[out] = TensorSpec(out, (batch, width), 4, 0)
        if allow_split and rng.random() < 0.3:
            w = f"w{s}"
            tensors[w] = TensorSpec(w, (width, width), 4)
            ops.append(OpNode(f"op{s}", "matmul", (f"x{s}", w), (out,), width * width * 4, None, f"s{s}"))
            anns.append(Annotation(f"s{s}", Split(2)))
        else:
            flop = rng.randint(1, 20) * 10 ** 9
            ops.append(OpNode(f"op{s}", "generic", (f"x{s}",), (out,), rng.choice([0, 1 << 20]), flop, f"s{s}"))
            anns.append(Annotation(f"s{s}", Replicate(rng.randint(1, 2))))
    g = CompGraph(tensors, tuple(ops), tuple(anns), PlanConfig(num_micro_batch=micro, global_batch=batch))
    validate_graph(g)
    need = sum(a.primitive.device_count for a in anns)
    k = need * rng.randint(1, 2) + rng.randint(0, 1)
    c = cluster([rng.choice([1e12, 2e12, 3e12]) for _ in range(k)],
                nodes=[f"n{i // 4}" for i in range(k)], latency=rng.choice([0.0, 1e-5]))
    return build_plan(g, c)


# every shipped (model, cluster) pairing
FIXTURE_PAIRS = [
    ("classification.json", "cluster_8gpu.json"),
    ("pipeline.json", "cluster_2gpu.json"),
    ("pipeline.json", "cluster_mixed.json"),
    ("pipeline_auto.json", "cluster_mixed.json"),
    ("hetero_dp.json", "cluster_hetero.json"),
    ("hybrid.json", "cluster_8gpu.json"),
    ("oom.json", "cluster_16gb.json"),
    ("linear.json", "cluster_2gpu.json"),
]
