"""Graph compiler and executor.

``compile`` lowers a GraphSpec to a flat op list: FP32 layers map to the
reference kernels, quantized conv/dense layers become a ``quantize`` op on
their input followed by a bitserial op whose FP32 output feeds the next
layer. A relu directly after a conv/dense whose output is not used
elsewhere is fused into it. Values are assigned to arena buffers by greedy
interval colouring; ``run`` executes in that arena and checks on every
read that the buffer still holds the value being read.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import ref_ops
from .bitpack import BitplaneTensor
from .bitserial import DEFAULT_L1_BYTES, TilePlan, conv2d_bitserial, dense_bitserial, make_tile_plan
from .errors import ConfigError, ShapeError
from .graph import INPUT_ID, GraphSpec, check_graph, infer_shapes
from .quant import QuantParams, quantize
from .tensor import Tensor, as_array

FP32_KERNEL = "fp32"
BITSERIAL_KERNEL = "bitserial"
QUANTIZE_KERNEL = "quantize"

# the runtime uses wider tiles than make_tile_plan's defaults; numpy call
# overhead dominates at 8x8
RUNTIME_TILE = 32


@dataclass(frozen=True)
class Value:
    id: int
    name: str
    shape: tuple[int, ...]
    dtype: str  # "float32" | "int32"

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape)) * 4


@dataclass
class Op:
    name: str
    kind: str  # quantize | conv2d | dense | relu | maxpool2d | add
    kernel: str
    layer_ids: tuple[str, ...]
    inputs: tuple[int, ...]
    output: int
    fuse_relu: bool = False
    params: object = None  # ConvParams or pool window/stride
    weight: object = None  # np.ndarray or BitplaneTensor
    bias: np.ndarray | None = None
    a_quant: QuantParams | None = None
    tile_plan: TilePlan | None = None


@dataclass
class ExecutionPlan:
    graph: GraphSpec
    ops: list[Op]
    values: list[Value]
    input_value: int
    output_value: int
    buffer_of: dict[int, int]
    buffer_sizes: list[int]
    worker_count: int
    live_ranges: dict[int, tuple[int, int]] = field(default_factory=dict)

    @property
    def arena_bytes(self) -> int:
        return sum(self.buffer_sizes)

    def kernel_of(self, layer_id: str) -> str:
        for op in self.ops:
            if layer_id in op.layer_ids and op.kernel != QUANTIZE_KERNEL:
                return op.kernel
        raise KeyError(layer_id)

    def weight_bytes(self) -> int:
        total = 0
        for op in self.ops:
            if isinstance(op.weight, BitplaneTensor):
                total += op.weight.nbytes + 4 * op.weight.rows
            elif op.weight is not None:
                total += op.weight.nbytes
            if op.bias is not None:
                total += op.bias.nbytes
        return total

    def max_live_bytes(self) -> int:
        """Largest total size of simultaneously live values over all program points."""
        best = 0
        for t in range(-1, len(self.ops)):
            live = sum(self.values[v].nbytes for v, (d, u) in self.live_ranges.items() if d <= t <= u)
            best = max(best, live)
        return best


def _consumers(g: GraphSpec) -> dict[str, int]:
    count = {INPUT_ID: 0}
    prev = INPUT_ID
    for layer in g.layers:
        count[layer.id] = 0
        count[prev] += 1
        if layer.kind == "add":
            count[layer.other] += 1
        prev = layer.id
    return count


def compile(g: GraphSpec, blobs: dict, worker_count: int = 1, l1_budget_bytes: int = DEFAULT_L1_BYTES) -> ExecutionPlan:
    """Build a deterministic execution plan for a validated graph."""
    if worker_count < 1:
        raise ConfigError("worker_count must be >= 1")
    check_graph(g, blobs)
    shapes = infer_shapes(g)
    consumers = _consumers(g)

    values: list[Value] = []
    ops: list[Op] = []

    def new_value(name, shape, dtype="float32") -> int:
        values.append(Value(len(values), name, tuple(shape), dtype))
        return len(values) - 1

    vid_of = {INPUT_ID: new_value(INPUT_ID, g.input_shape)}
    prev = INPUT_ID
    layers = g.layers
    i = 0
    while i < len(layers):
        layer = layers[i]
        src = vid_of[prev]
        if layer.kind in ("conv2d", "dense"):
            nxt = layers[i + 1] if i + 1 < len(layers) else None
            fuse = nxt is not None and nxt.kind == "relu" and consumers[layer.id] == 1
            out_id = nxt.id if fuse else layer.id
            ids = (layer.id, nxt.id) if fuse else (layer.id,)
            bias = blobs[layer.bias] if layer.bias is not None else None
            params = layer.conv_params() if layer.kind == "conv2d" else None
            if layer.quantized:
                if not isinstance(blobs[layer.weight], BitplaneTensor):
                    raise ConfigError(f"{layer.id}: quantized layer without packed weights")
                in_shape = values[src].shape
                if layer.kind == "dense":
                    in_shape = (in_shape[0], int(np.prod(in_shape[1:])))
                codes = new_value(f"{layer.id}:codes", in_shape, "int32")
                ops.append(Op(f"{layer.id}:quantize", QUANTIZE_KERNEL, QUANTIZE_KERNEL, (layer.id,), (src,), codes,
                              a_quant=layer.a_quant))
                w = blobs[layer.weight]
                n_rows = in_shape[0] if layer.kind == "dense" else in_shape[0] * shapes[layer.id][2] * shapes[layer.id][3]
                tp = make_tile_plan(w.rows, n_rows, w.words, worker_count, l1_budget_bytes, RUNTIME_TILE, RUNTIME_TILE)
                out = new_value(out_id, shapes[layer.id])
                ops.append(Op(layer.id, layer.kind, BITSERIAL_KERNEL, ids, (codes,), out, fuse, params, w, bias,
                              layer.a_quant, tp))
            else:
                out = new_value(out_id, shapes[layer.id])
                ops.append(Op(layer.id, layer.kind, FP32_KERNEL, ids, (src,), out, fuse, params, blobs[layer.weight], bias))
            vid_of[layer.id] = out
            if fuse:
                vid_of[nxt.id] = out
                prev = nxt.id
                i += 2
                continue
        else:
            inputs = (src,) if layer.kind != "add" else (src, vid_of[layer.other])
            params = layer.pool_params() if layer.kind == "maxpool2d" else None
            out = new_value(layer.id, shapes[layer.id])
            ops.append(Op(layer.id, layer.kind, FP32_KERNEL, (layer.id,), inputs, out, params=params))
            vid_of[layer.id] = out
        prev = layer.id
        i += 1

    output_value = vid_of[g.output_id]
    live = _live_ranges(ops, len(values), output_value)
    buffer_of, sizes = _assign_buffers(values, live, len(ops))
    return ExecutionPlan(g, ops, values, vid_of[INPUT_ID], output_value, buffer_of, sizes, worker_count, live)


def _live_ranges(ops: list[Op], n_values: int, output_value: int) -> dict[int, tuple[int, int]]:
    """(defining op index, last reading op index); the graph input is defined at -1."""
    start = {0: -1}
    last = {}
    for t, op in enumerate(ops):
        start[op.output] = t
        last.setdefault(op.output, t)
        for v in op.inputs:
            last[v] = t
    last[output_value] = len(ops)
    last.setdefault(0, -1)
    return {v: (start[v], last[v]) for v in range(n_values)}


def _assign_buffers(values: list[Value], live: dict, n_ops: int) -> tuple[dict[int, int], list[int]]:
    """Greedy interval colouring in definition order.

    A buffer is free for a new value once the value it holds was last read
    strictly before the new value's defining op.
    """
    order = sorted(live, key=lambda v: (live[v][0], v))
    sizes: list[int] = []
    holder: list[int] = []  # value currently occupying each buffer
    buffer_of: dict[int, int] = {}
    for v in order:
        d = live[v][0]
        free = [b for b in range(len(sizes)) if live[holder[b]][1] < d]
        need = values[v].nbytes
        fitting = [b for b in free if sizes[b] >= need]
        if fitting:
            b = min(fitting, key=lambda b: (sizes[b], b))
        elif free:
            b = max(free, key=lambda b: (sizes[b], -b))
            sizes[b] = need
        else:
            b = len(sizes)
            sizes.append(need)
            holder.append(v)
        holder[b] = v
        buffer_of[v] = b
    return buffer_of, sizes


class _Arena:
    def __init__(self, plan: ExecutionPlan):
        self.plan = plan
        self.buffers = [np.empty(-(-s // 8), dtype=np.uint64).view(np.uint8) for s in plan.buffer_sizes]
        self.owner: dict[int, int] = {}

    def view(self, v: int) -> np.ndarray:
        val = self.plan.values[v]
        raw = self.buffers[self.plan.buffer_of[v]][: val.nbytes]
        return raw.view(np.dtype(val.dtype)).reshape(val.shape)

    def write(self, v: int, data: np.ndarray):
        dst = self.view(v)
        if dst.shape != data.shape:
            data = data.reshape(dst.shape)
        np.copyto(dst, data)
        self.owner[self.plan.buffer_of[v]] = v

    def read(self, v: int) -> np.ndarray:
        b = self.plan.buffer_of[v]
        if self.owner.get(b) != v:
            raise RuntimeError(f"buffer {b} no longer holds value {self.plan.values[v].name!r}")
        return self.view(v)


def _execute(op: Op, args: list[np.ndarray], workers: int) -> np.ndarray:
    if op.kernel == QUANTIZE_KERNEL:
        # per-tensor, so shape-agnostic; the arena reshapes to [N, K] for dense
        return quantize(args[0], op.a_quant).data
    if op.kind in ("conv2d", "dense") and op.kernel == BITSERIAL_KERNEL:
        tp = op.tile_plan
        if tp.worker_count != workers:
            tp = TilePlan(tp.tile_m, tp.tile_n, tp.tile_k, workers)
        if op.kind == "conv2d":
            return conv2d_bitserial(args[0], op.a_quant, op.weight, op.bias, op.params, op.fuse_relu, tp).data
        return dense_bitserial(args[0], op.a_quant, op.weight, op.bias, op.fuse_relu, tp).data
    if op.kind == "conv2d":
        out = ref_ops.conv2d_f32(args[0], op.weight, op.bias, op.params).data
    elif op.kind == "dense":
        out = ref_ops.dense_f32(args[0].reshape(args[0].shape[0], -1), op.weight, op.bias).data
    elif op.kind == "relu":
        return ref_ops.relu(args[0]).data
    elif op.kind == "maxpool2d":
        window, stride = op.params
        return ref_ops.maxpool2d(args[0], window, stride).data
    elif op.kind == "add":
        return ref_ops.add(args[0], args[1]).data
    else:
        raise ConfigError(f"no kernel for {op.kind}")
    return ref_ops.relu(out).data if op.fuse_relu else out


def run(plan: ExecutionPlan, x, workers: int | None = None, timings: dict | None = None) -> Tensor:
    """Execute ``plan`` on ``x``. ``timings`` (op name -> list of ns) is filled if given."""
    xa = as_array(x)
    if tuple(xa.shape) != plan.graph.input_shape:
        raise ShapeError(f"input shape {xa.shape} != graph input {plan.graph.input_shape}")
    workers = plan.worker_count if workers is None else workers
    arena = _Arena(plan)
    arena.write(plan.input_value, xa)
    for op in plan.ops:
        t0 = time.perf_counter_ns()
        args = [arena.read(v) for v in op.inputs]
        arena.write(op.output, _execute(op, args, workers))
        if timings is not None:
            timings.setdefault(op.name, []).append(time.perf_counter_ns() - t0)
    return Tensor(arena.read(plan.output_value).copy())


@dataclass
class BenchStats:
    mean_ms: float
    p50_ms: float
    p90_ms: float
    samples_ms: list[float]
    per_op_ms: dict[str, float]
    per_op_kernel: dict[str, str]
    model_bytes: int
    workers: int

    def to_dict(self) -> dict:
        return {
            "latency_ms": {"mean": self.mean_ms, "p50": self.p50_ms, "p90": self.p90_ms, "samples": self.samples_ms},
            "per_op_ms": [{"op": k, "kernel": self.per_op_kernel[k], "mean": v} for k, v in self.per_op_ms.items()],
            "model_bytes": self.model_bytes,
            "workers": self.workers,
            "iters": len(self.samples_ms),
        }


def benchmark(plan: ExecutionPlan, x, warmup: int = 1, iters: int = 10, workers: int | None = None) -> BenchStats:
    """Time ``iters`` runs after ``warmup`` untimed ones, with a per-op breakdown."""
    if iters < 1:
        raise ConfigError("iters must be >= 1")
    for _ in range(warmup):
        run(plan, x, workers)
    timings: dict[str, list[int]] = {}
    samples = []
    for _ in range(iters):
        t0 = time.perf_counter_ns()
        run(plan, x, workers, timings)
        samples.append((time.perf_counter_ns() - t0) / 1e6)
    arr = np.asarray(samples)
    per_op = {op.name: float(np.mean(timings[op.name])) / 1e6 for op in plan.ops}
    return BenchStats(
        mean_ms=float(arr.mean()),
        p50_ms=float(np.percentile(arr, 50)),
        p90_ms=float(np.percentile(arr, 90)),
        samples_ms=[float(s) for s in samples],
        per_op_ms=per_op,
        per_op_kernel={op.name: op.kernel for op in plan.ops},
        model_bytes=plan.weight_bytes(),
        workers=plan.worker_count if workers is None else workers,
    )
