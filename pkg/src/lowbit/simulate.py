"""Layer-by-layer reference execution of a graph.

FP32 layers run the reference operators directly. Quantized layers run the
same reference operators on fake-quantized activations and on weights
reconstructed from their packed codes, which is what the bitserial runtime
must reproduce.
"""

from __future__ import annotations

import numpy as np

from . import ref_ops
from .bitpack import BitplaneTensor, unpack_bitplanes
from .errors import ShapeError
from .graph import INPUT_ID, GraphSpec, Layer, check_graph
from .quant import QuantParams, fake_quantize
from .tensor import Tensor, as_array


def dequantized_weight(layer: Layer, packed: BitplaneTensor) -> np.ndarray:
    """FP32 weight a quantized layer effectively applies, in its dense shape."""
    codes = unpack_bitplanes(packed).data - packed.zero_point
    scales = np.broadcast_to(np.asarray(packed.scales, np.float64).reshape(-1), (packed.rows,))
    w = (codes * scales[:, None]).astype(np.float32)
    p = layer.params
    if layer.kind == "conv2d":
        kh, kw = p["kernel"]
        return w.reshape(p["out_channels"], p["in_channels"], kh, kw)
    return w


def flatten_for_dense(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def weighted_forward(layer: Layer, x: np.ndarray, weight, bias, a_quant: QuantParams | None = None) -> np.ndarray:
    """Conv/dense in FP32, optionally fake-quantizing the input first."""
    if layer.kind == "dense":
        x = flatten_for_dense(x)
    if a_quant is not None:
        x = fake_quantize(x, a_quant).data
    if layer.kind == "conv2d":
        return ref_ops.conv2d_f32(x, weight, bias, layer.conv_params()).data
    return ref_ops.dense_f32(x, weight, bias).data


def layer_forward(layer: Layer, x: np.ndarray, blobs: dict, values: dict) -> np.ndarray:
    if layer.kind in ("conv2d", "dense"):
        w = blobs[layer.weight]
        bias = blobs[layer.bias] if layer.bias is not None else None
        if layer.quantized:
            return weighted_forward(layer, x, dequantized_weight(layer, w), bias, layer.a_quant)
        return weighted_forward(layer, x, w, bias)
    if layer.kind == "relu":
        return ref_ops.relu(x).data
    if layer.kind == "maxpool2d":
        window, stride = layer.pool_params()
        return ref_ops.maxpool2d(x, window, stride).data
    if layer.kind == "add":
        return ref_ops.add(x, values[layer.other]).data
    raise ShapeError(f"unknown layer kind {layer.kind}")


def simulate(g: GraphSpec, blobs: dict, x, collect: bool = False):
    """Run ``g`` on ``x`` with reference kernels.

    Returns the output Tensor, or ``(output, values)`` with every layer's
    output keyed by layer id when ``collect`` is set.
    """
    check_graph(g, blobs)
    xa = as_array(x)
    if tuple(xa.shape) != g.input_shape:
        raise ShapeError(f"input shape {xa.shape} != graph input {g.input_shape}")
    values = {INPUT_ID: xa}
    cur = xa
    for layer in g.layers:
        cur = layer_forward(layer, cur, blobs, values)
        values[layer.id] = cur
    out = Tensor(cur)
    return (out, values) if collect else out
