"""Mixed-precision planning and post-training quantization of a graph.

Each conv/dense layer gets a sensitivity score: the MSE between its FP32
output and its output when only that layer runs fake-quantized, both fed
the FP32 activations of a calibration batch. The most sensitive layers stay
FP32, the rest are quantized.
"""

from __future__ import annotations

import copy
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bitserial import pack_weights
from .errors import ConfigError
from .graph import FP32, INPUT_ID, GraphSpec, Precision, check_graph
from .quant import QuantParams, fake_quantize, fit_scale
from .simulate import flatten_for_dense, simulate, weighted_forward


@dataclass
class PrecisionPlan:
    assignment: dict[str, Precision]
    sensitivity: dict[str, float] = field(default_factory=dict)

    def fp32_layers(self) -> list[str]:
        return [k for k, p in self.assignment.items() if p.is_fp32]

    def low_bit_layers(self) -> list[str]:
        return [k for k, p in self.assignment.items() if not p.is_fp32]

    def to_dict(self) -> dict:
        return {
            "assignment": {k: str(p) for k, p in self.assignment.items()},
            "sensitivity": dict(self.sensitivity),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrecisionPlan":
        return cls(
            {k: Precision.parse(v) for k, v in d["assignment"].items()},
            {k: float(v) for k, v in d.get("sensitivity", {}).items()},
        )


def _layer_inputs(g: GraphSpec, values: dict) -> dict[str, np.ndarray]:
    prev, inputs = INPUT_ID, {}
    for layer in g.layers:
        inputs[layer.id] = values[prev]
        prev = layer.id
    return inputs


def _calib_params(layer, x: np.ndarray, weight: np.ndarray, prec: Precision) -> tuple[QuantParams, QuantParams]:
    if layer.kind == "dense":
        x = flatten_for_dense(x)
    a_q = fit_scale(x, prec.a_bits, signed=False)
    w_q = fit_scale(weight, prec.w_bits, signed=True, per_channel=True)
    return a_q, w_q


def _require_fp32(g: GraphSpec):
    if any(l.quantized for l in g.layers):
        raise ConfigError("planning needs an all-FP32 graph")


def layer_sensitivity(g: GraphSpec, blobs: dict, calib, precision: Precision, workers: int = 1) -> dict[str, float]:
    """Single-layer fake-quantization MSE for every conv/dense layer."""
    _require_fp32(g)
    _, values = simulate(g, blobs, calib, collect=True)
    inputs = _layer_inputs(g, values)

    def score(layer) -> float:
        x = inputs[layer.id]
        w = blobs[layer.weight]
        bias = blobs[layer.bias] if layer.bias is not None else None
        a_q, w_q = _calib_params(layer, x, w, precision)
        out_q = weighted_forward(layer, x, fake_quantize(w, w_q).data, bias, a_q)
        diff = out_q.astype(np.float64) - values[layer.id].astype(np.float64)
        return float(np.mean(diff**2))

    layers = g.quantizable()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(score, layers))
    else:
        scores = [score(l) for l in layers]
    return {l.id: s for l, s in zip(layers, scores)}


def plan_mixed_precision(
    g: GraphSpec,
    blobs: dict,
    calib,
    keep_fraction: float,
    precision: Precision = Precision(2, 2),
    workers: int = 1,
) -> PrecisionPlan:
    """Keep the ``ceil(keep_fraction * L)`` most sensitive of L layers in FP32.

    Ties go to the earlier layer. Non-weighted layers are always FP32.
    """
    if not 0.0 <= keep_fraction <= 1.0 or math.isnan(keep_fraction):
        raise ConfigError(f"keep_fraction must be in [0, 1], got {keep_fraction}")
    check_graph(g, blobs)
    sens = layer_sensitivity(g, blobs, calib, precision, workers) if not precision.is_fp32 else {}
    order = {l.id: i for i, l in enumerate(g.layers)}
    ranked = sorted(sens, key=lambda lid: (-sens[lid], order[lid]))
    # guard against 1/3 * 3 landing a hair above an integer
    n_keep = math.ceil(keep_fraction * len(ranked) - 1e-9)
    keep = set(ranked[:n_keep])
    assignment = {}
    for layer in g.layers:
        low = layer.id in sens and layer.id not in keep
        assignment[layer.id] = precision if low else FP32
    return PrecisionPlan(assignment, sens)


def quantize_graph(g: GraphSpec, blobs: dict, plan: PrecisionPlan, calib) -> tuple[GraphSpec, dict]:
    """Apply ``plan`` to an FP32 graph: calibrate scales and pack weights.

    Activation scales are fitted on the FP32 calibration activations feeding
    each layer; weights get per-output-channel scales. Returns a new graph and
    blob dict; the inputs are left untouched.
    """
    _require_fp32(g)
    check_graph(g, blobs)
    missing = {l.id for l in g.layers} ^ set(plan.assignment)
    if missing:
        raise ConfigError(f"plan and graph disagree on layers: {sorted(missing)}")
    _, values = simulate(g, blobs, calib, collect=True)
    inputs = _layer_inputs(g, values)
    new_g = copy.deepcopy(g)
    new_blobs = dict(blobs)
    for layer in new_g.layers:
        prec = plan.assignment[layer.id]
        if prec.is_fp32:
            continue
        if layer.kind not in ("conv2d", "dense"):
            raise ConfigError(f"layer {layer.id} ({layer.kind}) cannot be quantized")
        w = blobs[layer.weight]
        a_q, w_q = _calib_params(layer, inputs[layer.id], w, prec)
        layer.precision = prec
        layer.a_quant = a_q
        layer.w_quant = w_q
        new_blobs[layer.weight] = pack_weights(w, w_q)
    new_g.precision_plan = plan
    check_graph(new_g, new_blobs)
    return new_g, new_blobs
