"""Graph description: an ordered chain of layers with optional skip adds."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .bitpack import BitplaneTensor
from .errors import ConfigError, ShapeError, ValidationError
from .quant import MAX_BITS, MIN_BITS, QuantParams
from .ref_ops import ConvParams

KINDS = ("conv2d", "dense", "relu", "maxpool2d", "add")
WEIGHTED = ("conv2d", "dense")
INPUT_ID = "input"
FP32_BITS = 32

_PREC_RE = re.compile(r"^\s*(\d+)\s*A\s*/\s*(\d+)\s*W\s*$", re.IGNORECASE)


@dataclass(frozen=True)
class Precision:
    a_bits: int = FP32_BITS
    w_bits: int = FP32_BITS

    @property
    def is_fp32(self) -> bool:
        return self.a_bits == FP32_BITS and self.w_bits == FP32_BITS

    @classmethod
    def parse(cls, text: str) -> "Precision":
        """Parse ``"xA/yW"`` (x, y in {1, 2, 3, 32}) or ``"FP32"``."""
        if text.strip().upper() == "FP32":
            return FP32
        m = _PREC_RE.match(text)
        if not m:
            raise ConfigError(f"precision must look like '2A/2W', got {text!r}")
        a, w = int(m.group(1)), int(m.group(2))
        allowed = set(range(MIN_BITS, MAX_BITS + 1)) | {FP32_BITS}
        if a not in allowed or w not in allowed:
            raise ConfigError(f"bit widths must be in {sorted(allowed)}, got {text!r}")
        if (a == FP32_BITS) != (w == FP32_BITS):
            raise ConfigError(f"{text!r}: activations and weights must both be low-bit or both FP32")
        return cls(a, w)

    def __str__(self):
        return "FP32" if self.is_fp32 else f"{self.a_bits}A/{self.w_bits}W"


FP32 = Precision()


@dataclass
class Layer:
    id: str
    kind: str
    params: dict = field(default_factory=dict)
    precision: Precision = FP32
    weight: str | None = None
    bias: str | None = None
    other: str | None = None  # second operand of ``add``
    a_quant: QuantParams | None = None
    w_quant: QuantParams | None = None

    def __post_init__(self):
        self.params = {k: tuple(v) if isinstance(v, list) else v for k, v in self.params.items()}

    @property
    def quantized(self) -> bool:
        return not self.precision.is_fp32

    def conv_params(self) -> ConvParams:
        p = self.params
        return ConvParams(tuple(p["kernel"]), tuple(p.get("stride", (1, 1))), tuple(p.get("padding", (0, 0))))

    def pool_params(self) -> tuple[tuple[int, int], tuple[int, int]]:
        window = tuple(self.params["window"])
        return window, tuple(self.params.get("stride", window))


@dataclass
class GraphSpec:
    input_shape: tuple[int, ...]
    layers: list[Layer]
    precision_plan: Any = None  # PrecisionPlan, kept untyped to avoid an import cycle

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)

    def layer(self, layer_id: str) -> Layer:
        for l in self.layers:
            if l.id == layer_id:
                return l
        raise KeyError(layer_id)

    @property
    def output_id(self) -> str:
        return self.layers[-1].id

    def quantizable(self) -> list[Layer]:
        return [l for l in self.layers if l.kind in WEIGHTED]


@dataclass(frozen=True)
class Violation:
    layer_id: str
    category: str  # structure | topology | shape | precision | blob
    message: str

    def __str__(self):
        return f"[{self.category}] {self.layer_id}: {self.message}"


def _layer_out_shape(layer: Layer, shape: tuple, shapes: dict) -> tuple:
    """Output shape of ``layer`` given its input shape; raises ShapeError/KeyError."""
    p = layer.params
    if layer.kind == "conv2d":
        if len(shape) != 4:
            raise ShapeError(f"conv2d needs NCHW input, got {shape}")
        if shape[1] != p["in_channels"]:
            raise ShapeError(f"in_channels={p['in_channels']} but input has {shape[1]} channels")
        oh, ow = layer.conv_params().output_hw(shape[2], shape[3])
        return (shape[0], int(p["out_channels"]), oh, ow)
    if layer.kind == "dense":
        k = int(np.prod(shape[1:]))
        if k != p["in_features"]:
            raise ShapeError(f"in_features={p['in_features']} but input flattens to {k}")
        return (shape[0], int(p["out_features"]))
    if layer.kind == "relu":
        return shape
    if layer.kind == "maxpool2d":
        if len(shape) != 4:
            raise ShapeError(f"maxpool2d needs NCHW input, got {shape}")
        (kh, kw), (sh, sw) = layer.pool_params()
        if min(kh, kw, sh, sw) < 1:
            raise ShapeError("window and stride must be >= 1")
        if kh > shape[2] or kw > shape[3]:
            raise ShapeError(f"window {(kh, kw)} larger than input {shape[2:]}")
        return (shape[0], shape[1], (shape[2] - kh) // sh + 1, (shape[3] - kw) // sw + 1)
    if layer.kind == "add":
        other = shapes[layer.other]
        if other != shape:
            raise ShapeError(f"add operands differ: {shape} vs {other} (from {layer.other})")
        return shape
    raise ShapeError(f"unknown kind {layer.kind}")


def infer_shapes(g: GraphSpec) -> dict[str, tuple]:
    """Output shape per layer id (plus ``"input"``). Raises on the first violation."""
    v = validate_graph(g)
    if v:
        raise ValidationError(v)
    return _propagate(g, [])


def _propagate(g: GraphSpec, out: list[Violation]) -> dict[str, tuple]:
    shapes = {INPUT_ID: g.input_shape}
    cur = g.input_shape
    for layer in g.layers:
        if cur is None:
            shapes[layer.id] = None
            continue
        try:
            cur = _layer_out_shape(layer, cur, shapes)
        except (ShapeError, KeyError, TypeError, ValueError) as e:
            if isinstance(e, KeyError) and layer.kind != "add":
                e = f"missing parameter {e}"
            out.append(Violation(layer.id, "shape", str(e)))
            cur = None
        shapes[layer.id] = cur
    return shapes


def _check_precision(layer: Layer, out: list[Violation]):
    lid = layer.id
    if not layer.quantized:
        if layer.a_quant is not None or layer.w_quant is not None:
            out.append(Violation(lid, "precision", "FP32 layer carries quantization parameters"))
        return
    if layer.kind not in WEIGHTED:
        out.append(Violation(lid, "precision", f"{layer.kind} layers cannot be quantized"))
        return
    prec = layer.precision
    for name, b in (("a_bits", prec.a_bits), ("w_bits", prec.w_bits)):
        if not MIN_BITS <= b <= MAX_BITS:
            out.append(Violation(lid, "precision", f"{name}={b} outside [{MIN_BITS}, {MAX_BITS}]"))
    aq, wq = layer.a_quant, layer.w_quant
    if aq is None or wq is None:
        out.append(Violation(lid, "precision", "quantized layer needs activation and weight QuantParams"))
        return
    if aq.bits != prec.a_bits or aq.signed or aq.per_channel:
        out.append(Violation(lid, "precision", f"activation params {aq} do not match unsigned per-tensor {prec.a_bits}-bit"))
    if wq.bits != prec.w_bits or not wq.signed:
        out.append(Violation(lid, "precision", f"weight params {wq} do not match signed {prec.w_bits}-bit"))
    n_out = layer.params.get("out_channels", layer.params.get("out_features"))
    if wq.per_channel and n_out is not None and len(wq.scale) != n_out:
        out.append(Violation(lid, "precision", f"{len(wq.scale)} weight scales for {n_out} output channels"))


def _check_blobs(layer: Layer, blobs: dict, out: list[Violation]):
    lid = layer.id
    p = layer.params
    if layer.kind == "conv2d":
        kh, kw = tuple(p.get("kernel", (0, 0)))
        n_out, fan_in = p.get("out_channels"), p.get("in_channels", 0) * kh * kw
        dense_shape = (n_out, p.get("in_channels"), kh, kw)
    else:
        n_out, fan_in = p.get("out_features"), p.get("in_features")
        dense_shape = (n_out, fan_in)
    w = blobs.get(layer.weight)
    if w is None:
        out.append(Violation(lid, "blob", f"dangling weight reference {layer.weight!r}"))
    elif layer.quantized:
        if not isinstance(w, BitplaneTensor):
            out.append(Violation(lid, "blob", "quantized layer needs a bitplane-packed weight"))
        else:
            wq = layer.w_quant
            if (w.rows, w.k) != (n_out, fan_in):
                out.append(Violation(lid, "shape", f"packed weight is {w.rows}x{w.k}, expected {n_out}x{fan_in}"))
            if wq is not None:
                if w.bits != wq.bits or w.zero_point != wq.zero_point:
                    out.append(Violation(lid, "precision", "packed weight bits/zero point disagree with weight params"))
                want = np.broadcast_to(np.asarray(wq.scale, np.float32), (w.rows,))
                if w.scales is None or not np.array_equal(np.broadcast_to(w.scales, (w.rows,)), want):
                    out.append(Violation(lid, "precision", "packed weight scales disagree with weight params"))
    else:
        if not isinstance(w, np.ndarray):
            out.append(Violation(lid, "blob", "FP32 layer needs a dense float weight"))
        elif tuple(w.shape) != dense_shape:
            out.append(Violation(lid, "shape", f"weight shape {tuple(w.shape)}, expected {dense_shape}"))
    if layer.bias is not None:
        b = blobs.get(layer.bias)
        if b is None:
            out.append(Violation(lid, "blob", f"dangling bias reference {layer.bias!r}"))
        elif not isinstance(b, np.ndarray) or b.size != n_out:
            out.append(Violation(lid, "shape", f"bias must hold {n_out} floats"))


def validate_graph(g: GraphSpec, blobs: dict | None = None) -> list[Violation]:
    """Return every violation found (empty list means valid).

    Checks structure and topology, shape propagation end to end, precision
    consistency and, when ``blobs`` is given, that blob references resolve to
    blobs of the right encoding and size.
    """
    out: list[Violation] = []
    if not g.layers:
        return [Violation("<graph>", "structure", "graph has no layers")]
    if len(g.input_shape) not in (2, 4) or any(s < 1 for s in g.input_shape):
        out.append(Violation(INPUT_ID, "shape", f"bad input shape {g.input_shape}"))
        return out
    seen = {INPUT_ID}
    for layer in g.layers:
        lid = layer.id
        if not lid or lid in seen:
            out.append(Violation(lid or "<anon>", "structure", "layer ids must be unique, non-empty and not 'input'"))
        if layer.kind not in KINDS:
            out.append(Violation(lid, "structure", f"unknown kind {layer.kind!r}"))
        if layer.kind == "add":
            if layer.other is None:
                out.append(Violation(lid, "topology", "add needs a second operand"))
            elif layer.other not in seen:
                out.append(Violation(lid, "topology", f"add references {layer.other!r}, which is not an earlier layer"))
        elif layer.other is not None:
            out.append(Violation(lid, "structure", "only add layers take a second operand"))
        if layer.kind in WEIGHTED:
            if layer.weight is None:
                out.append(Violation(lid, "blob", f"{layer.kind} needs exactly one weight blob"))
        elif layer.weight is not None or layer.bias is not None:
            out.append(Violation(lid, "blob", f"{layer.kind} takes no weight or bias blobs"))
        _check_precision(layer, out)
        seen.add(lid)
    if out:
        return out
    _propagate(g, out)
    if blobs is not None:
        for layer in g.layers:
            if layer.kind in WEIGHTED:
                _check_blobs(layer, blobs, out)
    return out


def check_graph(g: GraphSpec, blobs: dict | None = None) -> None:
    v = validate_graph(g, blobs)
    if v:
        raise ValidationError(v)
