"""Plain-text network descriptions.

Grammar, one statement per line, ``#`` starts a comment::

    input N C H W            (or: input N K)
    weights seed=INT         seeded random weights (default seed=0)
    weights file=PATH.npz    arrays named "<id>.weight" / "<id>.bias"
    conv2d ID out=INT kernel=K[xK] [stride=S[xS]] [pad=P[xP]] [bias=true|false]
    dense ID out=INT [bias=true|false]
    relu ID
    maxpool2d ID window=K[xK] [stride=S[xS]]
    add ID other=ID

Input channels/features are inferred from the preceding layer. A dense layer
after a 4-D tensor flattens it.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import LowbitError, ShapeError
from .graph import INPUT_ID, GraphSpec, Layer, _layer_out_shape
from .tensor import Uniform, tensor_create


class NetParseError(LowbitError):
    def __init__(self, line: int, col: int, message: str):
        self.line, self.col = line, col
        super().__init__(f"line {line}, column {col}: {message}")


_KEYS = {
    "conv2d": {"out", "kernel", "stride", "pad", "bias"},
    "dense": {"out", "bias"},
    "relu": set(),
    "maxpool2d": {"window", "stride"},
    "add": {"other"},
}
_REQUIRED = {"conv2d": {"out", "kernel"}, "dense": {"out"}, "maxpool2d": {"window"}, "add": {"other"}}


def _tokens(line: str):
    """Yield (column, token) pairs, columns 1-based."""
    i = 0
    while i < len(line):
        if line[i].isspace():
            i += 1
            continue
        j = i
        while j < len(line) and not line[j].isspace():
            j += 1
        yield i + 1, line[i:j]
        i = j


def _int(tok: str, ln: int, col: int, lo: int = 1) -> int:
    try:
        v = int(tok)
    except ValueError:
        raise NetParseError(ln, col, f"expected an integer, got {tok!r}") from None
    if v < lo:
        raise NetParseError(ln, col, f"value {v} must be >= {lo}")
    return v


def _pair(tok: str, ln: int, col: int, lo: int = 1) -> tuple[int, int]:
    parts = tok.lower().split("x")
    if len(parts) == 1:
        v = _int(parts[0], ln, col, lo)
        return v, v
    if len(parts) == 2:
        return _int(parts[0], ln, col, lo), _int(parts[1], ln, col, lo)
    raise NetParseError(ln, col, f"expected K or KxK, got {tok!r}")


def _bool(tok: str, ln: int, col: int) -> bool:
    if tok.lower() in ("true", "yes", "1"):
        return True
    if tok.lower() in ("false", "no", "0"):
        return False
    raise NetParseError(ln, col, f"expected true/false, got {tok!r}")


def parse_net(text: str, base_dir: str | Path | None = None) -> tuple[GraphSpec, dict]:
    """Parse a description into a graph and FP32 weight blobs."""
    input_shape = None
    weight_src: tuple[str, object] = ("seed", 0)
    layers: list[Layer] = []
    shapes: dict[str, tuple] = {}
    cur = None
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        toks = list(_tokens(line))
        if not toks:
            continue
        (c0, head), rest = toks[0], toks[1:]
        if head == "input":
            if input_shape is not None:
                raise NetParseError(ln, c0, "duplicate input statement")
            if len(rest) not in (2, 4):
                raise NetParseError(ln, c0, "input takes N C H W or N K")
            input_shape = tuple(_int(t, ln, c) for c, t in rest)
            shapes[INPUT_ID] = cur = input_shape
            continue
        if head == "weights":
            if len(rest) != 1 or "=" not in rest[0][1]:
                raise NetParseError(ln, c0, "weights takes seed=INT or file=PATH")
            c, tok = rest[0]
            key, val = tok.split("=", 1)
            if key == "seed":
                weight_src = ("seed", _int(val, ln, c + 5, lo=0))
            elif key == "file":
                weight_src = ("file", val)
            else:
                raise NetParseError(ln, c, f"unknown weights source {key!r}")
            continue
        if head not in _KEYS:
            raise NetParseError(ln, c0, f"unknown statement {head!r}")
        if input_shape is None:
            raise NetParseError(ln, c0, "layers must come after the input statement")
        if not rest:
            raise NetParseError(ln, c0, f"{head} needs a layer id")
        cid, lid = rest[0]
        if lid in shapes or "=" in lid:
            raise NetParseError(ln, cid, f"invalid or duplicate layer id {lid!r}")
        kv, cols = {}, {}
        for c, tok in rest[1:]:
            if "=" not in tok:
                raise NetParseError(ln, c, f"expected key=value, got {tok!r}")
            k, v = tok.split("=", 1)
            if k not in _KEYS[head]:
                raise NetParseError(ln, c, f"{head} does not take {k!r}")
            kv[k], cols[k] = v, c + len(k) + 1
        for k in sorted(_REQUIRED.get(head, set()) - set(kv)):
            raise NetParseError(ln, len(line.rstrip()) + 1, f"{head} requires {k}=")

        layer = _make_layer(head, lid, kv, cols, cur, ln)
        try:
            cur = _layer_out_shape(layer, cur, shapes)
        except KeyError:
            raise NetParseError(ln, cols["other"], f"unknown layer {kv['other']!r}") from None
        except ShapeError as e:
            raise NetParseError(ln, cid, str(e)) from None
        shapes[lid] = cur
        layers.append(layer)
    if input_shape is None:
        raise NetParseError(1, 1, "missing input statement")
    if not layers:
        raise NetParseError(1, 1, "no layers")
    g = GraphSpec(input_shape, layers)
    return g, _weights(g, weight_src, base_dir)


def _make_layer(kind: str, lid: str, kv: dict, cols: dict, in_shape: tuple, ln: int) -> Layer:
    if kind == "conv2d":
        if len(in_shape) != 4:
            raise NetParseError(ln, 1, "conv2d needs a 4-D input")
        bias = _bool(kv["bias"], ln, cols["bias"]) if "bias" in kv else True
        params = {
            "in_channels": in_shape[1],
            "out_channels": _int(kv["out"], ln, cols["out"]),
            "kernel": _pair(kv["kernel"], ln, cols["kernel"]),
            "stride": _pair(kv.get("stride", "1"), ln, cols.get("stride", 1)),
            "padding": _pair(kv.get("pad", "0"), ln, cols.get("pad", 1), lo=0),
        }
        return Layer(lid, kind, params, weight=f"{lid}.weight", bias=f"{lid}.bias" if bias else None)
    if kind == "dense":
        bias = _bool(kv["bias"], ln, cols["bias"]) if "bias" in kv else True
        params = {"in_features": int(np.prod(in_shape[1:])), "out_features": _int(kv["out"], ln, cols["out"])}
        return Layer(lid, kind, params, weight=f"{lid}.weight", bias=f"{lid}.bias" if bias else None)
    if kind == "maxpool2d":
        window = _pair(kv["window"], ln, cols["window"])
        stride = _pair(kv["stride"], ln, cols["stride"]) if "stride" in kv else window
        return Layer(lid, kind, {"window": window, "stride": stride})
    if kind == "add":
        return Layer(lid, kind, other=kv["other"])
    return Layer(lid, kind)


def _weights(g: GraphSpec, src, base_dir) -> dict:
    kind, val = src
    blobs = {}
    if kind == "file":
        path = Path(val)
        if not path.is_absolute() and base_dir is not None:
            path = Path(base_dir) / path
        with np.load(path) as npz:
            arrays = {k: npz[k].astype(np.float32) for k in npz.files}
        for layer in g.quantizable():
            for name in (layer.weight, layer.bias):
                if name is None:
                    continue
                if name not in arrays:
                    raise LowbitError(f"{path}: missing array {name!r}")
                blobs[name] = arrays[name]
        return blobs
    seed = int(val)
    for i, layer in enumerate(g.quantizable()):
        p = layer.params
        if layer.kind == "conv2d":
            kh, kw = p["kernel"]
            shape = (p["out_channels"], p["in_channels"], kh, kw)
            n_out = p["out_channels"]
        else:
            shape = (p["out_features"], p["in_features"])
            n_out = p["out_features"]
        fan_in = int(np.prod(shape[1:]))
        bound = float(np.sqrt(6.0 / fan_in))
        blobs[layer.weight] = tensor_create(shape, fill=Uniform(-bound, bound, seed * 1000 + 2 * i)).data.copy()
        if layer.bias is not None:
            blobs[layer.bias] = tensor_create((n_out,), fill=Uniform(-0.1, 0.1, seed * 1000 + 2 * i + 1)).data.copy()
    return blobs


def load_net(path) -> tuple[GraphSpec, dict]:
    path = Path(path)
    return parse_net(path.read_text(), base_dir=path.parent)
