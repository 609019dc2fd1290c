"""Binary model container (``.dlbr``).

Layout::

    offset 0   b"DLBR"
    offset 4   uint32 LE  format version (1)
    offset 8   uint32 LE  header length H
    offset 12  H bytes    header: canonical JSON (sorted keys, no spaces), UTF-8
    ...        zero padding to the next 64-byte boundary
    blobs      each at a 64-byte aligned absolute offset, zero padded between;
               the file ends exactly at the end of the last blob

Blob encodings: ``fp32-dense`` (little-endian float32, C order) and
``bitplane-packed`` (plane-major little-endian uint64 words, see bitpack).
Every packed blob references an fp32-dense blob holding its per-row scales.
Each table entry carries a CRC-32 of its payload.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .bitpack import BitplaneTensor
from .errors import LowbitError, ValidationError
from .graph import GraphSpec, Layer, Precision, validate_graph
from .planner import PrecisionPlan
from .quant import QuantParams

MAGIC = b"DLBR"
VERSION = 1
ALIGN = 64
PREFIX = struct.Struct("<4sII")

FP32_DENSE = "fp32-dense"
BITPLANE = "bitplane-packed"


class ContainerError(LowbitError):
    """Any failure to decode a container."""


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class OverlappingBlobsError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class HeaderError(ContainerError):
    """Header is not valid JSON or does not follow the schema."""


class TopologyError(ContainerError):
    pass


class InvalidGraphError(ContainerError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def scale_blob_name(weight_name: str) -> str:
    return f"{weight_name}.scales"


# ---------------------------------------------------------------------------
# header encoding
# ---------------------------------------------------------------------------


def _quant_to_dict(q: QuantParams | None, inline_scale: bool) -> dict | None:
    if q is None:
        return None
    d = {"bits": q.bits, "signed": q.signed, "granularity": q.granularity}
    if inline_scale or not q.per_channel:
        d["scale"] = q.scale.tolist() if q.per_channel else q.scale
    return d


def _layer_to_dict(layer: Layer) -> dict:
    return {
        "id": layer.id,
        "kind": layer.kind,
        "params": {k: list(v) if isinstance(v, tuple) else v for k, v in layer.params.items()},
        "precision": str(layer.precision),
        "weight": layer.weight,
        "bias": layer.bias,
        "other": layer.other,
        "a_quant": _quant_to_dict(layer.a_quant, True),
        "w_quant": _quant_to_dict(layer.w_quant, False),
    }


def _referenced_blobs(g: GraphSpec) -> list[str]:
    names = []
    for layer in g.layers:
        for name in (layer.weight, layer.bias):
            if name is not None and name not in names:
                names.append(name)
    return names


def encode_header(g: GraphSpec, table: list[dict]) -> bytes:
    plan = g.precision_plan
    doc = {
        "graph": {"input_shape": list(g.input_shape), "layers": [_layer_to_dict(l) for l in g.layers]},
        "precision_plan": plan.to_dict() if plan is not None else None,
        "blobs": table,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def save_model(g: GraphSpec, blobs: dict) -> bytes:
    """Serialize a validated graph and the blobs it references."""
    violations = validate_graph(g, blobs)
    if violations:
        raise ValidationError(violations)
    payloads: list[tuple[dict, bytes]] = []
    for name in _referenced_blobs(g):
        blob = blobs[name]
        if isinstance(blob, BitplaneTensor):
            sname = scale_blob_name(name)
            if sname in blobs:
                raise ValidationError([f"blob name {sname!r} is reserved for the scales of {name!r}"])
            scales = np.broadcast_to(np.asarray(blob.scales, "<f4"), (blob.rows,))
            entry = {"name": name, "encoding": BITPLANE, "bits": blob.bits, "rows": blob.rows,
                     "k": blob.k, "zero_point": blob.zero_point, "scales": sname}
            payloads.append((entry, blob.to_bytes()))
            payloads.append(({"name": sname, "encoding": FP32_DENSE, "shape": [blob.rows]}, scales.tobytes()))
        else:
            arr = np.ascontiguousarray(blob, dtype="<f4")
            payloads.append(({"name": name, "encoding": FP32_DENSE, "shape": list(arr.shape)}, arr.tobytes()))

    # offsets depend on the header length, which depends on the offsets;
    # iterate until the aligned start of the payload area is stable
    data_start = _align(PREFIX.size)
    while True:
        table, off = [], data_start
        for entry, data in payloads:
            table.append({**entry, "offset": off, "length": len(data), "crc32": zlib.crc32(data)})
            off = _align(off + len(data))
        header = encode_header(g, table)
        need = _align(PREFIX.size + len(header))
        if need == data_start:
            break
        data_start = need

    out = bytearray(PREFIX.pack(MAGIC, VERSION, len(header)))
    out += header
    for entry, (_, data) in zip(table, payloads):
        out += b"\0" * (entry["offset"] - len(out))
        out += data
    return bytes(out)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def _quant_from_dict(d, scale=None) -> QuantParams | None:
    if d is None:
        return None
    s = d["scale"] if "scale" in d else scale
    if s is None:
        raise HeaderError("per-channel weight params without scales")
    return QuantParams(d["bits"], s, d["signed"], d["granularity"])


def _decode_blob(entry: dict, data: bytes):
    enc = entry["encoding"]
    if enc == FP32_DENSE:
        shape = tuple(int(s) for s in entry["shape"])
        if int(np.prod(shape)) * 4 != len(data):
            raise HeaderError(f"blob {entry['name']!r}: {len(data)} bytes do not match shape {shape}")
        return np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)
    if enc == BITPLANE:
        return BitplaneTensor.from_bytes(data, int(entry["bits"]), int(entry["rows"]), int(entry["k"]), int(entry["zero_point"]))
    raise HeaderError(f"unknown blob encoding {enc!r}")


def load_model(buf: bytes) -> tuple[GraphSpec, dict]:
    """Decode and fully validate a container. Never returns partial results."""
    buf = bytes(buf)
    if len(buf) < PREFIX.size:
        if not MAGIC.startswith(buf[:4]):
            raise BadMagicError("not a DLBR container")
        raise TruncatedError(f"file is {len(buf)} bytes, shorter than the {PREFIX.size}-byte prefix")
    magic, version, hlen = PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    header_end = PREFIX.size + hlen
    if header_end > len(buf):
        raise TruncatedError(f"header needs {hlen} bytes, only {len(buf) - PREFIX.size} present")
    try:
        doc = json.loads(buf[PREFIX.size:header_end].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise HeaderError(f"header is not valid JSON: {e}") from None
    try:
        return _from_doc(doc, buf, header_end)
    except ContainerError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError, LowbitError) as e:
        raise HeaderError(f"malformed header: {type(e).__name__}: {e}") from None


def _from_doc(doc, buf: bytes, header_end: int) -> tuple[GraphSpec, dict]:
    if not isinstance(doc, dict):
        raise HeaderError("header must be a JSON object")
    table = doc["blobs"]
    if not isinstance(table, list):
        raise HeaderError("blob table must be a list")
    spans = []
    for entry in table:
        off, length = int(entry["offset"]), int(entry["length"])
        if off < header_end or off % ALIGN or length < 0:
            raise HeaderError(f"blob {entry['name']!r} has an invalid offset {off}")
        spans.append((off, off + length, entry["name"]))
    spans.sort()
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise OverlappingBlobsError(f"blobs {n0!r} and {n1!r} overlap")
    end = spans[-1][1] if spans else header_end
    if end > len(buf):
        raise TruncatedError(f"payload needs {end} bytes, file has {len(buf)}")
    if end < len(buf):
        raise HeaderError(f"{len(buf) - end} trailing bytes after the last blob")

    raw, blobs = {}, {}
    for entry in table:
        name = entry["name"]
        if name in raw:
            raise HeaderError(f"duplicate blob {name!r}")
        data = buf[entry["offset"] : entry["offset"] + entry["length"]]
        if zlib.crc32(data) != entry["crc32"]:
            raise ChecksumError(f"blob {name!r} fails its checksum")
        raw[name] = (entry, _decode_blob(entry, data))
    scale_names = set()
    for name, (entry, blob) in raw.items():
        if isinstance(blob, BitplaneTensor):
            sname = entry["scales"]
            if sname not in raw or not isinstance(raw[sname][1], np.ndarray):
                raise HeaderError(f"packed blob {name!r} references missing scales {sname!r}")
            scale_names.add(sname)
            blob = BitplaneTensor(blob.planes, blob.k, blob.zero_point, raw[sname][1].reshape(-1))
        blobs[name] = blob
    for sname in scale_names:
        del blobs[sname]

    gd = doc["graph"]
    layers = []
    for ld in gd["layers"]:
        w = blobs.get(ld["weight"]) if ld["weight"] is not None else None
        w_scale = w.scales if isinstance(w, BitplaneTensor) else None
        layers.append(
            Layer(
                id=ld["id"],
                kind=ld["kind"],
                params=dict(ld["params"]),
                precision=Precision.parse(ld["precision"]),
                weight=ld["weight"],
                bias=ld["bias"],
                other=ld["other"],
                a_quant=_quant_from_dict(ld["a_quant"]),
                w_quant=_quant_from_dict(ld["w_quant"], w_scale),
            )
        )
    plan = None
    if doc.get("precision_plan") is not None:
        plan = PrecisionPlan.from_dict(doc["precision_plan"])
    g = GraphSpec(tuple(gd["input_shape"]), layers, plan)

    violations = validate_graph(g, blobs)
    topo = [v for v in violations if v.category == "topology"]
    if topo:
        raise TopologyError("; ".join(str(v) for v in topo))
    if violations:
        raise InvalidGraphError(violations)
    unused = set(blobs) - set(_referenced_blobs(g))
    if unused:
        raise HeaderError(f"unreferenced blobs {sorted(unused)}")
    return g, blobs


def write_model(path, g: GraphSpec, blobs: dict) -> int:
    data = save_model(g, blobs)
    Path(path).write_bytes(data)
    return len(data)


def read_model(path) -> tuple[GraphSpec, dict]:
    return load_model(Path(path).read_bytes())


def blob_table(buf: bytes) -> list[dict]:
    """The blob table of a container (validates the whole file first)."""
    load_model(buf)
    _, _, hlen = PREFIX.unpack_from(buf)
    return json.loads(buf[PREFIX.size : PREFIX.size + hlen])["blobs"]


def blob_bytes(blobs: dict) -> int:
    """Payload bytes of weights, biases and scales, excluding header and padding."""
    total = 0
    for blob in blobs.values():
        if isinstance(blob, BitplaneTensor):
            total += blob.nbytes + 4 * blob.rows
        else:
            total += np.asarray(blob).size * 4
    return total
