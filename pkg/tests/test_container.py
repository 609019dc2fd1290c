import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowbit import ValidationError, parse_net
from lowbit.bitpack import BitplaneTensor
from lowbit.container import (
    PREFIX,
    BadMagicError,
    ChecksumError,
    ContainerError,
    HeaderError,
    OverlappingBlobsError,
    TopologyError,
    TruncatedError,
    UnsupportedVersionError,
    blob_bytes,
    load_model,
    save_model,
)
from lowbit.graph import GraphSpec

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="module")
def golden() -> bytes:
    return (GOLDEN / "golden.dlbr").read_bytes()


def blobs_equal(a: dict, b: dict) -> bool:
    if set(a) != set(b):
        return False
    for k in a:
        x, y = a[k], b[k]
        if isinstance(x, BitplaneTensor):
            if not (x == y and np.array_equal(x.scales, y.scales)):
                return False
        elif not (isinstance(y, np.ndarray) and x.dtype == y.dtype and np.array_equal(x, y)):
            return False
    return True


def with_header(buf: bytes, edit) -> bytes:
    """Apply ``edit`` to the decoded header and splice it back in front of the blobs."""
    _, version, hlen = PREFIX.unpack_from(buf)
    doc = json.loads(buf[PREFIX.size : PREFIX.size + hlen])
    start = min(e["offset"] for e in doc["blobs"])
    edit(doc)
    header = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    head = PREFIX.pack(b"DLBR", version, len(header)) + header
    assert len(head) <= start
    return head + b"\0" * (start - len(head)) + buf[start:]


def test_roundtrip_fp32(toy_fp32):
    g, blobs = toy_fp32
    data = save_model(g, blobs)
    g2, b2 = load_model(data)
    assert g2 == g
    assert blobs_equal(b2, blobs)
    assert save_model(g2, b2) == data


def test_roundtrip_quantized(toy_2a2w):
    g, blobs = toy_2a2w
    data = save_model(g, blobs)
    g2, b2 = load_model(data)
    assert g2 == g and g2.precision_plan == g.precision_plan
    assert blobs_equal(b2, blobs)
    assert save_model(g2, b2) == data


def test_layout(toy_2a2w):
    data = save_model(*toy_2a2w)
    magic, version, hlen = PREFIX.unpack_from(data)
    assert (magic, version) == (b"DLBR", 1)
    table = json.loads(data[12 : 12 + hlen])["blobs"]
    assert all(e["offset"] % 64 == 0 for e in table)
    assert max(e["offset"] + e["length"] for e in table) == len(data)


def test_golden_bytes_are_reproducible(golden):
    from lowbit.cli import seeded_input
    from lowbit import Precision, plan_mixed_precision, quantize_graph

    g, blobs = parse_net((GOLDEN / "golden.net").read_text())
    calib = seeded_input(g.input_shape, 0)
    plan = plan_mixed_precision(g, blobs, calib, 0.34, Precision(2, 2))
    assert save_model(*quantize_graph(g, blobs, plan, calib)) == golden


def test_empty_graph_rejected():
    with pytest.raises(ValidationError):
        save_model(GraphSpec((1, 4), []), {})


def test_unreferenced_blobs_dropped(toy_fp32):
    g, blobs = toy_fp32
    data = save_model(g, {**blobs, "stray": np.zeros(3, np.float32)})
    assert "stray" not in load_model(data)[1]


def test_bad_magic(golden):
    with pytest.raises(BadMagicError):
        load_model(b"XLBR" + golden[4:])
    with pytest.raises(BadMagicError):
        load_model(b"PK")


def test_bad_version(golden):
    with pytest.raises(UnsupportedVersionError):
        load_model(golden[:4] + (2).to_bytes(4, "little") + golden[8:])


def test_truncation_at_every_offset(golden):
    for n in range(len(golden)):
        with pytest.raises(ContainerError):
            load_model(golden[:n])
    with pytest.raises(TruncatedError):
        load_model(golden[:-1])


def test_trailing_bytes(golden):
    with pytest.raises(HeaderError):
        load_model(golden + b"\0")


def test_checksum(golden):
    buf = bytearray(golden)
    buf[-1] ^= 0x01
    with pytest.raises(ChecksumError):
        load_model(bytes(buf))


def test_overlap(golden):
    def edit(doc):
        doc["blobs"][1]["offset"] = doc["blobs"][0]["offset"]

    with pytest.raises(OverlappingBlobsError):
        load_model(with_header(golden, edit))


def test_topology_error(golden):
    def edit(doc):
        doc["graph"]["layers"][4]["other"] = "fc"

    with pytest.raises(TopologyError):
        load_model(with_header(golden, edit))


@pytest.mark.parametrize(
    "edit",
    [
        lambda d: d["blobs"].pop(),
        lambda d: d["blobs"][2].update(encoding="int4"),
        lambda d: d["blobs"][0].update(shape=[3]),
        lambda d: d["graph"].pop("layers"),
        lambda d: d["graph"]["layers"][2].update(precision="9A/9W"),
    ],
)
def test_malformed_headers(golden, edit):
    with pytest.raises(ContainerError):
        load_model(with_header(golden, edit))


def test_header_not_json(golden):
    _, _, hlen = PREFIX.unpack_from(golden)
    buf = bytearray(golden)
    buf[12] = ord("[")
    buf[13] = 0xFF
    with pytest.raises(HeaderError):
        load_model(bytes(buf))


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=300))
def test_random_bytes_never_crash(data):
    with pytest.raises(ContainerError):
        load_model(data)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2951), st.integers(1, 255))
def test_byte_flips_fail_cleanly(golden, pos, xor):
    buf = bytearray(golden)
    buf[pos] ^= xor
    try:
        load_model(bytes(buf))
    except ContainerError:
        pass


def test_compression_bytes():
    g, blobs = parse_net("input 1 256 3 3\nconv2d c out=256 kernel=3 pad=1 bias=false\n")
    from lowbit.cli import seeded_input
    from lowbit import Precision, plan_mixed_precision, quantize_graph

    calib = seeded_input(g.input_shape, 0)
    qg, qb = quantize_graph(g, blobs, plan_mixed_precision(g, blobs, calib, 0.0, Precision(2, 2)), calib)
    assert blob_bytes(blobs) == 2_359_296
    assert qb["c.weight"].nbytes == 147_456
    assert blob_bytes(qb) == 147_456 + 1_024
