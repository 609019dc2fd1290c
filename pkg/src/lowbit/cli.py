"""Command line front end: quantize, run, verify, bench, inspect."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import runtime
from .bitpack import BitplaneTensor
from .container import (
    PREFIX,
    ContainerError,
    InvalidGraphError,
    TopologyError,
    blob_bytes,
    blob_table,
    read_model,
    save_model,
)
from .errors import ConfigError, LowbitError, ValidationError
from .graph import GraphSpec, Precision
from .netdesc import NetParseError, load_net
from .planner import plan_mixed_precision, quantize_graph
from .simulate import simulate
from .tensor import Uniform, tensor_create

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_TOLERANCE = 4
EXIT_IO = 5
EXIT_DECODE = 6

VERIFY_RTOL = 1e-3
VERIFY_ATOL = 1e-5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def seeded_input(shape, seed: int) -> np.ndarray:
    return tensor_create(shape, fill=Uniform(-1.0, 1.0, seed)).data


def _load_array(path: str, shape) -> np.ndarray:
    try:
        arr = np.load(path).astype(np.float32)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read {path}: {e}") from None
    if tuple(arr.shape) != tuple(shape):
        raise CliError(EXIT_VALIDATION, f"{path}: shape {arr.shape} does not match graph input {tuple(shape)}")
    return arr


def _input(args, shape) -> np.ndarray:
    if getattr(args, "input", None):
        return _load_array(args.input, shape)
    return seeded_input(shape, args.seed)


def _read(path: str) -> tuple[GraphSpec, dict]:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_IO, f"no such model file: {path}")
    try:
        return read_model(p)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read {path}: {e}") from None
    except (TopologyError, InvalidGraphError) as e:
        raise CliError(EXIT_VALIDATION, f"{path}: {type(e).__name__}: {e}") from None
    except ContainerError as e:
        raise CliError(EXIT_DECODE, f"{path}: {type(e).__name__}: {e}") from None


def _write(path: str, data: bytes):
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write {path}: {e}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_quantize(args) -> int:
    path = Path(args.net)
    if not path.is_file():
        raise CliError(EXIT_IO, f"no such network description: {args.net}")
    try:
        prec = Precision.parse(args.bits)
    except ConfigError as e:
        raise CliError(EXIT_PARSE, str(e)) from None
    g, blobs = load_net(path)
    calib = _load_array(args.calib, g.input_shape) if args.calib else seeded_input(g.input_shape, args.seed)
    plan = plan_mixed_precision(g, blobs, calib, args.keep_fraction, prec, workers=args.workers)
    qg, qblobs = quantize_graph(g, blobs, plan, calib)
    data = save_model(qg, qblobs)
    _write(args.out, data)

    print(f"{'layer':<12} {'kind':<10} {'precision':<10} {'sensitivity':>12} {'bytes':>10}")
    for layer in qg.layers:
        sens = plan.sensitivity.get(layer.id)
        nbytes = 0
        for name in (layer.weight, layer.bias):
            if name is not None:
                b = qblobs[name]
                nbytes += b.nbytes + 4 * b.rows if isinstance(b, BitplaneTensor) else b.nbytes
        s = f"{sens:.6g}" if sens is not None else "-"
        print(f"{layer.id:<12} {layer.kind:<10} {str(layer.precision):<10} {s:>12} {nbytes:>10}")
    fp32_bytes, q_bytes = blob_bytes(blobs), blob_bytes(qblobs)
    ratio = fp32_bytes / q_bytes if q_bytes else 1.0
    print(f"weights: fp32 {fp32_bytes} B -> container {q_bytes} B, compression {ratio:.2f}x")
    print(f"wrote {args.out} ({len(data)} bytes)")
    return EXIT_OK


def cmd_run(args) -> int:
    g, blobs = _read(args.model)
    x = _input(args, g.input_shape)
    plan = runtime.compile(g, blobs, args.workers)
    out = runtime.run(plan, x).data
    try:
        with open(args.out, "wb") as f:
            np.save(f, out)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write {args.out}: {e}") from None
    print(f"output {tuple(out.shape)} written to {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    g, blobs = _read(args.model)
    plan = runtime.compile(g, blobs, args.workers)
    max_rel = max_abs = 0.0
    worst = (0.0, None)  # (err / allowed, (trial, index, got, want))
    for t in range(args.trials):
        x = seeded_input(g.input_shape, args.seed + t)
        got = runtime.run(plan, x).data.astype(np.float64)
        want = simulate(g, blobs, x).data.astype(np.float64)
        err = np.abs(got - want)
        nz = want != 0
        if nz.any():
            max_rel = max(max_rel, float((err[nz] / np.abs(want[nz])).max()))
        max_abs = max(max_abs, float(err.max()))
        ratio = err / (VERIFY_ATOL + VERIFY_RTOL * np.abs(want))
        i = int(np.argmax(ratio))
        if ratio.flat[i] > worst[0]:
            idx = tuple(int(v) for v in np.unravel_index(i, got.shape))
            worst = (float(ratio.flat[i]), (t, idx, got.flat[i], want.flat[i]))
    print(f"trials: {args.trials}  max relative error: {max_rel:.3e}  max absolute error: {max_abs:.3e}")
    if worst[0] > 1.0:
        t, idx, a, b = worst[1]
        raise CliError(EXIT_TOLERANCE, f"tolerance exceeded; worst case trial {t}, output index {idx}: runtime {a!r} vs reference {b!r}")
    print("verify: PASS")
    return EXIT_OK


def cmd_bench(args) -> int:
    g, blobs = _read(args.model)
    plan = runtime.compile(g, blobs, args.workers)
    x = seeded_input(g.input_shape, args.seed)
    stats = runtime.benchmark(plan, x, warmup=args.warmup, iters=args.iters)
    report = {"model": str(args.model), "file_bytes": Path(args.model).stat().st_size, "warmup": args.warmup, **stats.to_dict()}
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.report:
        _write(args.report, (text + "\n").encode())
    return EXIT_OK


def inspect_text(path: str, g: GraphSpec, blobs: dict) -> str:
    data = Path(path).read_bytes()
    _, version, hlen = PREFIX.unpack_from(data)
    lines = [
        f"container: DLBR version {version}",
        f"file bytes: {len(data)}  header bytes: {hlen}",
        f"input shape: {list(g.input_shape)}",
        "",
        "layers:",
        f"  {'id':<10} {'kind':<10} {'precision':<10} {'a_scale':<22} params",
    ]
    for layer in g.layers:
        params = " ".join(f"{k}={'x'.join(map(str, v)) if isinstance(v, tuple) else v}" for k, v in sorted(layer.params.items()))
        if layer.other:
            params = f"other={layer.other} {params}".strip()
        a_scale = repr(layer.a_quant.scale) if layer.a_quant is not None else "-"
        lines.append(f"  {layer.id:<10} {layer.kind:<10} {str(layer.precision):<10} {a_scale:<22} {params}".rstrip())
    lines += ["", "blobs:", f"  {'name':<16} {'encoding':<16} {'offset':>8} {'bytes':>8}  detail"]
    for e in blob_table(data):
        detail = f"bits={e['bits']} rows={e['rows']} k={e['k']} zero_point={e['zero_point']}" if "bits" in e else f"shape={e['shape']}"
        lines.append(f"  {e['name']:<16} {e['encoding']:<16} {e['offset']:>8} {e['length']:>8}  {detail}")
    lines += ["", "precision plan:"]
    if g.precision_plan is None:
        lines.append("  (none)")
    else:
        plan = g.precision_plan
        order = [l.id for l in g.layers if l.id in plan.assignment]
        order += sorted(set(plan.assignment) - set(order))
        for lid in order:
            sens = plan.sensitivity.get(lid)
            s = f" sensitivity={sens!r}" if sens is not None else ""
            lines.append(f"  {lid:<10} {str(plan.assignment[lid]):<6}{s}".rstrip())
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> int:
    g, blobs = _read(args.model)
    sys.stdout.write(inspect_text(args.model, g, blobs))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lowbit", description="Ultra-low-bit quantization and bitserial inference.")
    sub = ap.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="quantize a network description into a .dlbr container")
    q.add_argument("net")
    q.add_argument("--bits", default="2A/2W", help="precision, e.g. 2A/2W, 1A/2W or 32A/32W")
    q.add_argument("--keep-fraction", type=float, default=0.0, help="fraction of conv/dense layers kept FP32")
    q.add_argument("--calib", help=".npy calibration batch (default: seeded random)")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--workers", type=int, default=1)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_quantize)

    r = sub.add_parser("run", help="run a container on one input")
    r.add_argument("model")
    r.add_argument("--input", help=".npy input (default: seeded random)")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="compare the runtime against the reference simulation")
    v.add_argument("model")
    v.add_argument("--trials", type=int, default=50)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--workers", type=int, default=1)
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="measure latency")
    b.add_argument("model")
    b.add_argument("--iters", type=int, default=10)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--report", help="also write the JSON report here")
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("inspect", help="print header, layers, blobs and precision plan")
    i.add_argument("model")
    i.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "workers", 1) < 1:
            raise CliError(EXIT_PARSE, "--workers must be >= 1")
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except NetParseError as e:
        print(f"error: {args.net}: {e}", file=sys.stderr)
        return EXIT_PARSE
    except (ValidationError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except LowbitError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
