"""Command-line entry point: ``bevcomm run | codec | inspect | report``.

Exit status: 0 on success, 1 for configuration problems (bad flags, bad
config values, missing frame), 2 for runtime or I/O failures.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from . import codec
from .config import ConfigError, load_config
from .errors import ConfigurationError
from .grid import FeatureTensor
from .pipeline import FrameResult, run_frames, thread_count
from .report import ComparisonError, RunReport, ReportError, aggregate, compare_runs, format_deltas, frames_csv, vehicles_csv

log = logging.getLogger("bevcomm")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage mistakes count as configuration errors
        raise UsageError(f"{self.prog}: {message}")


def write_atomic(path: Path, data: bytes | str) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def payload_name(frame_id: int, vehicle_id: int) -> str:
    return f"frame{frame_id:06d}_vehicle{vehicle_id:02d}.efcm"


def _trace_record(result: FrameResult) -> dict:
    m = result.metrics
    gates = result.fused.gates
    record = {
        "frame_id": m.frame_id,
        "tau": m.tau,
        "stages": list(m.stages),
        "payload_bytes": m.payload_bytes,
        "comm_log2": m.comm_log2,
        "gate_mean": list(m.gate_mean),
        "gate_records": len(gates),
        "vehicles": [
            {
                "vehicle_id": r.vehicle_id,
                "role": r.role.value,
                "st_rate": r.st_rate,
                "tau": r.decision.tau,
                "alpha": r.decision.alpha,
                "k_raw": r.decision.k_raw,
                "k_clamped": r.decision.k_clamped,
                "K_v": r.decision.cells,
                "payload_bytes": r.payload_bytes,
                "transmitted_cells": r.transmitted_cells,
            }
            for r in m.vehicles
        ],
    }
    if len(gates) == 1:
        record["gate_logits"] = [float(x) for x in gates[0].logits]
    return record


# ---------------------------------------------------------------- run


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    overrides = {}
    if args.frames is not None:
        overrides["run.frames"] = args.frames
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    try:
        threads = thread_count()
    except ValueError as exc:
        raise ConfigError("EFFICOMM_THREADS", str(exc)) from None

    agr_w = cfg.agr_weights()
    moe_w = cfg.moe_weights()
    fingerprint = cfg.fingerprint()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    metrics = []
    trace_lines = []
    for result in run_frames(cfg.scenario(), range(cfg.frames), agr_w, moe_w, cfg.pipeline(), threads):
        metrics.append(result.metrics)
        if args.trace:
            trace_lines.append(json.dumps(_trace_record(result), sort_keys=True))
        if args.dump_payloads:
            for vid, payload in sorted(result.payloads.items()):
                write_atomic(out / "payloads" / payload_name(result.metrics.frame_id, vid), payload)
        log.debug("frame %d done", result.metrics.frame_id)

    report = aggregate(metrics, cfg.grid, fingerprint)
    write_atomic(out / "config.ini", cfg.to_ini())
    write_atomic(out / "frames.csv", frames_csv(metrics))
    write_atomic(out / "vehicles.csv", vehicles_csv(metrics, cfg.grid))
    write_atomic(out / "report.json", report.to_json())
    if args.trace:
        write_atomic(out / "trace.jsonl", "".join(line + "\n" for line in trace_lines))

    bw = report.bandwidth
    print(
        f"{report.frames} frames  bandwidth {bw.mean:.4f} MB/frame (std {bw.std:.4f})  "
        f"L_bw {report.l_bw_mean:.4f}  comm_log2 {report.comm_log2_mean:.3f}  recall {report.recall_mean:.3f}"
    )
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- codec


def read_dense(path: Path) -> FeatureTensor:
    """Dense dump: ``.npy`` holding an ``L x H x W`` array, or JSON ``{"values": [[[...]]]}``."""
    if path.suffix == ".npy":
        arr = np.load(path, allow_pickle=False)
    else:
        doc = json.loads(path.read_text())
        arr = np.asarray(doc["values"] if isinstance(doc, dict) else doc, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"{path}: dense dump must be 3-D (L, H, W), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: dense dump holds non-finite values")
    return FeatureTensor(arr.astype(np.float64))


def write_dense(path: Path, ft: FeatureTensor) -> None:
    if path.suffix == ".npy":
        buf = io.BytesIO()
        np.save(buf, np.ascontiguousarray(ft.values), allow_pickle=False)
        write_atomic(path, buf.getvalue())
    else:
        c, h, w = ft.values.shape
        doc = {"channels": c, "height": h, "width": w, "values": ft.values.tolist()}
        write_atomic(path, json.dumps(doc) + "\n")


def cmd_codec(args) -> int:
    src, dst = Path(args.input), Path(args.output)
    if args.action == "encode":
        payload = codec.encode_sparse(read_dense(src), scale=args.scale)
        write_atomic(dst, payload)
        print(f"encoded {len(payload)} bytes")
    else:
        ft, meta = codec.decode_sparse(src.read_bytes())
        write_dense(dst, ft)
        print(f"decoded {meta.count} cells into {meta.channels}x{meta.height}x{meta.width}")
    return EXIT_OK


# ---------------------------------------------------------------- inspect


def format_frame(record: dict) -> str:
    lines = [
        f"frame {record['frame_id']}  tau={record['tau']:.4f}  payload={record['payload_bytes']} bytes  "
        f"comm_log2={record['comm_log2']:.3f}",
        "gates: " + " ".join(f"{g:.3f}" for g in record["gate_mean"]),
    ]
    for v in record["vehicles"]:
        lines.append(
            f"vehicle {v['vehicle_id']:>2} ({v['role']:<6})  tau={v['tau']:.4f}  alpha={v['alpha']:.4f}  "
            f"k_raw={v['k_raw']:.4f}  k={v['k_clamped']:.4f}  K={v['K_v']:<6}  "
            f"transmitted: {v['payload_bytes']} bytes"
        )
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> int:
    trace = Path(args.run_dir) / "trace.jsonl"
    if not trace.exists():
        raise ConfigError("trace", f"{trace} not found; rerun with --trace")
    for line in trace.read_text().splitlines():
        record = json.loads(line)
        if record["frame_id"] == args.frame:
            sys.stdout.write(format_frame(record))
            return EXIT_OK
    raise ConfigError("frame", f"frame {args.frame} not in {trace}")


# ---------------------------------------------------------------- report


def _load_report(path: Path) -> RunReport:
    if path.is_dir():
        path = path / "report.json"
    return RunReport.from_json(path.read_text())


def cmd_report(args) -> int:
    deltas = compare_runs(_load_report(Path(args.a)), _load_report(Path(args.b)))
    sys.stdout.write(format_deltas(deltas))
    return EXIT_OK


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bevcomm", description="Bandwidth-aware cooperative BEV feature sharing simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="simulate frames and write CSV/JSON reports")
    run.add_argument("config", nargs="?", help="INI config (defaults when omitted)")
    run.add_argument("--frames", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--trace", action="store_true", help="write trace.jsonl for inspect")
    run.add_argument("--dump-payloads", action="store_true", help="write every remote payload under payloads/")
    run.set_defaults(func=cmd_run)

    cod = sub.add_parser("codec", help="convert between dense dumps and sparse payloads")
    cod.add_argument("action", choices=("encode", "decode"))
    cod.add_argument("input")
    cod.add_argument("output")
    cod.add_argument("--scale", type=int, default=0, help="scale index stored in the header (encode)")
    cod.set_defaults(func=cmd_codec)

    ins = sub.add_parser("inspect", help="print one frame's decisions from a traced run")
    ins.add_argument("run_dir")
    ins.add_argument("--frame", type=int, required=True)
    ins.set_defaults(func=cmd_inspect)

    rep = sub.add_parser("report", help="report utilities")
    rep_sub = rep.add_subparsers(dest="report_command", required=True, parser_class=_Parser)
    cmp_ = rep_sub.add_parser("compare", help="metric deltas between two runs (b relative to a)")
    cmp_.add_argument("a", help="run directory or report.json")
    cmp_.add_argument("b", help="run directory or report.json")
    cmp_.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except codec.DecodeError as exc:
        print(f"decode error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ComparisonError, ReportError) as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
