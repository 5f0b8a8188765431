"""Run-level aggregation, CSV/JSON persistence and run comparison.

Every statistic is an order-free function of the frames: sums go through
``math.fsum`` (exactly rounded) and histograms are counts, so shuffling the
frames never changes a report.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .agr import KeepRatioDecision
from .codec import BandwidthStats, bandwidth_stats
from .grid import GridShape, VehicleRole
from .pipeline import FrameMetrics, VehicleRecord

HISTOGRAM_BINS = 50
HISTOGRAM_EDGES = tuple(i / HISTOGRAM_BINS for i in range(HISTOGRAM_BINS + 1))

VEHICLE_COLUMNS = (
    "frame_id",
    "vehicle_id",
    "role",
    "tau",
    "alpha",
    "k_raw",
    "k_clamped",
    "K_v",
    "payload_bytes",
    "comm_log2",
    "recall",
    "l_bw",
    "l_reg",
    "st_rate",
    "transmitted_cells",
    "nonzero_elements",
)

FRAME_COLUMNS = (
    "frame_id",
    "tau",
    "payload_bytes",
    "comm_log2",
    "recall",
    "gating_entropy",
    "l_bw",
    "l_reg",
    "l_partial",
    "remote_cell_fraction",
)


class ReportError(ValueError):
    pass


class ComparisonError(ValueError):
    pass


@dataclass(frozen=True)
class KeepRatioHistogram:
    edges: tuple[float, ...]
    counts: tuple[int, ...]
    mean: float

    @property
    def total(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True)
class RunReport:
    frames: int
    grid: tuple[int, int, int]
    bandwidth: BandwidthStats
    comm_log2_mean: float
    keep_ratio: KeepRatioHistogram
    keep_ratio_remote_mean: float
    expert_utilization: tuple[float, ...]
    gate_mean: tuple[float, ...]
    gating_entropy_mean: float
    recall_mean: float
    l_bw_mean: float
    l_partial_mean: float
    fingerprint: str

    def to_dict(self) -> dict:
        out = asdict(self)
        out["grid"] = list(self.grid)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> RunReport:
        try:
            hist = d["keep_ratio"]
            return cls(
                frames=int(d["frames"]),
                grid=tuple(int(x) for x in d["grid"]),
                bandwidth=BandwidthStats(**{k: float(v) for k, v in d["bandwidth"].items()}),
                comm_log2_mean=float(d["comm_log2_mean"]),
                keep_ratio=KeepRatioHistogram(
                    tuple(float(x) for x in hist["edges"]),
                    tuple(int(x) for x in hist["counts"]),
                    float(hist["mean"]),
                ),
                keep_ratio_remote_mean=float(d["keep_ratio_remote_mean"]),
                expert_utilization=tuple(float(x) for x in d["expert_utilization"]),
                gate_mean=tuple(float(x) for x in d["gate_mean"]),
                gating_entropy_mean=float(d["gating_entropy_mean"]),
                recall_mean=float(d["recall_mean"]),
                l_bw_mean=float(d["l_bw_mean"]),
                l_partial_mean=float(d["l_partial_mean"]),
                fingerprint=str(d["fingerprint"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ReportError(f"malformed report: {exc!r}") from exc

    @classmethod
    def from_json(cls, text: str) -> RunReport:
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ReportError(f"report is not valid JSON: {exc}") from exc


def _mean(values: Iterable[float]) -> float:
    values = list(values)
    return math.fsum(values) / len(values) if values else 0.0


def _vector_mean(rows: Sequence[Sequence[float]]) -> tuple[float, ...]:
    if not rows:
        return ()
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ReportError("frames disagree on expert count")
    return tuple(math.fsum(r[i] for r in rows) / len(rows) for i in range(width))


def keep_ratio_histogram(ratios: Sequence[float]) -> KeepRatioHistogram:
    """Counts over 50 bins of width 0.02 on [0, 1]; the last bin is closed."""
    counts, _ = np.histogram(np.asarray(ratios, dtype=np.float64), bins=np.asarray(HISTOGRAM_EDGES))
    return KeepRatioHistogram(HISTOGRAM_EDGES, tuple(int(c) for c in counts), _mean(ratios))


def aggregate(frames: Sequence[FrameMetrics], grid: GridShape | Sequence[int], fingerprint: str = "") -> RunReport:
    if not frames:
        raise ReportError("cannot aggregate an empty run")
    shape = grid.as_tuple() if isinstance(grid, GridShape) else tuple(int(x) for x in grid)
    decisions = [r.decision for f in frames for r in f.vehicles]
    remote = [d.k_clamped for d in decisions if d.role is VehicleRole.REMOTE]
    return RunReport(
        frames=len(frames),
        grid=shape,
        bandwidth=bandwidth_stats([f.payload_bytes for f in frames]),
        comm_log2_mean=_mean(f.comm_log2 for f in frames),
        keep_ratio=keep_ratio_histogram([d.k_clamped for d in decisions]),
        keep_ratio_remote_mean=_mean(remote),
        expert_utilization=_vector_mean([f.utilization for f in frames]),
        gate_mean=_vector_mean([f.gate_mean for f in frames]),
        gating_entropy_mean=_mean(f.gating_entropy for f in frames),
        recall_mean=_mean(f.recall for f in frames),
        l_bw_mean=_mean(f.l_bw for f in frames),
        l_partial_mean=_mean(f.l_partial for f in frames),
        fingerprint=fingerprint,
    )


# ---------------------------------------------------------------- CSV


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _vehicle_row(frame: FrameMetrics, rec: VehicleRecord, elements: int) -> list[str]:
    d = rec.decision
    comm = math.log2(rec.nonzero_elements) if rec.nonzero_elements else 0.0
    return [
        _fmt(v)
        for v in (
            frame.frame_id,
            rec.vehicle_id,
            rec.role.value,
            d.tau,
            d.alpha,
            d.k_raw,
            d.k_clamped,
            d.cells,
            rec.payload_bytes,
            comm,
            frame.recall,
            rec.nonzero_elements / elements,
            frame.l_reg,
            rec.st_rate,
            rec.transmitted_cells,
            rec.nonzero_elements,
        )
    ]


def frame_columns(experts: int) -> tuple[str, ...]:
    return FRAME_COLUMNS + tuple(f"gate_{i}" for i in range(experts)) + tuple(f"utilization_{i}" for i in range(experts))


def vehicles_csv(frames: Sequence[FrameMetrics], grid: GridShape) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(VEHICLE_COLUMNS)
    for f in frames:
        for rec in f.vehicles:
            writer.writerow(_vehicle_row(f, rec, grid.size))
    return buf.getvalue()


def frames_csv(frames: Sequence[FrameMetrics]) -> str:
    experts = len(frames[0].gate_mean) if frames else 0
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(frame_columns(experts))
    for f in frames:
        row = [
            f.frame_id,
            f.tau,
            f.payload_bytes,
            f.comm_log2,
            f.recall,
            f.gating_entropy,
            f.l_bw,
            f.l_reg,
            f.l_partial,
            f.remote_cell_fraction,
            *f.gate_mean,
            *f.utilization,
        ]
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _parse_frames(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    if tuple(header[: len(FRAME_COLUMNS)]) != FRAME_COLUMNS:
        raise ReportError(f"frames CSV header {header[:len(FRAME_COLUMNS)]} != {list(FRAME_COLUMNS)}")
    return list(reader)


def parse_run_csv(frames_text: str, vehicles_text: str) -> list[FrameMetrics]:
    """Rebuild per-frame metrics from the two CSV files (floats are exact reprs)."""
    frame_rows = _parse_frames(frames_text)
    vreader = csv.DictReader(io.StringIO(vehicles_text))
    if tuple(vreader.fieldnames or ()) != VEHICLE_COLUMNS:
        raise ReportError(f"vehicles CSV header {vreader.fieldnames} != {list(VEHICLE_COLUMNS)}")
    by_frame: dict[int, list[VehicleRecord]] = {}
    try:
        for row in vreader:
            role = VehicleRole(row["role"])
            vid = int(row["vehicle_id"])
            decision = KeepRatioDecision(
                vehicle_id=vid,
                role=role,
                tau=float(row["tau"]),
                alpha=float(row["alpha"]),
                k_raw=float(row["k_raw"]),
                k_clamped=float(row["k_clamped"]),
                cells=int(row["K_v"]),
            )
            record = VehicleRecord(
                vehicle_id=vid,
                role=role,
                st_rate=float(row["st_rate"]),
                decision=decision,
                payload_bytes=int(row["payload_bytes"]),
                transmitted_cells=int(row["transmitted_cells"]),
                nonzero_elements=int(row["nonzero_elements"]),
            )
            by_frame.setdefault(int(row["frame_id"]), []).append(record)

        frames = []
        for row in frame_rows:
            fid = int(row["frame_id"])
            gates = sorted((k for k in row if k.startswith("gate_")), key=lambda k: int(k[5:]))
            utils = sorted((k for k in row if k.startswith("utilization_")), key=lambda k: int(k[12:]))
            frames.append(
                FrameMetrics(
                    frame_id=fid,
                    vehicles=tuple(by_frame.pop(fid, ())),
                    tau=float(row["tau"]),
                    payload_bytes=int(row["payload_bytes"]),
                    comm_log2=float(row["comm_log2"]),
                    recall=float(row["recall"]),
                    gate_mean=tuple(float(row[k]) for k in gates),
                    gating_entropy=float(row["gating_entropy"]),
                    utilization=tuple(float(row[k]) for k in utils),
                    l_bw=float(row["l_bw"]),
                    l_reg=float(row["l_reg"]),
                    l_partial=float(row["l_partial"]),
                    remote_cell_fraction=float(row["remote_cell_fraction"]),
                )
            )
    except (KeyError, ValueError) as exc:
        raise ReportError(f"malformed run CSV: {exc!r}") from exc
    if by_frame:
        raise ReportError(f"vehicle rows for unknown frames {sorted(by_frame)}")
    return frames


def load_run_csv(run_dir: str | Path) -> list[FrameMetrics]:
    run_dir = Path(run_dir)
    return parse_run_csv((run_dir / "frames.csv").read_text(), (run_dir / "vehicles.csv").read_text())


# ---------------------------------------------------------------- comparison


@dataclass(frozen=True)
class MetricDelta:
    name: str
    a: float
    b: float
    absolute: float
    relative: float | None  # (b - a) / |a|; None when a == 0


def _scalars(r: RunReport) -> list[tuple[str, float]]:
    out = [
        ("bandwidth_mean_mb", r.bandwidth.mean),
        ("bandwidth_std_mb", r.bandwidth.std),
        ("bandwidth_max_mb", r.bandwidth.max),
        ("bandwidth_min_mb", r.bandwidth.min),
        ("comm_log2_mean", r.comm_log2_mean),
        ("keep_ratio_mean", r.keep_ratio.mean),
        ("keep_ratio_remote_mean", r.keep_ratio_remote_mean),
        ("gating_entropy_mean", r.gating_entropy_mean),
        ("recall_mean", r.recall_mean),
        ("l_bw_mean", r.l_bw_mean),
        ("l_partial_mean", r.l_partial_mean),
    ]
    out += [(f"expert_utilization_{i}", u) for i, u in enumerate(r.expert_utilization)]
    return out


def delta(name: str, a: float, b: float) -> MetricDelta:
    return MetricDelta(name, a, b, b - a, (b - a) / abs(a) if a != 0 else None)


def compare_runs(a: RunReport, b: RunReport) -> list[MetricDelta]:
    if a.grid != b.grid:
        raise ComparisonError(f"grid shapes differ: {a.grid} vs {b.grid}")
    if a.frames != b.frames:
        raise ComparisonError(f"frame counts differ: {a.frames} vs {b.frames}")
    if len(a.expert_utilization) != len(b.expert_utilization):
        raise ComparisonError(
            f"expert counts differ: {len(a.expert_utilization)} vs {len(b.expert_utilization)}"
        )
    return [delta(name, x, y) for (name, x), (_, y) in zip(_scalars(a), _scalars(b))]


def format_deltas(deltas: Sequence[MetricDelta]) -> str:
    width = max(len(d.name) for d in deltas) if deltas else 0
    lines = [f"{'metric':<{width}}  {'a':>14}  {'b':>14}  {'abs':>14}  {'rel':>9}"]
    for d in deltas:
        rel = "n/a" if d.relative is None else f"{100 * d.relative:+.1f}%"
        lines.append(f"{d.name:<{width}}  {d.a:>14.6g}  {d.b:>14.6g}  {d.absolute:>+14.6g}  {rel:>9}")
    return "\n".join(lines) + "\n"
