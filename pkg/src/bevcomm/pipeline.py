"""End-to-end frame processing: selective transmission, grid reduction, fusion, metrics."""

from __future__ import annotations

import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

from . import codec
from .agr import DEFAULT_BASES, DEFAULT_CLAMP, AgrWeights, KeepRatioDecision, agr_pipeline
from .grid import FeatureTensor, Frame, VehicleRole, validate_frame
from .moe import FusedMap, MoeWeights, downsample, gating_entropy, multiscale_fuse
from .selective import StConfig, apply_st, frame_rate
from .sim import ScenarioConfig, bandwidth_loss, gen_frame, proxy_recall

THREADS_ENV = "EFFICOMM_THREADS"

STAGES = ("selective_transmission", "mask_multiply", "grid_reduction", "group_by_vehicle", "fusion", "metrics")


class PipelineError(RuntimeError):
    def __init__(self, frame_id: int, cause: Exception):
        super().__init__(f"frame {frame_id}: {cause}")
        self.frame_id = frame_id


@dataclass(frozen=True)
class PipelineConfig:
    st: StConfig = field(default_factory=StConfig)
    bases: tuple[float, float] = DEFAULT_BASES
    clamp: tuple[float, float] = DEFAULT_CLAMP
    gating: str = "frame"
    scales: int = 1
    recall_threshold: float = 0.5
    lambda_bandwidth: float = 0.05
    mu_entropy: float = 1e-4
    comm_times_bytes: bool = False
    congestion_override: float | None = None


@dataclass(frozen=True)
class VehicleRecord:
    vehicle_id: int
    role: VehicleRole
    st_rate: float
    decision: KeepRatioDecision
    payload_bytes: int
    transmitted_cells: int
    nonzero_elements: int


@dataclass(frozen=True)
class FrameMetrics:
    frame_id: int
    vehicles: tuple[VehicleRecord, ...]
    tau: float
    payload_bytes: int
    comm_log2: float
    recall: float
    gate_mean: tuple[float, ...]
    gating_entropy: float
    utilization: tuple[float, ...]
    l_bw: float
    l_reg: float
    l_partial: float
    remote_cell_fraction: float
    stages: tuple[str, ...] = STAGES


@dataclass(frozen=True, eq=False)
class FrameResult:
    metrics: FrameMetrics
    payloads: dict[int, bytes]
    fused: FusedMap
    reduced: tuple[FeatureTensor, ...]


def run_frame(frame: Frame, agr_weights: AgrWeights, moe_weights: Sequence[MoeWeights], cfg: PipelineConfig) -> FrameResult:
    try:
        return _run_frame(frame, agr_weights, moe_weights, cfg)
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(frame.frame_id, exc) from exc


def _run_frame(frame, agr_weights, moe_weights, cfg):
    problems = validate_frame(frame)
    if problems:
        raise ValueError("; ".join(f"{p.kind}: {p.message}" for p in problems))
    stages = []

    st = [apply_st(v, cfg.st, frame.frame_id) for v in frame.vehicles]
    stages.append("selective_transmission")
    masked = [r.features for r in st]
    stages.append("mask_multiply")
    tau = frame_rate(st, frame.vehicles) if cfg.congestion_override is None else cfg.congestion_override

    reduced, decisions = agr_pipeline(frame, masked, tau, agr_weights, cfg.bases, cfg.clamp)
    stages.append("grid_reduction")

    maps = [(v.vehicle_id, v.role, r) for v, r in zip(frame.vehicles, reduced)]
    per_scale = [maps]
    if cfg.scales == 2:
        per_scale.append([(vid, role, downsample(r, 2)) for vid, role, r in maps])
    stages.append("group_by_vehicle")

    fused = multiscale_fuse(per_scale, moe_weights, cfg.gating)
    stages.append("fusion")

    remotes = [(v, r) for v, r in zip(frame.vehicles, reduced) if not v.is_ego]
    payloads = {v.vehicle_id: codec.encode_sparse(r) for v, r in remotes}
    remote_maps = [r for _, r in remotes]
    shape = frame.shape
    transmitted = {v.vehicle_id: int(r.support().sum()) for v, r in remotes}
    nonzero = {v.vehicle_id: r.nonzero_count() for v, r in remotes}

    records = tuple(
        VehicleRecord(
            v.vehicle_id,
            v.role,
            s.rate,
            d,
            len(payloads.get(v.vehicle_id, b"")),
            transmitted.get(v.vehicle_id, 0),
            nonzero.get(v.vehicle_id, 0),
        )
        for v, s, d in zip(frame.vehicles, st, decisions)
    )
    l_bw = bandwidth_loss(remote_maps)
    entropy = gating_entropy(fused.gates)
    l_reg = -entropy
    cell_fraction = sum(transmitted.values()) / (len(remotes) * shape.cells) if remotes else 0.0
    stages.append("metrics")

    metrics = FrameMetrics(
        frame_id=frame.frame_id,
        vehicles=records,
        tau=float(tau),
        payload_bytes=sum(len(p) for p in payloads.values()),
        comm_log2=codec.comm_log2(remote_maps, cfg.comm_times_bytes),
        recall=proxy_recall(fused.features, frame.truth, cfg.recall_threshold),
        gate_mean=tuple(float(g) for g in fused.mean_gate()),
        gating_entropy=entropy,
        utilization=tuple(float(u) for u in fused.utilization),
        l_bw=l_bw,
        l_reg=l_reg,
        l_partial=cfg.lambda_bandwidth * l_bw + cfg.mu_entropy * l_reg,
        remote_cell_fraction=cell_fraction,
        stages=tuple(stages),
    )
    return FrameResult(metrics, payloads, fused, tuple(reduced))


def thread_count(default: int | None = None) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return default or 1
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ValueError(f"{THREADS_ENV} must be >= 1, got {value}")
    return value


def run_frames(
    scenario: ScenarioConfig,
    frame_ids: Sequence[int],
    agr_weights: AgrWeights,
    moe_weights: Sequence[MoeWeights],
    cfg: PipelineConfig,
    threads: int = 1,
) -> Iterator[FrameResult]:
    """Generate and process frames; results arrive in ``frame_ids`` order whatever the thread count."""

    def work(frame_id: int) -> FrameResult:
        return run_frame(gen_frame(scenario, frame_id), agr_weights, moe_weights, cfg)

    if threads <= 1:
        yield from map(work, frame_ids)
        return
    # a bounded window keeps at most a few finished frames waiting in memory
    window = 2 * threads
    with ThreadPoolExecutor(max_workers=threads) as pool:
        pending: deque = deque()
        for frame_id in frame_ids:
            pending.append(pool.submit(work, frame_id))
            if len(pending) >= window:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()
