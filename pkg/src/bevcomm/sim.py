"""Deterministic synthetic scenes and proxy scoring.

A frame places rectangular objects and ``N`` vehicles (vehicle 0 is the ego)
on the BEV grid.  Each vehicle senses the cells within its sensing radius that
are not shadowed by another object along the integer line of sight.  Visible
object cells get a peak objectness logit on the object's class channel, and
visible cells around them fade linearly with distance from the nearest visible
object cell; everything else sits at a floor logit.
Features are spatially smoothed noise scaled by the per-cell confidence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter

from .grid import readonly, ConfidenceMap, FeatureTensor, Frame, GridShape, GroundTruth, Vehicle, VehicleRole
from .layers import sigmoid
from .rng import stream

MAX_VEHICLES = 16


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    vehicles: int = 3
    objects: int = 24
    grid: GridShape = field(default_factory=GridShape)
    sensing_radius: float = 60.0
    occlusion: bool = True
    noise_scale: float = 0.5
    peak_logit: float = 6.0
    floor_logit: float = -8.0
    decay: float = 0.15
    object_height: tuple[int, int] = (3, 8)
    object_width: tuple[int, int] = (6, 20)
    smoothing: float = 1.0
    feature_bank: int = 8
    max_retries: int = 1000

    def __post_init__(self):
        if not 1 <= self.vehicles <= MAX_VEHICLES:
            raise ValueError(f"vehicles must lie in [1, {MAX_VEHICLES}], got {self.vehicles}")
        if self.objects < 0:
            raise ValueError(f"objects must be >= 0, got {self.objects}")
        for name, (lo, hi), limit in (
            ("object_height", self.object_height, self.grid.height),
            ("object_width", self.object_width, self.grid.width),
        ):
            if not 1 <= lo <= hi <= limit:
                raise ValueError(f"{name} range ({lo}, {hi}) must satisfy 1 <= lo <= hi <= {limit}")
        if self.sensing_radius <= 0:
            raise ValueError(f"sensing_radius must be positive, got {self.sensing_radius}")
        if self.noise_scale < 0:
            raise ValueError(f"noise_scale must be >= 0, got {self.noise_scale}")
        if self.feature_bank < 1:
            raise ValueError(f"feature_bank must be >= 1, got {self.feature_bank}")
        if self.max_retries < 1:
            raise ValueError(f"max_retries must be >= 1, got {self.max_retries}")


# below this walk length every intermediate of the rounding formula is an
# integer under 2**24 and the float32 quotient error stays far below 1/(2n)
_FLOAT32_WALK_LIMIT = 1024
_WALK_BUCKETS = (0, 8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384, 32768, 65536, 1 << 20)


def line_of_sight_points(origin: tuple[int, int], targets_r: np.ndarray, targets_c: np.ndarray):
    """Cells on the rounded straight walk from ``origin`` to each target.

    Step ``k`` of ``n = max(|dr|, |dc|)`` lands on
    ``origin + floor((2*k*d + n) / (2*n))`` per axis (round half up).  Steps
    past ``n`` are clamped to the target itself.  Returns ``(rows, cols)``
    shaped ``(targets, n_max - 1)`` covering steps ``1 .. n_max - 1``.
    """
    vr, vc = origin
    dr = np.asarray(targets_r, dtype=np.int64) - vr
    dc = np.asarray(targets_c, dtype=np.int64) - vc
    n = np.maximum(np.abs(dr), np.abs(dc))
    n_max = int(n.max()) if n.size else 0
    # float division is exact enough: operands are small integers, and a
    # non-integer quotient sits at least 1/(2n) away from the next integer
    ftype = np.float32 if n_max <= _FLOAT32_WALK_LIMIT else np.float64
    dr = dr.astype(ftype)[:, None]
    dc = dc.astype(ftype)[:, None]
    nf = n.astype(ftype)[:, None]
    k = np.minimum(np.arange(1, max(n_max, 1), dtype=ftype)[None, :], nf)
    twice_n = 2 * np.maximum(nf, 1)
    half = twice_n / 2
    rows = np.floor((2 * dr * k + half) / twice_n).astype(np.int64) + vr
    cols = np.floor((2 * dc * k + half) / twice_n).astype(np.int64) + vc
    return rows, cols


def visibility_map(labels: np.ndarray, origin: tuple[int, int], radius: float, occlusion: bool = True) -> np.ndarray:
    """Cells a vehicle at ``origin`` can sense.

    ``labels`` holds the object index per cell (-1 for free space).  A cell is
    hidden when it lies outside ``radius`` or, with occlusion, when its line of
    sight crosses a cell of a different object.
    """
    height, width = labels.shape
    rr, cc = np.mgrid[0:height, 0:width]
    vis = np.hypot(rr - origin[0], cc - origin[1]) <= radius
    if not occlusion:
        return vis
    idx = np.flatnonzero(vis)
    target_r, target_c = idx // width, idx % width
    flat_labels = labels.ravel()
    target = flat_labels[idx]
    blocked = np.zeros(len(idx), dtype=bool)
    # walks of similar length are batched so short ones are not padded to the longest
    steps = np.maximum(np.abs(target_r - origin[0]), np.abs(target_c - origin[1]))
    order = np.argsort(steps, kind="stable")
    bounds = np.searchsorted(steps[order], _WALK_BUCKETS)
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sel = order[lo:hi]
        if len(sel) == 0:
            continue
        rows, cols = line_of_sight_points(origin, target_r[sel], target_c[sel])
        crossed = flat_labels[rows * width + cols]
        blocked[sel] = np.any((crossed >= 0) & (crossed != target[sel, None]), axis=1)
    vis.flat[idx[blocked]] = False
    return vis


def _place_objects(cfg: ScenarioConfig, rng: np.random.Generator) -> tuple[np.ndarray, list[frozenset]]:
    height, width = cfg.grid.height, cfg.grid.width
    labels = np.full((height, width), -1, dtype=np.int64)
    objects: list[frozenset] = []
    for index in range(cfg.objects):
        for _ in range(cfg.max_retries):
            h = int(rng.integers(cfg.object_height[0], cfg.object_height[1], endpoint=True))
            w = int(rng.integers(cfg.object_width[0], cfg.object_width[1], endpoint=True))
            r0 = int(rng.integers(0, height - h, endpoint=True))
            c0 = int(rng.integers(0, width - w, endpoint=True))
            if np.all(labels[r0 : r0 + h, c0 : c0 + w] == -1):
                labels[r0 : r0 + h, c0 : c0 + w] = index
                objects.append(frozenset((r, c) for r in range(r0, r0 + h) for c in range(c0, c0 + w)))
                break
        else:
            raise GenerationError(f"could not place object {index} after {cfg.max_retries} attempts")
    return labels, objects


def gen_frame(cfg: ScenarioConfig, frame_id: int) -> Frame:
    rng = stream(cfg.seed, "frame", frame_id)
    shape = cfg.grid
    labels, objects = _place_objects(cfg, rng)

    free = np.flatnonzero(labels.ravel() < 0)
    if len(free) < cfg.vehicles:
        raise GenerationError(f"only {len(free)} free cells for {cfg.vehicles} vehicles")
    spots = rng.choice(free, size=cfg.vehicles, replace=False)

    vehicles = []
    visibility = {}
    for vid, spot in enumerate(spots):
        origin = (int(spot) // shape.width, int(spot) % shape.width)
        vis = visibility_map(labels, origin, cfg.sensing_radius, cfg.occlusion)
        vis.flags.writeable = False
        visibility[vid] = vis

        vrng = stream(cfg.seed, "frame", frame_id, "vehicle", vid)
        noise = vrng.standard_normal(shape.as_tuple(), dtype=np.float32)
        noise *= np.float32(cfg.noise_scale)
        logits = noise.astype(np.float64)
        logits += cfg.floor_logit
        seen_objects = vis & (labels >= 0)
        if seen_objects.any():
            # halo: visible cells fade from the nearest visible object cell, on that object's channel
            dist, (near_r, near_c) = distance_transform_edt(~seen_objects, return_indices=True)
            level = cfg.peak_logit - cfg.decay * dist
            lit = vis & (level > cfg.floor_logit)
            rows, cols = np.nonzero(lit)
            channel = labels[near_r[lit], near_c[lit]] % shape.channels
            logits[channel, rows, cols] += level[lit] - cfg.floor_logit

        # channels are random mixtures of a small bank of smoothed fields
        bank = gaussian_filter(
            vrng.standard_normal((cfg.feature_bank, shape.height, shape.width)),
            sigma=(0, cfg.smoothing, cfg.smoothing),
        )
        bank /= bank.std(axis=(1, 2), keepdims=True) + 1e-12
        mixing = vrng.standard_normal((shape.channels, cfg.feature_bank)) / np.sqrt(cfg.feature_bank)
        noise = np.tensordot(mixing, bank, axes=1)
        strength = sigmoid(logits.max(axis=0))
        features = noise * (0.2 + 0.8 * strength)[None, :, :]

        role = VehicleRole.EGO if vid == 0 else VehicleRole.REMOTE
        vehicles.append(Vehicle(vid, role, FeatureTensor(readonly(features)), ConfidenceMap(readonly(logits)), origin))

    return Frame(frame_id, tuple(vehicles), GroundTruth(tuple(objects), visibility))


def proxy_recall(fused: FeatureTensor | np.ndarray, truth: GroundTruth, threshold: float) -> float:
    """Fraction of occupied cells whose fused feature column norm exceeds ``threshold``.

    A frame without objects scores 1.0 (nothing to miss).
    """
    values = fused.values if isinstance(fused, FeatureTensor) else np.asarray(fused)
    occupied = truth.occupied(values.shape[1], values.shape[2])
    total = int(occupied.sum())
    if total == 0:
        return 1.0
    norms = np.linalg.norm(values, axis=0)
    return int(np.count_nonzero(norms[occupied] > threshold)) / total


def bandwidth_loss(remote_maps: Sequence[FeatureTensor]) -> float:
    """Share of remote feature elements that are nonzero after reduction (0 without remotes)."""
    total = sum(m.values.size for m in remote_maps)
    if total == 0:
        return 0.0
    return sum(m.nonzero_count() for m in remote_maps) / total
