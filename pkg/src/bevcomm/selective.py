"""First bandwidth gate: drop cells whose sigmoid confidence does not clear a threshold."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grid import CellMask, FeatureTensor, ImportanceImage, Vehicle, importance_image, readonly
from .layers import sigmoid
from .rng import stream


class StMode(enum.Enum):
    INFERENCE = "inference"
    TRAINING = "training"


@dataclass(frozen=True)
class StConfig:
    threshold: float = 0.01
    mode: StMode = StMode.INFERENCE
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")


@dataclass(frozen=True)
class StResult:
    mask: CellMask
    rate: float
    features: FeatureTensor


def threshold_mask(img: ImportanceImage, mu: float) -> CellMask:
    if not 0.0 < mu < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {mu}")
    return CellMask(sigmoid(img.scores) > mu)


def topk_order(scores: np.ndarray) -> np.ndarray:
    """Flat row-major indices sorted by descending score, ties by lowest index."""
    return np.argsort(-scores.ravel(), kind="stable")


def topk_mask(img: ImportanceImage, k: int) -> CellMask:
    cells = img.scores.size
    if not 0 <= k <= cells:
        raise ValueError(f"K={k} outside [0, {cells}]")
    bits = np.zeros(cells, dtype=bool)
    bits[topk_order(img.scores)[:k]] = True
    return CellMask(bits.reshape(img.scores.shape))


def sample_k(rng: np.random.Generator, height: int, width: int) -> int:
    """Draw the number of kept cells uniformly from ``0..H*W`` inclusive."""
    return int(rng.integers(0, height * width, endpoint=True))


def transmission_rate(mask: CellMask) -> float:
    return mask.popcount / mask.bits.size


def mask_features(features: FeatureTensor, mask: CellMask) -> FeatureTensor:
    if mask.bits.shape != features.values.shape[1:]:
        raise ValueError(f"mask {mask.bits.shape} does not match grid {features.values.shape[1:]}")
    return FeatureTensor(readonly(np.where(mask.bits[None, :, :], features.values, 0.0)))


def apply_st(vehicle: Vehicle, cfg: StConfig, frame_id: int = 0) -> StResult:
    _, height, width = vehicle.features.values.shape
    if vehicle.is_ego:
        # the ego map stays on board, so it is never pruned here
        return StResult(CellMask.ones(height, width), 1.0, vehicle.features)
    img = importance_image(vehicle.confidence)
    if cfg.mode is StMode.TRAINING:
        rng = stream(cfg.seed, "st", frame_id, vehicle.vehicle_id)
        mask = topk_mask(img, sample_k(rng, height, width))
    else:
        mask = threshold_mask(img, cfg.threshold)
    return StResult(mask, transmission_rate(mask), mask_features(vehicle.features, mask))


def frame_rate(results: Sequence[StResult], vehicles: Sequence[Vehicle]) -> float:
    """Frame-level rate handed to grid reduction: mean over remote vehicles, 0 with none."""
    rates = [r.rate for r, v in zip(results, vehicles) if not v.is_ego]
    if not rates:
        return 0.0
    return float(sum(rates) / len(rates))
