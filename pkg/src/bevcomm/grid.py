"""Grid, vehicle and frame data model shared by every stage.

Arrays are indexed ``(channel, row, col)`` in row-major order with the origin
at the top-left cell.  All containers are frozen and hold read-only float64
arrays, so they can be shared between threads freely.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

DEFAULT_CHANNELS = 64
DEFAULT_HEIGHT = 48
DEFAULT_WIDTH = 176


def readonly(arr: np.ndarray) -> np.ndarray:
    """Mark a freshly built array read-only so containers can adopt it without copying."""
    arr.flags.writeable = False
    return arr


def _frozen(values, dtype=np.float64) -> np.ndarray:
    if isinstance(values, np.ndarray) and values.dtype == dtype and not values.flags.writeable:
        return values
    return readonly(np.array(values, dtype=dtype, copy=True))


@dataclass(frozen=True)
class GridShape:
    channels: int = DEFAULT_CHANNELS
    height: int = DEFAULT_HEIGHT
    width: int = DEFAULT_WIDTH

    def __post_init__(self):
        for name in ("channels", "height", "width"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"GridShape.{name} must be a positive integer, got {value!r}")

    @property
    def cells(self) -> int:
        return self.height * self.width

    @property
    def size(self) -> int:
        return self.channels * self.height * self.width

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


@dataclass(frozen=True, eq=False)
class FeatureTensor:
    """Dense ``L x H x W`` feature grid."""

    values: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.values)
        if arr.ndim != 3 or 0 in arr.shape:
            raise ValueError(f"feature tensor must be a non-empty 3-D array, got shape {arr.shape}")
        object.__setattr__(self, "values", arr)

    @property
    def shape(self) -> GridShape:
        return GridShape(*self.values.shape)

    @classmethod
    def zeros(cls, shape: GridShape) -> FeatureTensor:
        return cls(np.zeros(shape.as_tuple()))

    def support(self) -> np.ndarray:
        """Boolean ``H x W`` map of cells holding any nonzero channel."""
        return np.any(self.values != 0.0, axis=0)

    @cached_property
    def _nonzero(self) -> int:
        return int(np.count_nonzero(self.values != 0.0))

    def nonzero_count(self) -> int:
        return self._nonzero

    def __eq__(self, other):
        if not isinstance(other, FeatureTensor):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ConfidenceMap:
    """Per-class objectness logits, same layout as the paired features."""

    logits: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.logits)
        if arr.ndim != 3 or 0 in arr.shape:
            raise ValueError(f"confidence map must be a non-empty 3-D array, got shape {arr.shape}")
        object.__setattr__(self, "logits", arr)

    @property
    def shape(self) -> GridShape:
        return GridShape(*self.logits.shape)

    def __eq__(self, other):
        if not isinstance(other, ConfidenceMap):
            return NotImplemented
        return np.array_equal(self.logits, other.logits)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ImportanceImage:
    scores: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.scores)
        if arr.ndim != 2 or 0 in arr.shape:
            raise ValueError(f"importance image must be a non-empty 2-D array, got shape {arr.shape}")
        object.__setattr__(self, "scores", arr)

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]

    __hash__ = None


@dataclass(frozen=True, eq=False)
class CellMask:
    bits: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.bits)
        if raw.ndim != 2 or 0 in raw.shape:
            raise ValueError(f"cell mask must be a non-empty 2-D array, got shape {raw.shape}")
        if raw.dtype != np.bool_ and not np.isin(raw, (0, 1)).all():
            raise ValueError("cell mask entries must be 0 or 1")
        object.__setattr__(self, "bits", _frozen(raw, dtype=np.bool_))

    @classmethod
    def ones(cls, height: int, width: int) -> CellMask:
        return cls(np.ones((height, width), dtype=bool))

    @classmethod
    def zeros(cls, height: int, width: int) -> CellMask:
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __eq__(self, other):
        if not isinstance(other, CellMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    __hash__ = None


class VehicleRole(enum.Enum):
    EGO = "ego"
    REMOTE = "remote"


@dataclass(frozen=True)
class Vehicle:
    vehicle_id: int
    role: VehicleRole
    features: FeatureTensor
    confidence: ConfidenceMap
    position: tuple[int, int] = (0, 0)

    @property
    def is_ego(self) -> bool:
        return self.role is VehicleRole.EGO


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Occupied cells per object plus per-vehicle sensing visibility.

    ``visibility`` maps a vehicle id to a boolean ``H x W`` array of cells that
    vehicle can sense.
    """

    objects: tuple[frozenset, ...] = ()
    visibility: Mapping[int, np.ndarray] = field(default_factory=dict)

    def occupied(self, height: int, width: int) -> np.ndarray:
        grid = np.zeros((height, width), dtype=bool)
        for cells in self.objects:
            for r, c in cells:
                grid[r, c] = True
        return grid

    def visible_objects(self, vehicle_id: int) -> tuple[int, ...]:
        vis = self.visibility[vehicle_id]
        return tuple(i for i, cells in enumerate(self.objects) if any(vis[r, c] for r, c in cells))


@dataclass(frozen=True)
class Frame:
    frame_id: int
    vehicles: tuple[Vehicle, ...]
    truth: GroundTruth = field(default_factory=GroundTruth)

    def __post_init__(self):
        object.__setattr__(self, "vehicles", tuple(self.vehicles))

    @property
    def ego(self) -> Vehicle:
        egos = [v for v in self.vehicles if v.is_ego]
        if len(egos) != 1:
            raise ValueError(f"frame {self.frame_id} has {len(egos)} ego vehicles")
        return egos[0]

    @property
    def remotes(self) -> tuple[Vehicle, ...]:
        return tuple(v for v in self.vehicles if not v.is_ego)

    @property
    def shape(self) -> GridShape:
        return self.vehicles[0].features.shape


def importance_image(conf: ConfidenceMap) -> ImportanceImage:
    """Collapse per-class logits into one score per cell (channel-wise max)."""
    return ImportanceImage(conf.logits.max(axis=0))


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    vehicle_id: int | None = None
    location: tuple[int, ...] | None = None


def validate_frame(frame: Frame, expected: GridShape | None = None) -> list[Violation]:
    """Check a frame's structure; returns every violation found, never raises."""
    report: list[Violation] = []
    vehicles: Sequence[Vehicle] = frame.vehicles
    if not vehicles:
        report.append(Violation("missing ego", "frame has no vehicles"))
        return report

    seen: set[int] = set()
    for v in vehicles:
        if v.vehicle_id in seen:
            report.append(Violation("duplicate id", f"vehicle id {v.vehicle_id} appears more than once", v.vehicle_id))
        seen.add(v.vehicle_id)

    n_ego = sum(v.is_ego for v in vehicles)
    if n_ego == 0:
        report.append(Violation("missing ego", "frame has no ego vehicle"))
    elif n_ego > 1:
        report.append(Violation("multiple ego", f"frame has {n_ego} ego vehicles"))

    reference = expected or vehicles[0].features.shape
    for v in vehicles:
        fshape = v.features.values.shape
        cshape = v.confidence.logits.shape
        if fshape != reference.as_tuple():
            report.append(Violation("shape mismatch", f"features {fshape} != {reference.as_tuple()}", v.vehicle_id))
        if cshape[1:] != fshape[1:]:
            report.append(Violation("shape mismatch", f"confidence grid {cshape[1:]} != feature grid {fshape[1:]}", v.vehicle_id))
        for name, arr in (("features", v.features.values), ("confidence", v.confidence.logits)):
            if np.isfinite(arr).all():
                continue
            bad = np.argwhere(~np.isfinite(arr))
            if len(bad):
                loc = tuple(int(i) for i in bad[0])
                report.append(
                    Violation("non-finite value", f"{len(bad)} non-finite {name} value(s), first at {loc}", v.vehicle_id, loc)
                )
    return report
