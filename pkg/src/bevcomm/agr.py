"""Second bandwidth gate: per-vehicle keep ratios from a graph-attention policy.

Each vehicle's confidence map is summarised by a small strided CNN, embedded
by an affine stage, tagged with its ego flag and the frame transmission rate,
and passed through one fully connected graph-attention layer.  A two-stage MLP
turns each node output into an adjustment factor, which scales the role base
keep ratio together with a congestion term.  Each vehicle then keeps only its
``K_v`` highest-importance cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import weightfile
from .errors import ConfigurationError, FrameError
from .grid import CellMask, ConfidenceMap, FeatureTensor, Frame, GridShape, VehicleRole, importance_image
from .layers import conv2d, elu, leaky_relu, linear, relu, sigmoid, softmax
from .rng import stream
from .selective import mask_features, topk_mask

AGR_MAGIC = b"AGRW"
DEFAULT_BASES = (0.9, 0.5)  # (ego, remote)
DEFAULT_CLAMP = (0.1, 0.95)


@dataclass(frozen=True)
class AgrArch:
    conv_channels: tuple[int, ...] = (32, 64)
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    embed_dim: int = 16
    gat_dim: int = 16
    leaky_slope: float = 0.2
    mlp_hidden: int = 8

    def __post_init__(self):
        if not self.conv_channels:
            raise ConfigurationError("at least one conv stage is required")
        if self.embed_dim >= self.feature_dim:
            raise ConfigurationError(f"embed_dim ({self.embed_dim}) must be below feature_dim ({self.feature_dim})")

    @property
    def feature_dim(self) -> int:
        return self.conv_channels[-1]

    @property
    def node_dim(self) -> int:
        return self.embed_dim + 2

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        in_ch = 1
        for i, out_ch in enumerate(self.conv_channels):
            shapes[f"conv{i}.weight"] = (out_ch, in_ch, self.kernel, self.kernel)
            shapes[f"conv{i}.bias"] = (out_ch,)
            in_ch = out_ch
        shapes["embed.weight"] = (self.embed_dim, self.feature_dim)
        shapes["embed.bias"] = (self.embed_dim,)
        shapes["gat.weight"] = (self.gat_dim, self.node_dim)
        shapes["gat.attn"] = (2 * self.gat_dim,)
        shapes["adjust0.weight"] = (self.mlp_hidden, self.gat_dim)
        shapes["adjust0.bias"] = (self.mlp_hidden,)
        shapes["adjust1.weight"] = (1, self.mlp_hidden)
        shapes["adjust1.bias"] = (1,)
        return shapes


def _fan_in(name: str, shapes: dict[str, tuple[int, ...]]) -> int:
    layer = name.rsplit(".", 1)[0]
    ref = shapes.get(f"{layer}.weight", shapes[name])
    return int(np.prod(ref[1:])) if len(ref) > 1 else int(ref[0])


@dataclass(frozen=True, eq=False)
class AgrWeights:
    arch: AgrArch
    params: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        weightfile.check_shapes(self.params, self.arch.param_shapes())

    @classmethod
    def init(cls, arch: AgrArch = AgrArch(), seed: int = 0) -> AgrWeights:
        """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` draws, rounded to binary32."""
        rng = stream(seed, "agr-weights")
        shapes = arch.param_shapes()
        params = {}
        for name, shape in shapes.items():
            bound = 1.0 / math.sqrt(_fan_in(name, shapes))
            params[name] = weightfile.quantize(rng.uniform(-bound, bound, size=shape))
        return cls(arch, params)

    @classmethod
    def zeros(cls, arch: AgrArch = AgrArch()) -> AgrWeights:
        return cls(arch, {name: np.zeros(shape) for name, shape in arch.param_shapes().items()})

    def with_params(self, updates: dict[str, np.ndarray]) -> AgrWeights:
        params = dict(self.params)
        for name, value in updates.items():
            if name not in params:
                raise KeyError(name)
            params[name] = np.asarray(value, dtype=np.float64)
        return AgrWeights(self.arch, params)

    def to_bytes(self) -> bytes:
        return weightfile.dump_params(AGR_MAGIC, self.params)

    @classmethod
    def from_bytes(cls, data: bytes, arch: AgrArch = AgrArch()) -> AgrWeights:
        params = weightfile.parse_params(data, AGR_MAGIC)
        weightfile.check_shapes(params, arch.param_shapes())
        return cls(arch, params)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, arch: AgrArch = AgrArch()) -> AgrWeights:
        return cls.from_bytes(Path(path).read_bytes(), arch)


@dataclass(frozen=True)
class VehicleGraph:
    """Node features ``[embedding, ego_flag, tau]`` with a fully connected adjacency."""

    nodes: np.ndarray
    adjacency: np.ndarray | None = None

    def __post_init__(self):
        nodes = np.atleast_2d(np.asarray(self.nodes, dtype=np.float64))
        n = nodes.shape[0]
        adj = np.ones((n, n), dtype=bool) if self.adjacency is None else np.asarray(self.adjacency, dtype=bool)
        if adj.shape != (n, n):
            raise ConfigurationError(f"adjacency {adj.shape} does not match {n} nodes")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "adjacency", adj)


@dataclass(frozen=True)
class KeepRatioDecision:
    vehicle_id: int
    role: VehicleRole
    tau: float
    alpha: float
    k_raw: float
    k_clamped: float
    cells: int


def conf_features(conf: ConfidenceMap, w: AgrWeights) -> np.ndarray:
    """CNN summary of the importance image, globally average-pooled."""
    x = importance_image(conf).scores[None, :, :]
    for i in range(len(w.arch.conv_channels)):
        try:
            x = conv2d(x, w.params[f"conv{i}.weight"], w.params[f"conv{i}.bias"], w.arch.stride, w.arch.padding)
        except ValueError as exc:
            raise ConfigurationError(f"conv stage {i}: {exc}") from exc
        x = relu(x)
    return x.mean(axis=(1, 2))


def embed(e: np.ndarray, w: AgrWeights) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (w.arch.feature_dim,):
        raise ConfigurationError(f"embedding input has shape {e.shape}, expected ({w.arch.feature_dim},)")
    return relu(linear(e, w.params["embed.weight"], w.params["embed.bias"]))


def node_features(embedding: np.ndarray, role: VehicleRole, tau: float) -> np.ndarray:
    flag = 1.0 if role is VehicleRole.EGO else 0.0
    return np.concatenate([embedding, [flag, tau]])


def gat_forward(graph: VehicleGraph, w: AgrWeights) -> tuple[np.ndarray, np.ndarray]:
    """Single-head graph attention.

    Returns ``(z, attention)`` where ``attention[v, u]`` is the weight node
    ``v`` gives neighbour ``u``; each row sums to one.
    """
    nodes = graph.nodes
    if nodes.shape[1] != w.arch.node_dim:
        raise ConfigurationError(f"node dim {nodes.shape[1]} != {w.arch.node_dim}")
    h = linear(nodes, w.params["gat.weight"])
    a = w.params["gat.attn"]
    src = h @ a[: w.arch.gat_dim]
    dst = h @ a[w.arch.gat_dim :]
    logits = leaky_relu(dst[:, None] + src[None, :], w.arch.leaky_slope)
    logits = np.where(graph.adjacency | np.eye(len(nodes), dtype=bool), logits, -np.inf)
    attention = softmax(logits, axis=1)
    return elu(attention @ h), attention


def adjustment_factor(z: np.ndarray, w: AgrWeights) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (w.arch.gat_dim,):
        raise ConfigurationError(f"adjustment input has shape {z.shape}, expected ({w.arch.gat_dim},)")
    hidden = relu(linear(z, w.params["adjust0.weight"], w.params["adjust0.bias"]))
    logit = linear(hidden, w.params["adjust1.weight"], w.params["adjust1.bias"])[0]
    return float(sigmoid(logit))


def keep_ratio(
    role: VehicleRole,
    alpha: float,
    tau: float,
    bases: tuple[float, float] = DEFAULT_BASES,
    clamp: tuple[float, float] = DEFAULT_CLAMP,
) -> tuple[float, float]:
    """Return ``(raw, clamped)`` keep ratio for one vehicle."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    base = bases[0] if role is VehicleRole.EGO else bases[1]
    raw = base * (0.5 + 0.5 * alpha) * (0.7 + 0.3 * (1.0 - tau))
    lo, hi = clamp
    return raw, max(min(raw, hi), lo)


def cells_to_keep(k: float, shape: GridShape | tuple[int, int]) -> int:
    """``max(1, floor(H * W * k))`` evaluated exactly on the binary value of ``k``."""
    if isinstance(shape, GridShape):
        cells = shape.cells
    else:
        cells = shape[0] * shape[1]
    num, den = float(k).as_integer_ratio()
    return max(1, (num * cells) // den)


def importance_mask(conf: ConfidenceMap, k: int) -> CellMask:
    cells = conf.logits.shape[1] * conf.logits.shape[2]
    if not 1 <= k <= cells:
        raise ValueError(f"K={k} outside [1, {cells}]")
    return topk_mask(importance_image(conf), k)


def reduce(features: FeatureTensor, mask: CellMask) -> FeatureTensor:
    return mask_features(features, mask)


def agr_pipeline(
    frame: Frame,
    masked: Sequence[FeatureTensor],
    tau: float,
    w: AgrWeights,
    bases: tuple[float, float] = DEFAULT_BASES,
    clamp: tuple[float, float] = DEFAULT_CLAMP,
) -> tuple[list[FeatureTensor], list[KeepRatioDecision]]:
    """Run grid reduction for every vehicle of ``frame``.

    ``masked`` holds the selectively transmitted features in vehicle order.
    Importance masks come from the original confidence maps.
    """
    vehicles = frame.vehicles
    if len(masked) != len(vehicles):
        raise FrameError(f"{len(masked)} masked tensors for {len(vehicles)} vehicles")
    nodes = np.stack(
        [node_features(embed(conf_features(v.confidence, w), w), v.role, tau) for v in vehicles]
    )
    z, _ = gat_forward(VehicleGraph(nodes), w)

    reduced: list[FeatureTensor] = []
    decisions: list[KeepRatioDecision] = []
    for v, feats, zv in zip(vehicles, masked, z):
        alpha = adjustment_factor(zv, w)
        raw, k = keep_ratio(v.role, alpha, tau, bases, clamp)
        _, height, width = v.confidence.logits.shape
        count = cells_to_keep(k, (height, width))
        reduced.append(reduce(feats, importance_mask(v.confidence, count)))
        decisions.append(KeepRatioDecision(v.vehicle_id, v.role, tau, alpha, raw, k, count))
    return reduced, decisions
