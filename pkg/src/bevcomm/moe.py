"""Soft-gated mixture of scaled-dot-product attention experts.

At every cell the ego vector is the query and every vehicle's vector
(ego included) is a key/value.  Each expert has its own query/key/value
projections; a router MLP on a pooled context vector produces the gate
weights that mix the expert outputs.  Vehicles are put in a canonical order
(ego first, remotes by id) before any arithmetic so the result does not depend
on the order the maps arrive in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import weightfile
from .errors import ConfigurationError, FrameError
from .grid import FeatureTensor, VehicleRole, readonly
from .layers import linear, relu, softmax
from .rng import stream

MOE_MAGIC = b"MOEW"
GATING_MODES = ("frame", "cell")

VehicleMap = tuple[int, VehicleRole, FeatureTensor]


@dataclass(frozen=True)
class MoeArch:
    d_model: int = 64
    d_k: int = 32
    experts: int = 3
    router_hidden: int = 16

    def __post_init__(self):
        if self.experts < 1:
            raise ConfigurationError(f"experts must be >= 1, got {self.experts}")
        if self.d_model < 1 or self.d_k < 1 or self.router_hidden < 1:
            raise ConfigurationError("d_model, d_k and router_hidden must be positive")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for i in range(self.experts):
            for proj in ("query", "key", "value"):
                shapes[f"expert{i}.{proj}.weight"] = (self.d_k, self.d_model)
                shapes[f"expert{i}.{proj}.bias"] = (self.d_k,)
        shapes["router0.weight"] = (self.router_hidden, self.d_model)
        shapes["router0.bias"] = (self.router_hidden,)
        shapes["router1.weight"] = (self.experts, self.router_hidden)
        shapes["router1.bias"] = (self.experts,)
        return shapes


@dataclass(frozen=True, eq=False)
class MoeWeights:
    arch: MoeArch
    params: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        weightfile.check_shapes(self.params, self.arch.param_shapes())

    @classmethod
    def init(cls, arch: MoeArch = MoeArch(), seed: int = 0, scale: int = 0) -> MoeWeights:
        """Uniform fan-in draws; attention projection biases start at zero.

        Zero projection biases keep empty cells empty after fusion.
        """
        rng = stream(seed, "moe-weights", scale)
        params = {}
        for name, shape in arch.param_shapes().items():
            if name.startswith("expert") and name.endswith(".bias"):
                params[name] = np.zeros(shape)
                continue
            fan_in = arch.d_model if name.startswith(("expert", "router0")) else arch.router_hidden
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = weightfile.quantize(rng.uniform(-bound, bound, size=shape))
        return cls(arch, params)

    @classmethod
    def zeros(cls, arch: MoeArch = MoeArch()) -> MoeWeights:
        return cls(arch, {name: np.zeros(shape) for name, shape in arch.param_shapes().items()})

    def with_params(self, updates: dict[str, np.ndarray]) -> MoeWeights:
        params = dict(self.params)
        for name, value in updates.items():
            if name not in params:
                raise KeyError(name)
            params[name] = np.asarray(value, dtype=np.float64)
        return MoeWeights(self.arch, params)

    def expert(self, i: int) -> dict[str, np.ndarray]:
        return {k.split(".", 1)[1]: v for k, v in self.params.items() if k.startswith(f"expert{i}.")}

    def to_bytes(self) -> bytes:
        return weightfile.dump_params(MOE_MAGIC, self.params)

    @classmethod
    def from_bytes(cls, data: bytes, arch: MoeArch = MoeArch()) -> MoeWeights:
        params = weightfile.parse_params(data, MOE_MAGIC)
        weightfile.check_shapes(params, arch.param_shapes())
        return cls(arch, params)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, arch: MoeArch = MoeArch()) -> MoeWeights:
        return cls.from_bytes(Path(path).read_bytes(), arch)


@dataclass(frozen=True, eq=False)
class GateRecord:
    weights: np.ndarray
    logits: np.ndarray


@dataclass(frozen=True, eq=False)
class FusedMap:
    features: FeatureTensor
    gates: tuple[GateRecord, ...]
    utilization: np.ndarray

    def mean_gate(self) -> np.ndarray:
        return np.mean([g.weights for g in self.gates], axis=0)


def _augmented(params: dict[str, np.ndarray], name: str) -> np.ndarray:
    """``[W | b]`` so that an affine map acts on a token with a trailing 1."""
    return np.concatenate([params[f"{name}.weight"], params[f"{name}.bias"][:, None]], axis=1)


def _attend_all(tokens: np.ndarray, w: MoeWeights, experts: Sequence[int] | None = None) -> np.ndarray:
    """Ego-query attention of each expert, one ``(P, d_k)`` slab per expert.

    ``tokens`` is ``(P, N, d_model + 1)``: per cell, one row per vehicle with
    the ego first, each ending in a constant 1 that carries the biases.  With
    augmented maps ``Q``, ``K``, ``V`` the score of token ``x`` is
    ``x . (K^T Q x_ego)``, and because attention weights sum to one the output
    is ``V`` applied to the attention-weighted token mix.  Cells whose ego
    token is zero share one folded query, so only the rest are projected.
    """
    experts = list(range(w.arch.experts)) if experts is None else list(experts)
    p = w.params
    n_cells, n_veh, width = tokens.shape
    e = len(experts)
    scale = math.sqrt(w.arch.d_k)

    fold = np.concatenate([_augmented(p, f"expert{i}.key").T @ _augmented(p, f"expert{i}.query") for i in experts])
    ego = tokens[:, 0]
    query = np.broadcast_to(fold[:, -1], (n_cells, e * width)).copy()
    rows = np.flatnonzero(np.any(ego[:, :-1] != 0.0, axis=1))
    query[rows] = ego[rows] @ fold.T
    logits = np.matmul(query.reshape(n_cells, e, width), tokens.transpose(0, 2, 1)) / scale
    attn = softmax(logits, axis=2)

    mixed = np.matmul(attn, tokens).transpose(1, 0, 2)
    values = np.stack([_augmented(p, f"expert{i}.value").T for i in experts])
    return np.matmul(mixed, values)


def sdpa_expert(stacked: np.ndarray, w: MoeWeights, expert: int = 0) -> np.ndarray:
    """Attention output at a single cell; row 0 of ``stacked`` is the ego vector."""
    stacked = np.atleast_2d(np.asarray(stacked, dtype=np.float64))
    tokens = np.concatenate([stacked, np.ones((len(stacked), 1))], axis=1)[None]
    return _attend_all(tokens, w, [expert])[0, 0]


def router_logits(x: np.ndarray, w: MoeWeights) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.arch.d_model:
        raise ConfigurationError(f"router input dim {x.shape[-1]} != {w.arch.d_model}")
    hidden = relu(linear(x, w.params["router0.weight"], w.params["router0.bias"]))
    return linear(hidden, w.params["router1.weight"], w.params["router1.bias"])


def gate_weights(logits: np.ndarray) -> GateRecord:
    logits = np.asarray(logits, dtype=np.float64)
    return GateRecord(softmax(logits), logits)


def gating_entropy(records: Sequence[GateRecord]) -> float:
    """Mean Shannon entropy (nats) of the gate vectors, with ``0 ln 0 = 0``."""
    if not records:
        raise ValueError("gating_entropy needs at least one record")
    g = np.stack([r.weights for r in records])
    safe = np.where(g > 0.0, g, 1.0)
    return float(np.mean(-np.sum(g * np.log(safe), axis=1)))


def canonical_order(maps: Sequence[VehicleMap]) -> list[VehicleMap]:
    egos = [m for m in maps if m[1] is VehicleRole.EGO]
    if len(egos) != 1:
        raise FrameError(f"fusion needs exactly one ego map, got {len(egos)}")
    return egos + sorted((m for m in maps if m[1] is not VehicleRole.EGO), key=lambda m: m[0])


def _stack_tokens(maps: Sequence[VehicleMap], d_model: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Cell-major token block ``(P, N, d_model + 1)`` in canonical vehicle order, last column 1."""
    ordered = canonical_order(maps)
    shape = ordered[0][2].values.shape
    for vid, _, ft in ordered:
        if ft.values.shape != shape:
            raise FrameError(f"vehicle {vid} map {ft.values.shape} does not match ego grid {shape}")
    if shape[0] != d_model:
        raise FrameError(f"maps carry {shape[0]} channels, fusion expects {d_model}")
    n_cells = shape[1] * shape[2]
    tokens = np.empty((n_cells, len(ordered), d_model + 1))
    for n, (_, _, ft) in enumerate(ordered):
        tokens[:, n, :d_model] = ft.values.reshape(d_model, n_cells).T
    tokens[:, :, d_model] = 1.0
    return tokens, shape[1:]


def expert_outputs(maps: Sequence[VehicleMap], w: MoeWeights) -> list[np.ndarray]:
    """Per-expert outputs shaped ``(d_k, H, W)``, before gating."""
    tokens, (height, width) = _stack_tokens(maps, w.arch.d_model)
    return [out.T.reshape(-1, height, width) for out in _attend_all(tokens, w)]


def moe_fuse(maps: Sequence[VehicleMap], w: MoeWeights, gating: str = "frame") -> FusedMap:
    if gating not in GATING_MODES:
        raise ConfigurationError(f"gating must be one of {GATING_MODES}, got {gating!r}")
    tokens, (height, width) = _stack_tokens(maps, w.arch.d_model)
    features = tokens[:, :, :-1]
    n_cells = height * width

    if gating == "frame":
        context = features.mean(axis=(0, 1))
        records = (gate_weights(router_logits(context, w)),)
        gates = np.broadcast_to(records[0].weights, (n_cells, w.arch.experts))
    else:
        context = features.mean(axis=1)
        logits = router_logits(context, w)
        gates = softmax(logits, axis=1)
        records = tuple(GateRecord(g, l) for g, l in zip(gates, logits))

    active = np.any(features != 0.0, axis=(1, 2))
    fused = np.zeros((n_cells, w.arch.d_k))
    utilization = np.zeros(w.arch.experts)
    for i, out in enumerate(_attend_all(tokens, w)):
        fused += gates[:, i : i + 1] * out
        weight = gates[active, i]
        total = weight.sum()
        if total > 0.0:
            utilization[i] = float(np.sum(weight * np.linalg.norm(out[active], axis=1)) / total)

    return FusedMap(FeatureTensor(readonly(np.ascontiguousarray(fused.T).reshape(-1, height, width))), records, utilization)


def downsample(ft: FeatureTensor, factor: int) -> FeatureTensor:
    """Mean-pool ``factor x factor`` blocks."""
    if factor == 1:
        return ft
    c, h, wdt = ft.values.shape
    if h % factor or wdt % factor:
        raise ConfigurationError(f"grid {h}x{wdt} not divisible by {factor}")
    return FeatureTensor(ft.values.reshape(c, h // factor, factor, wdt // factor, factor).mean(axis=(2, 4)))


def upsample_nearest(values: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return values
    return values.repeat(factor, axis=-2).repeat(factor, axis=-1)


def multiscale_fuse(
    per_scale: Sequence[Sequence[VehicleMap]],
    weights: Sequence[MoeWeights],
    gating: str = "frame",
) -> FusedMap:
    """Fuse each scale independently, upsample coarse outputs, concatenate channels.

    Scale ``s`` (0-based) must sit on a grid ``2**s`` times coarser than scale 0.
    """
    if len(per_scale) not in (1, 2):
        raise ConfigurationError(f"scale count must be 1 or 2, got {len(per_scale)}")
    if len(weights) != len(per_scale):
        raise ConfigurationError(f"{len(weights)} weight sets for {len(per_scale)} scales")
    fine = per_scale[0][0][2].values.shape[1:]
    outputs = []
    gates: list[GateRecord] = []
    utils = []
    for s, (maps, w) in enumerate(zip(per_scale, weights)):
        factor = 2**s
        if fine[0] % factor or fine[1] % factor:
            raise ConfigurationError(f"grid {fine[0]}x{fine[1]} not divisible by {factor}")
        expected = (fine[0] // factor, fine[1] // factor)
        got = maps[0][2].values.shape[1:]
        if got != expected:
            raise ConfigurationError(f"scale {s} grid {got} != expected {expected}")
        fused = moe_fuse(maps, w, gating)
        outputs.append(upsample_nearest(fused.features.values, factor))
        gates.extend(fused.gates)
        utils.append(fused.utilization)
    if len(per_scale) == 1:
        return FusedMap(FeatureTensor(outputs[0]), tuple(gates), utils[0])
    if len({len(u) for u in utils}) != 1:
        raise ConfigurationError("all scales must use the same expert count")
    return FusedMap(FeatureTensor(np.concatenate(outputs, axis=0)), tuple(gates), np.mean(utils, axis=0))
