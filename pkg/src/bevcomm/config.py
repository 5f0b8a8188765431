"""Typed INI configuration for a full run.

One section per module; every key is typed and range-checked before anything
runs, and unknown sections or keys are rejected so a misspelt hyperparameter
cannot silently fall back to its default.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

from .agr import AgrArch, AgrWeights
from .errors import ConfigurationError
from .grid import GridShape
from .moe import GATING_MODES, MoeArch, MoeWeights
from .pipeline import PipelineConfig
from .selective import StConfig, StMode
from .sim import MAX_VEHICLES, ScenarioConfig
from .weightfile import WeightFileError


class ConfigError(ConfigurationError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _int(raw: str) -> int:
    return int(raw.strip(), 10)


def _float(raw: str) -> float:
    value = float(raw)
    if not math.isfinite(value):
        raise ValueError(f"expected a finite number, got {raw!r}")
    return value


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def inner(raw: str):
        return None if raw.strip() in ("", "none") else parse(raw)

    return inner


def _text(raw: str) -> str:
    return raw.strip()


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "run": {
        "frames": (_int, 200),
        "seed": (_int, 0),
        "weights_seed": (_int, 0),
        "agr_weights": (_optional(_text), None),
        "moe_weights": (_optional(_text), None),
    },
    "scenario": {
        "vehicles": (_int, 3),
        "objects": (_int, 24),
        "channels": (_int, 64),
        "height": (_int, 48),
        "width": (_int, 176),
        "sensing_radius": (_float, 60.0),
        "occlusion": (_bool, True),
        "noise_scale": (_float, 0.5),
        "peak_logit": (_float, 6.0),
        "floor_logit": (_float, -8.0),
        "decay": (_float, 0.15),
        "object_height_min": (_int, 3),
        "object_height_max": (_int, 8),
        "object_width_min": (_int, 6),
        "object_width_max": (_int, 20),
        "smoothing": (_float, 1.0),
        "feature_bank": (_int, 8),
    },
    "selective": {
        "threshold": (_float, 0.01),
        "mode": (_text, "inference"),
    },
    "agr": {
        "k_ego": (_float, 0.9),
        "k_remote": (_float, 0.5),
        "clamp_min": (_float, 0.1),
        "clamp_max": (_float, 0.95),
        "congestion_override": (_optional(_float), None),
    },
    "moe": {
        "experts": (_int, 3),
        "gating": (_text, "frame"),
        "scales": (_int, 1),
    },
    "loss": {
        "lambda_bandwidth": (_float, 0.05),
        "mu_entropy": (_float, 1e-4),
    },
    "metrics": {
        "recall_threshold": (_float, 0.5),
        "comm_times_bytes": (_bool, False),
    },
}


def defaults() -> dict[str, dict[str, Any]]:
    return {section: {k: d for k, (_, d) in keys.items()} for section, keys in SCHEMA.items()}


@dataclass(frozen=True)
class RunConfig:
    """Validated, merged view of every module's settings."""

    values: dict[str, dict[str, Any]] = field(default_factory=defaults)
    base_dir: Path = Path(".")

    def __post_init__(self):
        validate(self.values)

    def get(self, dotted: str):
        section, key = dotted.split(".")
        return self.values[section][key]

    def with_overrides(self, **dotted: Any) -> RunConfig:
        """``cfg.with_overrides(**{"run.frames": 10})``; validated like a file."""
        merged = {s: dict(k) for s, k in self.values.items()}
        for name, value in dotted.items():
            section, key = name.split(".")
            if section not in SCHEMA or key not in SCHEMA[section]:
                raise ConfigError(name, "unknown setting")
            merged[section][key] = value
        return replace(self, values=merged)

    # ------------------------------------------------------------ views

    @property
    def frames(self) -> int:
        return self.values["run"]["frames"]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def grid(self) -> GridShape:
        s = self.values["scenario"]
        return GridShape(s["channels"], s["height"], s["width"])

    def scenario(self) -> ScenarioConfig:
        s = self.values["scenario"]
        return ScenarioConfig(
            seed=self.seed,
            vehicles=s["vehicles"],
            objects=s["objects"],
            grid=self.grid,
            sensing_radius=s["sensing_radius"],
            occlusion=s["occlusion"],
            noise_scale=s["noise_scale"],
            peak_logit=s["peak_logit"],
            floor_logit=s["floor_logit"],
            decay=s["decay"],
            object_height=(s["object_height_min"], s["object_height_max"]),
            object_width=(s["object_width_min"], s["object_width_max"]),
            smoothing=s["smoothing"],
            feature_bank=s["feature_bank"],
        )

    def pipeline(self) -> PipelineConfig:
        v = self.values
        return PipelineConfig(
            st=StConfig(v["selective"]["threshold"], StMode(v["selective"]["mode"]), self.seed),
            bases=(v["agr"]["k_ego"], v["agr"]["k_remote"]),
            clamp=(v["agr"]["clamp_min"], v["agr"]["clamp_max"]),
            gating=v["moe"]["gating"],
            scales=v["moe"]["scales"],
            recall_threshold=v["metrics"]["recall_threshold"],
            lambda_bandwidth=v["loss"]["lambda_bandwidth"],
            mu_entropy=v["loss"]["mu_entropy"],
            comm_times_bytes=v["metrics"]["comm_times_bytes"],
            congestion_override=v["agr"]["congestion_override"],
        )

    def moe_arch(self) -> MoeArch:
        return MoeArch(d_model=self.grid.channels, experts=self.values["moe"]["experts"])

    def _path(self, raw: str) -> Path:
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    def agr_weights(self) -> AgrWeights:
        """Weights from ``run.agr_weights`` if set, else seeded initialisation.

        Raises ``OSError`` for unreadable files and ``ConfigError`` when the
        file does not fit the architecture.
        """
        raw = self.values["run"]["agr_weights"]
        if raw is None:
            return AgrWeights.init(AgrArch(), self.values["run"]["weights_seed"])
        try:
            return AgrWeights.load(self._path(raw))
        except (WeightFileError, ConfigurationError) as exc:
            raise ConfigError("run.agr_weights", str(exc)) from exc

    def moe_weights(self) -> list[MoeWeights]:
        """One weight set per fusion scale; ``run.moe_weights`` lists files comma-separated."""
        arch = self.moe_arch()
        scales = self.values["moe"]["scales"]
        raw = self.values["run"]["moe_weights"]
        if raw is None:
            return [MoeWeights.init(arch, self.values["run"]["weights_seed"], scale=s) for s in range(scales)]
        paths = [p.strip() for p in raw.split(",") if p.strip()]
        if len(paths) != scales:
            raise ConfigError("run.moe_weights", f"{len(paths)} file(s) for {scales} scale(s)")
        try:
            return [MoeWeights.load(self._path(p), arch) for p in paths]
        except (WeightFileError, ConfigurationError) as exc:
            raise ConfigError("run.moe_weights", str(exc)) from exc

    # ------------------------------------------------------------ identity

    def canonical(self) -> dict[str, dict[str, Any]]:
        return {s: dict(sorted(k.items())) for s, k in sorted(self.values.items())}

    def fingerprint(self) -> str:
        """sha256 over every setting and seed; weight files are hashed by content."""
        blob: dict[str, Any] = {"config": self.canonical()}
        for key in ("agr_weights", "moe_weights"):
            raw = self.values["run"][key]
            if raw is not None:
                blob[key] = [hashlib.sha256(self._path(p.strip()).read_bytes()).hexdigest() for p in raw.split(",")]
        text = json.dumps(blob, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def to_ini(self) -> str:
        lines = []
        for section, keys in self.canonical().items():
            lines.append(f"[{section}]")
            for key, value in keys.items():
                if value is None:
                    text = ""
                elif isinstance(value, bool):
                    text = "true" if value else "false"
                else:
                    text = repr(value) if isinstance(value, float) else str(value)
                lines.append(f"{key} = {text}")
            lines.append("")
        return "\n".join(lines)


def _check(name: str, ok: bool, message: str) -> None:
    if not ok:
        raise ConfigError(name, message)


def validate(values: dict[str, dict[str, Any]]) -> None:
    for section, keys in values.items():
        if section not in SCHEMA:
            raise ConfigError(section, "unknown section")
        for key in keys:
            if key not in SCHEMA[section]:
                raise ConfigError(f"{section}.{key}", "unknown setting")
    for section in SCHEMA:
        missing = set(SCHEMA[section]) - set(values.get(section, {}))
        if missing:
            raise ConfigError(f"{section}.{sorted(missing)[0]}", "missing setting")

    run, sc, st, agr, moe, loss, met = (values[s] for s in ("run", "scenario", "selective", "agr", "moe", "loss", "metrics"))
    _check("frames", run["frames"] >= 1, f"must be >= 1, got {run['frames']}")
    _check("run.seed", run["seed"] >= 0, "must be >= 0")
    _check("run.weights_seed", run["weights_seed"] >= 0, "must be >= 0")

    _check("scenario.vehicles", 1 <= sc["vehicles"] <= MAX_VEHICLES, f"must lie in [1, {MAX_VEHICLES}], got {sc['vehicles']}")
    _check("scenario.objects", sc["objects"] >= 0, "must be >= 0")
    for key in ("channels", "height", "width"):
        _check(f"scenario.{key}", 1 <= sc[key] <= 0xFFFF, f"must lie in [1, 65535], got {sc[key]}")
    _check("scenario.sensing_radius", sc["sensing_radius"] > 0, "must be positive")
    _check("scenario.noise_scale", sc["noise_scale"] >= 0, "must be >= 0")
    _check("scenario.decay", sc["decay"] >= 0, "must be >= 0")
    _check("scenario.peak_logit", sc["peak_logit"] > sc["floor_logit"], "must exceed floor_logit")
    _check("scenario.smoothing", sc["smoothing"] >= 0, "must be >= 0")
    _check("scenario.feature_bank", sc["feature_bank"] >= 1, "must be >= 1")
    for axis, limit in (("height", sc["height"]), ("width", sc["width"])):
        lo, hi = sc[f"object_{axis}_min"], sc[f"object_{axis}_max"]
        _check(f"scenario.object_{axis}_min", 1 <= lo <= hi <= limit, f"need 1 <= min <= max <= {limit}, got {lo}..{hi}")

    _check("selective.threshold", 0.0 < st["threshold"] < 1.0, f"must lie in (0, 1), got {st['threshold']}")
    _check("selective.mode", st["mode"] in {m.value for m in StMode}, f"must be one of {[m.value for m in StMode]}")

    _check("agr.k_ego", 0.0 < agr["k_ego"] <= 1.0, "must lie in (0, 1]")
    _check("agr.k_remote", 0.0 < agr["k_remote"] <= 1.0, "must lie in (0, 1]")
    _check("agr.clamp_min", 0.0 < agr["clamp_min"] < agr["clamp_max"], "need 0 < clamp_min < clamp_max")
    _check("agr.clamp_max", agr["clamp_max"] <= 1.0, "must be <= 1")
    override = agr["congestion_override"]
    _check("agr.congestion_override", override is None or 0.0 <= override <= 1.0, "must lie in [0, 1]")

    _check("moe.experts", moe["experts"] >= 1, "must be >= 1")
    _check("moe.gating", moe["gating"] in GATING_MODES, f"must be one of {list(GATING_MODES)}")
    _check("moe.scales", moe["scales"] in (1, 2), "must be 1 or 2")
    if moe["scales"] == 2:
        _check("moe.scales", sc["height"] % 2 == 0 and sc["width"] % 2 == 0, "two scales need an even grid")

    _check("loss.lambda_bandwidth", loss["lambda_bandwidth"] >= 0, "must be >= 0")
    _check("loss.mu_entropy", loss["mu_entropy"] >= 0, "must be >= 0")
    _check("metrics.recall_threshold", met["recall_threshold"] >= 0, "must be >= 0")


def parse_config(text: str, base_dir: str | Path = ".") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", f"unreadable: {exc}") from exc
    values = defaults()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(section, "unknown section")
        for key, raw in parser.items(section):
            name = f"{section}.{key}"
            if key not in SCHEMA[section]:
                raise ConfigError(name, "unknown setting")
            parse, _ = SCHEMA[section][key]
            try:
                values[section][key] = parse(raw)
            except ValueError as exc:
                raise ConfigError(name, str(exc)) from None
    return RunConfig(values, Path(base_dir))


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror or exc}") from exc
    return parse_config(text, path.parent)
