"""Strict JSON run configuration.

Every section maps onto one of the library's value types and is validated by
constructing it.  Unknown keys are rejected so that the effective-config
sidecar written next to each output is a complete record of the run.

Layout (all sections except ``fiber`` and ``grid`` are optional)::

    {
      "fiber":      {"length_m", "core_diameter_m", "numerical_aperture",
                     "core_count", "pitch_m", "core_index"},
      "source":     {"center_nm", "linewidth_nm", "incidence_deg"},
      "grid":       {"start_nm", "step_nm", "count"},
      "camera":     {"patch_size_px", "pitch_px", "gain", "detection_linewidth_nm"},
      "clustering": {"eps", "min_pts", "intensity_threshold"},
      "solver":     {"tolerance", "max_iterations"},
      "experiments": {"ratios", "counts", "noise_levels", "n_lines", "ratio",
                      "letters", "composite_ratio"},
      "seeds":      {"simulate", "experiment"},
      "paths":      {"output"}
    }
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .clustering import DbscanParams
from .errors import ConfigError
from .experiments import (
    NOISE_LEVELS,
    SAMPLING_RATIOS,
    SPARSITY_COUNTS,
    BenchConfig,
)
from .optics import MAX_INCIDENCE_DEG, FiberSpec, SourceModel, WavelengthGrid
from .solver import DEFAULT_TOLERANCE

DEFAULT_LETTERS = "ABCDEFGHJKLMNPRS"


@dataclass(frozen=True)
class GridConfig:
    start_nm: float
    step_nm: float
    count: int

    def __post_init__(self) -> None:
        if not self.start_nm > 0:
            raise ValueError("start_nm must be positive")
        if not self.step_nm > 0:
            raise ValueError("step_nm must be positive")
        if self.count < 1:
            raise ValueError("count must be at least 1")

    def build(self) -> WavelengthGrid:
        return WavelengthGrid.uniform(self.start_nm, self.step_nm, self.count)


@dataclass(frozen=True)
class SourceConfig:
    center_nm: float | None = None  # None: middle of the grid
    linewidth_nm: float = 0.0
    incidence_deg: float = 3.5

    def __post_init__(self) -> None:
        if not 0 <= self.incidence_deg < MAX_INCIDENCE_DEG:
            raise ValueError(
                f"incidence_deg must lie in [0, {MAX_INCIDENCE_DEG}) degrees "
                f"(cores couple above {MAX_INCIDENCE_DEG} degrees incidence)"
            )
        SourceModel(self.center_nm if self.center_nm is not None else 1.0, self.linewidth_nm, self.incidence_deg)


@dataclass(frozen=True)
class CameraConfig:
    patch_size_px: int = 20
    pitch_px: float = 30.0
    gain: float = 600.0
    detection_linewidth_nm: float = 20.0

    def __post_init__(self) -> None:
        if self.patch_size_px < 4 or self.patch_size_px % 2:
            raise ValueError("patch_size_px must be an even integer >= 4")
        if not self.pitch_px >= self.patch_size_px:
            raise ValueError("pitch_px must be at least patch_size_px")
        if not self.gain > 0:
            raise ValueError("gain must be positive")
        if not self.detection_linewidth_nm >= 0:
            raise ValueError("detection_linewidth_nm must be non-negative")


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = DEFAULT_TOLERANCE
    max_iterations: int | None = None

    def __post_init__(self) -> None:
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass(frozen=True)
class ExperimentConfig:
    ratios: tuple[float, ...] = SAMPLING_RATIOS
    counts: tuple[int, ...] = SPARSITY_COUNTS
    noise_levels: tuple[float, ...] = NOISE_LEVELS
    n_lines: int = 1
    ratio: float = 1.1
    letters: str = DEFAULT_LETTERS
    composite_ratio: float = 4.0

    def __post_init__(self) -> None:
        for name in ("ratios", "counts", "noise_levels"):
            if not getattr(self, name):
                raise ValueError(f"{name} must not be empty")
        if any(not r > 0 for r in self.ratios) or not self.ratio > 0 or not self.composite_ratio > 0:
            raise ValueError("ratios must be positive")
        if any(c < 1 for c in self.counts) or self.n_lines < 1:
            raise ValueError("counts must be at least 1")
        if any(not 0 <= n <= 1 for n in self.noise_levels):
            raise ValueError("noise_levels must lie in [0, 1]")
        if not self.letters:
            raise ValueError("letters must not be empty")


@dataclass(frozen=True)
class SeedConfig:
    simulate: int = 0
    experiment: int = 0


@dataclass(frozen=True)
class PathConfig:
    output: str = "out"


@dataclass(frozen=True)
class RunConfig:
    fiber: FiberSpec
    grid: GridConfig
    source: SourceConfig = field(default_factory=SourceConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    clustering: DbscanParams = field(default_factory=DbscanParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    experiments: ExperimentConfig = field(default_factory=ExperimentConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def wavelength_grid(self) -> WavelengthGrid:
        return self.grid.build()

    def source_model(self) -> SourceModel:
        s = self.source
        centre = s.center_nm
        if centre is None:
            values = self.wavelength_grid().values_nm
            centre = float(values[len(values) // 2])
        return SourceModel(centre, s.linewidth_nm, s.incidence_deg)

    def bench_config(self) -> BenchConfig:
        c = self.camera
        return BenchConfig(
            self.wavelength_grid(), self.fiber, c.patch_size_px, c.pitch_px,
            self.source.incidence_deg, c.gain, self.clustering, c.detection_linewidth_nm,
            self.seeds.simulate,
        )

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seeds=SeedConfig(seed, seed))

    def to_json(self) -> dict:
        return {f.name: _plain(asdict(getattr(self, f.name))) for f in fields(self)}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_SECTIONS = {
    "fiber": FiberSpec,
    "grid": GridConfig,
    "source": SourceConfig,
    "camera": CameraConfig,
    "clustering": DbscanParams,
    "solver": SolverConfig,
    "experiments": ExperimentConfig,
    "seeds": SeedConfig,
    "paths": PathConfig,
}
_REQUIRED = ("fiber", "grid")
_INTS = {"core_count", "count", "patch_size_px", "min_pts", "max_iterations", "n_lines", "simulate", "experiment"}
_STRS = {"output", "letters"}
_SEQS = {"ratios": float, "counts": int, "noise_levels": float}
_NULLABLE = {"center_nm", "intensity_threshold", "max_iterations"}


def _coerce(key: str, name: str, value):
    if value is None:
        if name in _NULLABLE:
            return None
        raise ConfigError(key, "must not be null")
    if name in _STRS:
        if not isinstance(value, str):
            raise ConfigError(key, "must be a string")
        return value
    if name in _SEQS:
        if not isinstance(value, list):
            raise ConfigError(key, "must be a list")
        return tuple(_coerce(f"{key}[{i}]", "" if _SEQS[name] is float else "count", v) for i, v in enumerate(value))
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, "must be a number")
    if not math.isfinite(value):
        raise ConfigError(key, "must be finite")
    if name in _INTS:
        if int(value) != value:
            raise ConfigError(key, "must be an integer")
        return int(value)
    return float(value)


def _section(name: str, data) -> object:
    cls = _SECTIONS[name]
    if not isinstance(data, dict):
        raise ConfigError(name, "must be an object")
    known = {f.name for f in fields(cls)}
    for k in data:
        if k not in known:
            raise ConfigError(f"{name}.{k}", f"unknown key (expected one of: {', '.join(sorted(known))})")
    kwargs = {k: _coerce(f"{name}.{k}", k, v) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(name, f"missing required field ({exc})") from None
    except ValueError as exc:
        msg = str(exc)
        first = msg.split()[0] if msg else ""
        key = f"{name}.{first}" if first in known else name
        raise ConfigError(key, msg) from None


def parse_config(data) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for k in data:
        if k not in _SECTIONS:
            raise ConfigError(k, f"unknown section (expected one of: {', '.join(_SECTIONS)})")
    for k in _REQUIRED:
        if k not in data:
            raise ConfigError(k, "required section is missing")
    return RunConfig(**{k: _section(k, v) for k, v in data.items()})


def load_config(path: str | Path) -> RunConfig:
    """Read, validate and fill defaults for a run configuration."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from None
    return parse_config(data)


def write_effective_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_json(), indent=2, sort_keys=True) + "\n")
