"""Forward model of a multicore multimode fiber imaged onto a 12-bit camera.

Each core is treated as an independent step-index multimode fiber.  Its output
field is a superposition of guided modes,

    E_pol(p) = sum_m c_m(theta) * a_{pol,m}(p) * exp(i 2 pi n_m L / lambda),

where ``n_m`` are effective indices spread uniformly over ``NA^2 / (2 n)``,
``a`` are band-limited random mode profiles on the camera patch, and the
excitation ``c_m(theta)`` depends on the incidence angle.  The camera sees
``sum_pol |E_pol|^2`` (no polariser).

The wavelength dependence lives entirely in the modal phases, so the speckle
decorrelates over roughly ``lambda^2 / (L * dn)``; the angle dependence lives
in the excitation window and in per-mode phase slopes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import CorrelationError, LayoutError
from .frames import SpeckleFrame, quantize

MAX_INCIDENCE_DEG = 4.5
DEFAULT_GAIN = 600.0  # camera counts per unit mean patch intensity
SPECKLE_PUPIL_RADIUS = 0.25  # cycles/pixel; gives grains of about 2x2 pixels
WINDOW_BASE = 0.35  # excitation window width (in mode labels) at normal incidence
WINDOW_REFERENCE_DEG = 3.5  # angle at which half the modes are excited
ANGLE_PHASE_SCALE = 3.6  # rad/deg, phase slope scale of the highest-order mode
LINEWIDTH_NODES = 5


@dataclass(frozen=True)
class FiberSpec:
    """Physical parameters of the fiber bundle (SI units)."""

    length_m: float
    core_diameter_m: float
    numerical_aperture: float
    core_count: int
    pitch_m: float
    core_index: float = 1.5

    def __post_init__(self) -> None:
        if not self.length_m > 0:
            raise ValueError("length_m must be positive")
        if not self.core_diameter_m > 0:
            raise ValueError("core_diameter_m must be positive")
        if not 0 < self.numerical_aperture < self.core_index:
            raise ValueError("numerical_aperture must lie in (0, core_index)")
        if not self.pitch_m >= self.core_diameter_m:
            raise ValueError("pitch_m must be at least core_diameter_m")
        if int(self.core_count) != self.core_count or self.core_count < 1:
            raise ValueError("core_count must be a positive integer")

    @property
    def index_spread(self) -> float:
        """Range of modal effective indices, NA^2 / (2 n)."""
        return self.numerical_aperture**2 / (2.0 * self.core_index)


@dataclass(frozen=True, eq=False)
class WavelengthGrid:
    values_nm: np.ndarray
    step_nm: float

    def __post_init__(self) -> None:
        v = np.array(self.values_nm, dtype=float).ravel()
        if v.size < 1:
            raise ValueError("wavelength grid must not be empty")
        if np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise ValueError("wavelengths must be positive and finite")
        if np.any(np.diff(v) <= 0):
            raise ValueError("wavelengths must be strictly increasing")
        v.setflags(write=False)
        object.__setattr__(self, "values_nm", v)
        object.__setattr__(self, "step_nm", float(self.step_nm))

    @classmethod
    def uniform(cls, start_nm: float, step_nm: float, count: int) -> "WavelengthGrid":
        # rounding keeps grid values free of accumulated float noise
        values = np.round(start_nm + step_nm * np.arange(count), 9)
        return cls(values, step_nm)

    @classmethod
    def spanning(cls, first_nm: float, last_nm: float, count: int) -> "WavelengthGrid":
        values = np.linspace(first_nm, last_nm, count)
        step = (last_nm - first_nm) / (count - 1) if count > 1 else 0.0
        return cls(values, step)

    def __len__(self) -> int:
        return self.values_nm.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WavelengthGrid):
            return NotImplemented
        return np.array_equal(self.values_nm, other.values_nm) and self.step_nm == other.step_nm


@dataclass(frozen=True)
class SourceModel:
    center_nm: float
    linewidth_nm: float = 0.0
    incidence_deg: float = WINDOW_REFERENCE_DEG

    def __post_init__(self) -> None:
        if not self.center_nm > 0:
            raise ValueError("center_nm must be positive")
        if not self.linewidth_nm >= 0:
            raise ValueError("linewidth_nm must be non-negative")
        if not 0 <= self.incidence_deg < MAX_INCIDENCE_DEG:
            raise ValueError(
                f"incidence_deg must lie in [0, {MAX_INCIDENCE_DEG}) degrees; "
                "neighbouring cores couple evanescently beyond that"
            )


@dataclass(frozen=True, eq=False)
class CoreModel:
    """Random modal decomposition of one fiber core.

    ``mode_fields`` has shape ``(modes, 2, patch, patch)``: one complex profile
    per mode and polarisation channel.
    """

    mode_indices: np.ndarray
    mode_fields: np.ndarray
    mode_phases: np.ndarray
    angle_rates: np.ndarray
    window_slope: float
    incidence_deg: float
    patch_size_px: int
    seed: int

    @property
    def mode_count(self) -> int:
        return int(self.mode_indices.size)

    def window_width(self, theta_deg: float) -> float:
        return WINDOW_BASE + self.window_slope * abs(theta_deg)

    def excitation(self, theta_deg: float | None = None) -> np.ndarray:
        """Normalised modal power weights at the given incidence angle."""
        theta = self.incidence_deg if theta_deg is None else theta_deg
        return _window(self.mode_count, self.window_width(theta))

    def participation_ratio(self, theta_deg: float | None = None) -> float:
        p = self.excitation(theta_deg)
        return float(p.sum() ** 2 / np.sum(p**2))

    def coupling(self, theta_deg: float | None = None) -> np.ndarray:
        theta = self.incidence_deg if theta_deg is None else theta_deg
        amp = np.sqrt(self.excitation(theta))
        return amp * np.exp(1j * (self.mode_phases + self.angle_rates * theta))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CoreModel):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.patch_size_px == other.patch_size_px
            and self.incidence_deg == other.incidence_deg
            and self.window_slope == other.window_slope
            and np.array_equal(self.mode_indices, other.mode_indices)
            and np.array_equal(self.mode_fields, other.mode_fields)
            and np.array_equal(self.mode_phases, other.mode_phases)
            and np.array_equal(self.angle_rates, other.angle_rates)
        )


@dataclass(frozen=True)
class CorrelationCurve:
    offsets: np.ndarray
    values: np.ndarray
    fwhm: float | None = field(default=None)


def mode_count(spec: FiberSpec, wavelength_nm: float) -> int:
    """Number of guided modes of a step-index core, ``(4/pi^2) V^2``, at least 1."""
    if not wavelength_nm > 0:
        raise ValueError("wavelength_nm must be positive")
    v = math.pi * spec.core_diameter_m * spec.numerical_aperture / (wavelength_nm * 1e-9)
    return max(1, int(round(4.0 / math.pi**2 * v * v)))


def _window(n_modes: int, width: float) -> np.ndarray:
    m = np.arange(n_modes, dtype=float)
    p = np.exp(-0.5 * (m / width) ** 2)
    return p / p.sum()


def _participation(n_modes: int, width: float) -> float:
    p = _window(n_modes, width)
    return float(p.sum() ** 2 / np.sum(p**2))


def _window_slope(n_modes: int) -> float:
    """Window growth per degree so that half the modes are excited at 3.5 deg."""
    target = 0.5 * n_modes
    if _participation(n_modes, WINDOW_BASE) >= target:
        return 0.0
    lo, hi = WINDOW_BASE, 10.0 * n_modes
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _participation(n_modes, mid) < target:
            lo = mid
        else:
            hi = mid
    return (0.5 * (lo + hi) - WINDOW_BASE) / WINDOW_REFERENCE_DEG


def _speckle_fields(rng: np.random.Generator, count: int, size: int) -> np.ndarray:
    """Complex Gaussian fields band-limited by a circular pupil, E|a|^2 = 1/2."""
    noise = rng.standard_normal((count, size, size)) + 1j * rng.standard_normal((count, size, size))
    f = np.fft.fftfreq(size)
    pupil = (f[:, None] ** 2 + f[None, :] ** 2) <= SPECKLE_PUPIL_RADIUS**2
    fields = np.fft.ifft2(np.fft.fft2(noise) * pupil)
    power = np.mean(np.abs(fields) ** 2, axis=(1, 2), keepdims=True)
    return fields / np.sqrt(2.0 * power)


def build_core_model(spec: FiberSpec, source: SourceModel, patch_size_px: int, seed: int) -> CoreModel:
    if int(patch_size_px) != patch_size_px or patch_size_px < 4:
        raise ValueError("patch_size_px must be an integer >= 4")
    n_modes = mode_count(spec, source.center_nm)
    rng = np.random.default_rng(seed)
    dn = spec.index_spread
    indices = rng.uniform(spec.core_index - dn, spec.core_index, n_modes)
    fields = _speckle_fields(rng, 2 * n_modes, int(patch_size_px))
    fields = fields.reshape(n_modes, 2, patch_size_px, patch_size_px).astype(np.complex64)
    phases = rng.uniform(0.0, 2.0 * np.pi, n_modes)
    order = np.sqrt((np.arange(n_modes) + 1.0) / n_modes)
    rates = ANGLE_PHASE_SCALE * order * rng.standard_normal(n_modes)
    return CoreModel(
        mode_indices=indices,
        mode_fields=fields,
        mode_phases=phases,
        angle_rates=rates,
        window_slope=_window_slope(n_modes),
        incidence_deg=float(source.incidence_deg),
        patch_size_px=int(patch_size_px),
        seed=int(seed),
    )


def linewidth_nodes(center_nm: float, linewidth_nm: float) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre wavelengths and weights spanning the source FWHM."""
    if linewidth_nm <= 0:
        return np.array([float(center_nm)]), np.array([1.0])
    x, w = leggauss(LINEWIDTH_NODES)
    return center_nm + 0.5 * linewidth_nm * x, 0.5 * w


def patch_stack(
    model: CoreModel,
    spec: FiberSpec,
    wavelengths_nm: Sequence[float] | np.ndarray,
    theta_deg: float | None = None,
    linewidth_nm: float = 0.0,
) -> np.ndarray:
    """Intensity patches for many wavelengths at once, shape ``(n, P, P)``."""
    lam = np.asarray(wavelengths_nm, dtype=float).ravel()
    if np.any(lam <= 0):
        raise ValueError("wavelengths must be positive")
    nodes, weights = linewidth_nodes(0.0, linewidth_nm)
    size = model.patch_size_px
    coupled = model.coupling(theta_deg)[:, None] * model.mode_fields.reshape(model.mode_count, -1)
    coupled = coupled.astype(np.complex64)
    out = np.zeros((lam.size, 2 * size * size))
    for offset, weight in zip(nodes, weights):
        phase = 2.0 * np.pi * spec.length_m * np.outer(1e9 / (lam + offset), model.mode_indices)
        field_ = np.exp(1j * phase).astype(np.complex64) @ coupled
        out += weight * (field_.real.astype(float) ** 2 + field_.imag.astype(float) ** 2)
    return out.reshape(lam.size, 2, size, size).sum(axis=1)


def synthesize_patch(
    model: CoreModel,
    spec: FiberSpec,
    wavelength_nm: float,
    theta_deg: float | None = None,
    linewidth_nm: float = 0.0,
) -> np.ndarray:
    """Speckle intensity of one core (mean about 1 per pixel)."""
    if not wavelength_nm > 0:
        raise ValueError("wavelength_nm must be positive")
    return patch_stack(model, spec, [wavelength_nm], theta_deg, linewidth_nm)[0]


@dataclass(frozen=True, eq=False)
class BundleLayout:
    """Where each core's patch lands on the camera.

    ``centroids`` are ``(x, y)`` pixel-centre coordinates of the patch centres.
    """

    centroids: np.ndarray
    frame_shape: tuple[int, int]
    patch_size_px: int

    @property
    def core_count(self) -> int:
        return len(self.centroids)

    def origins(self) -> np.ndarray:
        return patch_origins(self.centroids, self.patch_size_px)


def patch_origins(centroids: np.ndarray, patch_size_px: int) -> np.ndarray:
    half = (patch_size_px - 1) / 2.0
    return np.rint(np.asarray(centroids, dtype=float) - half).astype(int)


def hex_layout(core_count: int, pitch_px: float, patch_size_px: int, margin_px: int = 4) -> BundleLayout:
    """Hexagonal close packing of ``core_count`` cores, filled row by row in a
    roughly circular footprint around the bundle axis."""
    if core_count < 1:
        raise ValueError("core_count must be positive")
    if pitch_px < patch_size_px:
        raise ValueError("pitch_px must be at least the patch size")
    radius = int(math.ceil(math.sqrt(core_count))) + 2
    pts = []
    for row in range(-radius, radius + 1):
        for col in range(-radius, radius + 1):
            x = (col + 0.5 * (row & 1)) * pitch_px
            y = row * pitch_px * math.sqrt(3) / 2
            pts.append((x * x + y * y, row, col, x, y))
    pts.sort()
    chosen = np.array([(p[3], p[4]) for p in pts[:core_count]])
    half = (patch_size_px - 1) / 2.0
    chosen -= chosen.min(axis=0) - (margin_px + half)
    origins = patch_origins(chosen, patch_size_px)
    centroids = origins + half
    order = np.lexsort((centroids[:, 0], centroids[:, 1]))
    centroids = centroids[order]
    width = int(centroids[:, 0].max() + half + margin_px + 1)
    height = int(centroids[:, 1].max() + half + margin_px + 1)
    return BundleLayout(centroids, (height, width), int(patch_size_px))


def place_patches(patches: np.ndarray, origins: np.ndarray, frame_shape: tuple[int, int]) -> np.ndarray:
    """Composite ``(n, P, P)`` patches at integer origins onto a dark frame."""
    h, w = frame_shape
    size = patches.shape[-1]
    out = np.zeros((h, w))
    for patch, (x0, y0) in zip(patches, origins):
        if x0 < 0 or y0 < 0 or x0 + size > w or y0 + size > h:
            raise LayoutError(f"patch at origin ({x0}, {y0}) does not fit a {w}x{h} frame")
        out[y0 : y0 + size, x0 : x0 + size] += patch
    return out


def render_intensity(
    spec: FiberSpec,
    models: Sequence[CoreModel],
    centroids: np.ndarray,
    source: SourceModel,
    scene_weights: Sequence[float] | np.ndarray,
    *,
    frame_shape: tuple[int, int] | None = None,
    gain: float = DEFAULT_GAIN,
) -> np.ndarray:
    """Pre-quantisation frame in (fractional) camera counts."""
    centroids = np.asarray(centroids, dtype=float).reshape(-1, 2)
    weights = np.asarray(scene_weights, dtype=float).ravel()
    if not (len(models) == len(centroids) == weights.size):
        raise ValueError("need exactly one model, centroid and weight per core")
    if np.any(weights < 0) or np.any(weights > 1):
        raise ValueError("scene weights must lie in [0, 1]")
    sizes = {m.patch_size_px for m in models}
    if len(sizes) > 1:
        raise ValueError("all cores must share one patch size")
    size = sizes.pop() if sizes else 4
    origins = patch_origins(centroids, size)
    if frame_shape is None:
        ext = origins.max(axis=0) + size + 1 if len(origins) else np.array([size, size])
        frame_shape = (int(ext[1]), int(ext[0]))
    patches = np.zeros((len(models), size, size))
    for i, (model, wgt) in enumerate(zip(models, weights)):
        if wgt > 0:
            patches[i] = wgt * gain * synthesize_patch(
                model, spec, source.center_nm, source.incidence_deg, source.linewidth_nm
            )
    return place_patches(patches, origins, frame_shape)


def render_bundle(
    spec: FiberSpec,
    models: Sequence[CoreModel],
    centroids: np.ndarray,
    source: SourceModel,
    scene_weights: Sequence[float] | np.ndarray,
    *,
    frame_shape: tuple[int, int] | None = None,
    gain: float = DEFAULT_GAIN,
) -> SpeckleFrame:
    """Render the camera image of the bundle output under one source."""
    intensity = render_intensity(
        spec, models, centroids, source, scene_weights, frame_shape=frame_shape, gain=gain
    )
    return SpeckleFrame(quantize(intensity))


def _uniform_step(axis: Sequence[float] | np.ndarray, what: str) -> float:
    a = np.asarray(axis, dtype=float).ravel()
    if a.size < 3:
        raise ValueError(f"need at least 3 {what}")
    d = np.diff(a)
    if np.any(d <= 0) or not np.allclose(d, d[0], rtol=1e-6, atol=1e-9):
        raise ValueError(f"{what} must be uniformly spaced and increasing")
    return float(d[0])


def _correlation_curve(patches: np.ndarray, step: float, per_core: bool) -> CorrelationCurve:
    stack = np.asarray(patches, dtype=float)
    if per_core:
        # (scan, cores, ...) -> (cores, scan, pixels)
        stack = np.moveaxis(stack.reshape(stack.shape[0], stack.shape[1], -1), 1, 0)
    else:
        stack = stack.reshape(1, stack.shape[0], -1)
    n = stack.shape[1]
    means = stack.mean(axis=2)
    if np.any(means <= 0):
        raise CorrelationError("correlation undefined for dark patches")
    normed = stack / means[:, :, None]
    values = np.empty(n)
    for k in range(n):
        prod = np.mean(normed[:, : n - k] * normed[:, k:], axis=2)
        values[k] = np.mean(prod - 1.0)
    if values[0] <= 1e-12 * max(1.0, abs(values).max()):
        raise CorrelationError("correlation undefined for spatially constant patches")
    values = values / values[0]
    offsets = step * np.arange(n)
    below = np.flatnonzero(values < 0.5)
    if below.size == 0:
        raise CorrelationError("correlation never drops below half maximum; width undefined")
    k = below[0]
    frac = (values[k - 1] - 0.5) / (values[k - 1] - values[k])
    half = offsets[k - 1] + frac * step
    return CorrelationCurve(offsets, values, 2.0 * half)


def spectral_correlation(
    patches: np.ndarray, grid: WavelengthGrid | Sequence[float], *, per_core: bool = False
) -> CorrelationCurve:
    """Normalised intensity correlation versus wavelength offset.

    ``patches[i]`` is the intensity at ``grid[i]``.  With ``per_core`` the
    second axis indexes cores; each core is normalised by its own mean and the
    curves are averaged.
    """
    values = grid.values_nm if isinstance(grid, WavelengthGrid) else grid
    return _correlation_curve(patches, _uniform_step(values, "wavelengths"), per_core)


def angle_correlation(
    patches: np.ndarray, angles_deg: Sequence[float], *, per_core: bool = False
) -> CorrelationCurve:
    """As :func:`spectral_correlation`, over a uniform grid of incidence angles."""
    return _correlation_curve(patches, _uniform_step(angles_deg, "angles"), per_core)


def speckle_contrast(patches: np.ndarray) -> float:
    """Mean over patches of sigma_I / <I>."""
    flat = np.asarray(patches, dtype=float).reshape(len(patches), -1)
    return float(np.mean(flat.std(axis=1) / flat.mean(axis=1)))
