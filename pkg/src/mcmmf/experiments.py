"""Reconstruction studies run against the simulator.

A :class:`Bench` holds everything a study needs: a rendered bundle, the core
map detected on it, and a full-AOI STM.  Scenes are rendered by incoherent
superposition of the per-channel speckle patches, so a scene frame is exactly
what the camera would record under a multi-line source.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .clustering import CoreMap, DbscanParams, extract_core_map
from .errors import CorrelationError
from .frames import SpeckleFrame, quantize, write_pgm
from .glyphs import FULL_BLOCK, rasterize_letter
from .optics import (
    DEFAULT_GAIN,
    FiberSpec,
    SourceModel,
    WavelengthGrid,
    build_core_model,
    hex_layout,
    patch_stack,
    place_patches,
    render_bundle,
)
from .solver import DEFAULT_TOLERANCE, solve_core
from .stm import Stm, calibrate, extract_pixel_vector, subsample

log = logging.getLogger(__name__)

SAMPLING_RATIOS = (0.14, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.6, 0.8, 1.0, 1.5, 2.0)
SPARSITY_RATIOS = (0.84, 1.1, 2.0)
SPARSITY_COUNTS = (1, 5, 10, 15, 20, 25, 30, 35, 40, 43)
NOISE_LEVELS = tuple(round(0.05 * k, 2) for k in range(11))
AMPLITUDE_RANGE = (0.2, 1.0)
DETECTION_LINEWIDTH_NM = 20.0


def pearson(u, v) -> float:
    """Sample Pearson correlation.

    A constant vector against a non-constant one gives 0 (no linear
    relationship); two constant vectors raise :class:`CorrelationError`.
    """
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if u.size != v.size or u.size < 2:
        raise ValueError("pearson needs two vectors of equal length >= 2")
    du, dv = u - u.mean(), v - v.mean()
    su, sv = math.sqrt(du @ du), math.sqrt(dv @ dv)
    if su == 0 and sv == 0:
        raise CorrelationError("correlation of two constant vectors is undefined")
    if su == 0 or sv == 0:
        return 0.0
    return float(np.clip((du @ dv) / (su * sv), -1.0, 1.0))


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "iid_uniform"
    relative_strength: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind != "iid_uniform":
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0 <= self.relative_strength <= 1:
            raise ValueError("relative_strength must lie in [0, 1]")


def add_noise(vector, noise: NoiseModel, stream: Sequence[int] = ()) -> np.ndarray:
    """Add i.i.d. Uniform[0, strength * mean(vector)] to every entry.

    ``stream`` selects an independent, reproducible draw for a given seed.
    """
    v = np.asarray(vector)
    if noise.relative_strength == 0:
        return v.copy()
    rng = np.random.default_rng([int(noise.seed), *map(int, stream)])
    top = noise.relative_strength * float(v.mean())
    return (v + rng.uniform(0.0, 1.0, v.shape) * top).astype(v.dtype, copy=False)


@dataclass(frozen=True, eq=False)
class Scene:
    """Ground-truth spectra, one row per physical core."""

    grid: WavelengthGrid
    spectra: np.ndarray  # (cores, X)
    label: str = ""

    def __post_init__(self) -> None:
        s = np.asarray(self.spectra, dtype=float)
        if s.ndim != 2 or s.shape[1] != len(self.grid):
            raise ValueError(f"spectra must be (cores, {len(self.grid)})")
        if np.any(s < 0):
            raise ValueError("spectra must be nonnegative")
        object.__setattr__(self, "spectra", s)


@dataclass(frozen=True, eq=False)
class SweepResult:
    axis_name: str
    axis: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_cores: np.ndarray
    seed: int
    label: str = ""

    def rows(self):
        for a, m, s, n in zip(self.axis, self.mean, self.std, self.n_cores):
            yield a, m, s, n


def write_sweep_csv(path: str | Path, result: SweepResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "mean_corr", "std_corr", "n_cores", "seed"])
        for a, m, s, n in result.rows():
            w.writerow([repr(float(a)), f"{m:.9f}", f"{s:.9f}", int(n), result.seed])


def sparse_spectra(rng: np.random.Generator, n_cores: int, n_channels: int, n_lines: int) -> np.ndarray:
    """Random nonnegative spectra with exactly ``n_lines`` nonzero channels."""
    if not 1 <= n_lines <= n_channels:
        raise ValueError(f"n_lines must lie in [1, {n_channels}]")
    out = np.zeros((n_cores, n_channels))
    lo, hi = AMPLITUDE_RANGE
    for c in range(n_cores):
        support = rng.choice(n_channels, n_lines, replace=False)
        out[c, support] = rng.uniform(lo, hi, n_lines)
    return out


def broaden_truth(spectra: np.ndarray, linewidth_nm: float, step_nm: float) -> np.ndarray:
    """Ground truth for a source wider than the grid step: a 3-channel triangle."""
    s = np.asarray(spectra, dtype=float)
    if linewidth_nm <= step_nm:
        return s.copy()
    out = s.copy()
    out[..., 1:] += 0.5 * s[..., :-1]
    out[..., :-1] += 0.5 * s[..., 1:]
    return out


@dataclass(frozen=True)
class BenchConfig:
    grid: WavelengthGrid
    fiber: FiberSpec = field(
        default_factory=lambda: FiberSpec(0.3085, 50e-6, 0.06, 200, 75e-6)
    )
    patch_size_px: int = 20
    pitch_px: float = 30.0
    incidence_deg: float = 3.5
    gain: float = DEFAULT_GAIN
    clustering: DbscanParams = DbscanParams()
    detection_linewidth_nm: float = DETECTION_LINEWIDTH_NM
    seed: int = 0

    @classmethod
    def sweeps(cls, seed: int = 0, core_count: int = 200) -> "BenchConfig":
        fiber = FiberSpec(0.3085, 50e-6, 0.06, core_count, 75e-6)
        return cls(WavelengthGrid.spanning(609.0, 694.0, 43), fiber, seed=seed)

    @classmethod
    def letters(cls, seed: int = 0, core_count: int = 200) -> "BenchConfig":
        fiber = FiberSpec(0.3085, 50e-6, 0.06, core_count, 75e-6)
        grid = WavelengthGrid.uniform(654.0, 0.4, 111)
        return cls(grid, fiber, patch_size_px=24, pitch_px=36.0, seed=seed)


def core_seed(seed: int, core: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(core)]).generate_state(1)[0])


@dataclass(frozen=True, eq=False)
class Bench:
    """A simulated instrument with its detected core map and calibrated STM.

    ``stacks[c, j]`` is the noiseless intensity patch of physical core ``c``
    at grid channel ``j``.  ``truth_index[k]`` is the physical core that site
    ``k`` of ``core_map`` was matched to.
    """

    config: BenchConfig
    centroids: np.ndarray
    frame_shape: tuple[int, int]
    stacks: np.ndarray
    detection_frame: SpeckleFrame
    core_map: CoreMap
    stm: Stm
    truth_index: np.ndarray

    @property
    def grid(self) -> WavelengthGrid:
        return self.config.grid

    def render(self, spectra: np.ndarray, gain: float | None = None) -> SpeckleFrame:
        """Camera frame for per-core spectra ``(cores, X)``.

        Without an explicit gain the exposure is set so that the brightest
        core has the calibration frames' mean level.
        """
        spectra = np.asarray(spectra, dtype=np.float32)
        if gain is None:
            peak = float(spectra.sum(axis=1).max())
            gain = self.config.gain / peak if peak > 0 else self.config.gain
        patches = np.einsum("cx,cxpq->cpq", spectra, self.stacks, dtype=np.float64)
        origins = _origins(self.centroids, self.config.patch_size_px)
        return SpeckleFrame(quantize(gain * place_patches(patches, origins, self.frame_shape)))

    def calibration_frames(self) -> list[SpeckleFrame]:
        eye = np.eye(len(self.grid), dtype=np.float32)
        return [self.render(np.broadcast_to(eye[j], (len(self.stacks), len(eye))), self.config.gain) for j in range(len(eye))]

    def truth_rows(self, spectra: np.ndarray, stm: Stm | None = None) -> np.ndarray:
        """Rows of ``spectra`` in the order of ``stm``'s cores."""
        stm = stm or self.stm
        pos = {s.id: k for k, s in enumerate(self.core_map.sites)}
        return np.asarray(spectra)[[self.truth_index[pos[c.id]] for c in stm.cores]]


def _origins(centroids: np.ndarray, size: int) -> np.ndarray:
    return np.rint(np.asarray(centroids) - (size - 1) / 2.0).astype(int)


def match_sites(detected: np.ndarray, truth: np.ndarray, max_distance: float) -> np.ndarray:
    """Nearest true core for every detected centroid, -1 when none is close."""
    if len(detected) == 0:
        return np.empty(0, dtype=np.int64)
    d = np.sqrt(((detected[:, None, :] - truth[None, :, :]) ** 2).sum(-1))
    best = d.argmin(axis=1)
    return np.where(d[np.arange(len(best)), best] <= max_distance, best, -1)


def bundle_models(config: BenchConfig):
    """Layout and per-core models of the simulated bundle."""
    fiber, grid = config.fiber, config.grid
    layout = hex_layout(fiber.core_count, config.pitch_px, config.patch_size_px)
    source = SourceModel(float(grid.values_nm[len(grid) // 2]), 0.0, config.incidence_deg)
    models = [
        build_core_model(fiber, source, config.patch_size_px, core_seed(config.seed, c))
        for c in range(fiber.core_count)
    ]
    return layout, models


def detection_frame(config: BenchConfig, layout, models) -> SpeckleFrame:
    """Broadband frame of the fully lit bundle; its speckle is smooth enough
    for stable centroids."""
    centre = float(config.grid.values_nm[len(config.grid) // 2])
    broadband = SourceModel(centre, config.detection_linewidth_nm, config.incidence_deg)
    return render_bundle(
        config.fiber, models, layout.centroids, broadband, np.ones(len(models)),
        frame_shape=layout.frame_shape, gain=config.gain,
    )


def build_bench(config: BenchConfig) -> Bench:
    """Simulate the bundle, detect its cores and calibrate a full-AOI STM."""
    fiber, grid, size = config.fiber, config.grid, config.patch_size_px
    layout, models = bundle_models(config)
    stacks = np.empty((fiber.core_count, len(grid), size, size), dtype=np.float32)
    for c, model in enumerate(models):
        stacks[c] = patch_stack(model, fiber, grid.values_nm, config.incidence_deg)
    detection = detection_frame(config, layout, models)
    del models
    core_map = extract_core_map(detection, config.clustering, size)
    match = match_sites(core_map.centroids, layout.centroids, config.pitch_px / 2)
    usable = [s for s, m in zip(core_map.sites, match) if m >= 0 and not s.clipped]
    if len(usable) < len(core_map):
        log.warning("%d detected sites are clipped or unmatched and are excluded", len(core_map) - len(usable))
    core_map = CoreMap(tuple(usable), core_map.frame_dims, core_map.warning)
    match = match_sites(core_map.centroids, layout.centroids, config.pitch_px / 2)
    bench = Bench(config, layout.centroids, layout.frame_shape, stacks, detection, core_map, None, match)
    stm = calibrate(bench.calibration_frames(), core_map, size * size, grid)
    object.__setattr__(bench, "stm", stm)
    return bench


def _solve_scores(
    stm: Stm,
    frame: SpeckleFrame,
    truth: np.ndarray,
    noise: NoiseModel | None,
    stream: Sequence[int],
    tolerance: float,
    workers: int,
) -> np.ndarray:
    """Per-core Pearson correlation between reconstruction and truth."""

    def job(k: int) -> float:
        core = stm.cores[k]
        y = extract_pixel_vector(frame, stm, core.id)
        if noise is not None:
            y = add_noise(y, noise, (*stream, core.id))
        sol = solve_core(core, y, tolerance)
        if not sol.ok:
            log.warning("core %d failed (%s); scored as 0", core.id, sol.error)
            return 0.0
        return pearson(truth[k], sol.x)

    idx = range(len(stm.cores))
    if workers == 1:
        return np.array([job(k) for k in idx])
    with ThreadPoolExecutor(max_workers=workers or None) as pool:
        return np.array(list(pool.map(job, idx)))


def _aggregate(axis_name, axis, scores, seed, label) -> SweepResult:
    return SweepResult(
        axis_name,
        np.asarray(axis, dtype=float),
        np.array([s.mean() for s in scores]),
        np.array([s.std() for s in scores]),
        np.array([s.size for s in scores]),
        int(seed),
        label,
    )


def sweep_sampling(
    bench: Bench,
    n_lines: int,
    ratios: Sequence[float] = SAMPLING_RATIOS,
    seed: int = 0,
    *,
    tolerance: float = DEFAULT_TOLERANCE,
    workers: int = 1,
) -> SweepResult:
    """Correlation against truth as the number of sampled pixels grows.

    One random ``n_lines``-sparse scene is rendered and reused for every
    ratio, so differences between points come from sampling alone.
    """
    rng = np.random.default_rng([int(seed), 1, n_lines])
    spectra = sparse_spectra(rng, len(bench.stacks), len(bench.grid), n_lines)
    frame = bench.render(spectra)
    truth = bench.truth_rows(spectra)
    scores = []
    for r in ratios:
        stm = subsample(bench.stm, r, seed)
        scores.append(_solve_scores(stm, frame, truth, None, (), tolerance, workers))
    return _aggregate("ratio", ratios, scores, seed, f"n_lines={n_lines}")


def sweep_sparsity(
    bench: Bench,
    ratio: float,
    counts: Sequence[int] = SPARSITY_COUNTS,
    seed: int = 0,
    *,
    tolerance: float = DEFAULT_TOLERANCE,
    workers: int = 1,
) -> SweepResult:
    stm = subsample(bench.stm, ratio, seed)
    scores = []
    for n in counts:
        rng = np.random.default_rng([int(seed), 2, int(n)])
        spectra = sparse_spectra(rng, len(bench.stacks), len(bench.grid), int(n))
        frame = bench.render(spectra)
        scores.append(_solve_scores(stm, frame, bench.truth_rows(spectra), None, (), tolerance, workers))
    return _aggregate("n_lines", counts, scores, seed, f"ratio={ratio}")


def sweep_noise(
    bench: Bench,
    ratio: float,
    levels: Sequence[float] = NOISE_LEVELS,
    seed: int = 0,
    *,
    tolerance: float = DEFAULT_TOLERANCE,
    workers: int = 1,
) -> SweepResult:
    """Single-line scenes with i.i.d. uniform noise added to the pixel vectors."""
    rng = np.random.default_rng([int(seed), 3])
    spectra = sparse_spectra(rng, len(bench.stacks), len(bench.grid), 1)
    frame = bench.render(spectra)
    truth = bench.truth_rows(spectra)
    stm = subsample(bench.stm, ratio, seed)
    scores = []
    for i, level in enumerate(levels):
        noise = NoiseModel("iid_uniform", float(level), seed)
        scores.append(_solve_scores(stm, frame, truth, noise, (i,), tolerance, workers))
    return _aggregate("noise", levels, scores, seed, f"ratio={ratio}")


def assemble_image(
    values: Mapping[int, float],
    core_map: CoreMap,
    diameter_px: float | None = None,
) -> np.ndarray:
    """Splat each core's value as a hard-edged disk at its centroid.

    ``diameter_px`` defaults to the AOI width, i.e. one core diameter at the
    camera's magnification.  Cores without a value stay dark.
    """
    w, h = core_map.frame_dims
    out = np.zeros((h, w))
    if not core_map.sites:
        return out
    if diameter_px is None:
        diameter_px = max(s.aoi[2] for s in core_map.sites)
    r = diameter_px / 2.0
    for s in core_map.sites:
        v = values.get(s.id)
        if not v:
            continue
        x0, x1 = max(int(math.floor(s.cx - r)), 0), min(int(math.ceil(s.cx + r)) + 1, w)
        y0, y1 = max(int(math.floor(s.cy - r)), 0), min(int(math.ceil(s.cy + r)) + 1, h)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        disk = (xs - s.cx) ** 2 + (ys - s.cy) ** 2 <= r * r
        out[y0:y1, x0:x1][disk] += v
    return out


def _map_correlation(a: np.ndarray, b: np.ndarray) -> float:
    try:
        return pearson(a, b)
    except CorrelationError:
        return 0.0


def _solve_all(stm: Stm, frame: SpeckleFrame, tolerance: float, workers: int) -> np.ndarray:
    def job(core):
        sol = solve_core(core, extract_pixel_vector(frame, stm, core.id), tolerance)
        if not sol.ok:
            log.warning("core %d failed (%s); spectrum set to 0", core.id, sol.error)
            return np.zeros(stm.channel_count)
        return sol.x

    if workers == 1:
        return np.stack([job(c) for c in stm.cores])
    with ThreadPoolExecutor(max_workers=workers or None) as pool:
        return np.stack(list(pool.map(job, stm.cores)))


def letter_channels(count: int = 16, first: int = 3, spacing: int = 7) -> list[int]:
    return [first + spacing * k for k in range(count)]


@dataclass(frozen=True, eq=False)
class CompositeResult:
    """Outcome of reconstructing a superposition of letters.

    ``crosstalk[i, j]`` is the mean reconstructed intensity at letter ``j``'s
    channel over cores lit by letter ``i`` but not by letter ``j`` (diagonal:
    over all cores lit by letter ``i``).
    """

    glyphs: tuple[str, ...]
    channels: tuple[int, ...]
    grid: WavelengthGrid
    core_map: CoreMap
    core_ids: tuple[int, ...]
    weights: np.ndarray  # (letters, cores)
    spectra: np.ndarray  # (cores, X)
    maps: np.ndarray  # (letters, h, w)
    truth_maps: np.ndarray
    correlations: np.ndarray
    crosstalk: np.ndarray

    def crosstalk_fraction(self) -> np.ndarray:
        diag = np.diag(self.crosstalk)
        off = self.crosstalk.sum(axis=1) - diag
        return np.where(diag > 0, off / np.where(diag > 0, diag, 1), np.inf)


def _letter_weights(glyphs, core_map, ids):
    pos = {s.id: k for k, s in enumerate(core_map.sites)}
    w = np.stack([rasterize_letter(g, core_map) for g in glyphs])
    return w[:, [pos[i] for i in ids]]


def _crosstalk(weights: np.ndarray, spectra: np.ndarray, channels: Sequence[int]) -> np.ndarray:
    lit = weights > 0
    n = len(channels)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            sel = lit[i] if i == j else lit[i] & ~lit[j]
            out[i, j] = spectra[sel, channels[j]].mean() if sel.any() else 0.0
    return out


def run_composite(
    bench: Bench,
    glyphs: Sequence[str],
    channels: Sequence[int],
    ratio: float = 4.0,
    seed: int = 0,
    *,
    tolerance: float = DEFAULT_TOLERANCE,
    workers: int = 1,
) -> CompositeResult:
    """Render a superposition of letters, each at its own channel, solve once.

    A core's ground-truth spectrum holds the coverage weight of every letter
    that falls on it, at that letter's channel.
    """
    if len(glyphs) != len(channels):
        raise ValueError("need one channel per glyph")
    if len(set(channels)) != len(channels):
        raise ValueError("channels must be distinct")
    x = len(bench.grid)
    if any(not 0 <= c < x for c in channels):
        raise ValueError(f"channels must lie in [0, {x})")
    cmap = bench.core_map
    true_weights = np.zeros((len(glyphs), len(bench.stacks)))
    site_weights = np.stack([rasterize_letter(g, cmap) for g in glyphs])
    true_weights[:, bench.truth_index] = site_weights
    spectra = np.zeros((len(bench.stacks), x))
    for k, c in enumerate(channels):
        spectra[:, c] += true_weights[k]
    frame = bench.render(spectra)
    stm = subsample(bench.stm, ratio, seed)
    recon = _solve_all(stm, frame, tolerance, workers)
    ids = tuple(c.id for c in stm.cores)
    weights = _letter_weights(glyphs, cmap, ids)
    maps, truth_maps, corrs = [], [], []
    for k, c in enumerate(channels):
        m = assemble_image(dict(zip(ids, recon[:, c])), cmap)
        t = assemble_image(dict(zip(ids, weights[k])), cmap)
        maps.append(m)
        truth_maps.append(t)
        corrs.append(_map_correlation(m, t))
    return CompositeResult(
        tuple(glyphs), tuple(int(c) for c in channels), bench.grid, cmap, ids, weights, recon,
        np.stack(maps), np.stack(truth_maps), np.array(corrs), _crosstalk(weights, recon, channels),
    )


def glyph_label(glyph: str) -> str:
    return "BLOCK" if glyph == FULL_BLOCK else glyph.upper()


def write_composite(result: CompositeResult, out_dir: str | Path) -> list[Path]:
    """Write one PGM map per letter, the cross-talk matrix and the spectra.

    Maps share one intensity scale so their brightness is comparable.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    peak = float(result.maps.max())
    scale = 4095.0 / peak if peak > 0 else 0.0
    for g, c, m in zip(result.glyphs, result.channels, result.maps):
        lam = result.grid.values_nm[c]
        path = out / f"{glyph_label(g)}_{lam:.1f}.pgm"
        write_pgm(path, SpeckleFrame(quantize(m * scale)))
        written.append(path)
    path = out / "crosstalk.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["letter", "channel_nm", *[glyph_label(g) for g in result.glyphs]])
        for g, c, row in zip(result.glyphs, result.channels, result.crosstalk):
            w.writerow([glyph_label(g), f"{result.grid.values_nm[c]:.1f}", *[f"{v:.9g}" for v in row]])
    written.append(path)
    path = out / "spectra.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["core_id", "wavelength_nm", "intensity"])
        for cid, row in zip(result.core_ids, result.spectra):
            for lam, v in zip(result.grid.values_nm, row):
                w.writerow([cid, f"{lam:.4f}", f"{v:.9g}"])
    written.append(path)
    return written


@dataclass(frozen=True, eq=False)
class LetterResult:
    """Single letter at one channel.

    Energies are linear: the integrated intensity of a channel's map, which
    is proportional to the sum of that channel over all cores.
    """

    glyph: str
    channel: int
    ratio: float
    spectra: np.ndarray
    on_map: np.ndarray
    truth_map: np.ndarray
    correlation: float
    channel_energy: np.ndarray

    @property
    def off_channel_fraction(self) -> float:
        """Energy outside the true channel and its two neighbours, relative to on-channel."""
        e = self.channel_energy
        near = slice(max(self.channel - 1, 0), self.channel + 2)
        off = e.sum() - e[near].sum()
        return float(off / e[self.channel]) if e[self.channel] > 0 else math.inf

    @property
    def peak_channel(self) -> int:
        return int(np.argmax(self.channel_energy))


def run_single_letter(
    bench: Bench,
    glyph: str,
    channel: int,
    ratio: float,
    seed: int = 0,
    *,
    tolerance: float = DEFAULT_TOLERANCE,
    workers: int = 1,
) -> LetterResult:
    res = run_composite(bench, [glyph], [channel], ratio, seed, tolerance=tolerance, workers=workers)
    energy = res.spectra.sum(axis=0)
    return LetterResult(
        glyph, int(channel), float(ratio), res.spectra, res.maps[0], res.truth_maps[0],
        float(res.correlations[0]), energy,
    )
