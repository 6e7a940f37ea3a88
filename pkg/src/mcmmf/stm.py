"""Spectral intensity transmission matrix: calibration, extraction, storage.

For every detected core, the STM holds a ``Y x X`` matrix whose column ``j``
is the core's AOI pixels (unwrapped in a fixed order) recorded under
calibration wavelength ``j``.  Counts are stored divided by the 12-bit
full scale, so entries lie in ``[0, 1]``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .clustering import CoreMap, CoreSite
from .errors import CalibrationError, FormatError
from .frames import MAX_COUNT, SpeckleFrame
from .optics import WavelengthGrid

log = logging.getLogger(__name__)

MAGIC = b"STM1"
VERSION = 1


@dataclass(frozen=True, eq=False)
class CoreMatrix:
    id: int
    cx: float
    cy: float
    pixels: np.ndarray  # (Y, 2) integer (x, y)
    matrix: np.ndarray  # (Y, X) float32

    def __post_init__(self) -> None:
        px = np.ascontiguousarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        mat = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if mat.ndim != 2 or mat.shape[0] != len(px):
            raise ValueError("matrix rows must match the pixel list")
        if len(px) < 1:
            raise ValueError("a core needs at least one pixel")
        px.setflags(write=False)
        mat.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "matrix", mat)

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CoreMatrix):
            return NotImplemented
        return (
            self.id == other.id
            and self.cx == other.cx
            and self.cy == other.cy
            and np.array_equal(self.pixels, other.pixels)
            and np.array_equal(self.matrix, other.matrix)
        )


@dataclass(frozen=True, eq=False)
class Stm:
    grid: WavelengthGrid
    cores: tuple[CoreMatrix, ...]
    skipped: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        ids = [c.id for c in self.cores]
        if len(set(ids)) != len(ids):
            raise ValueError("core ids must be unique")
        x = len(self.grid)
        for c in self.cores:
            if c.matrix.shape[1] != x:
                raise ValueError(f"core {c.id}: {c.matrix.shape[1]} columns, grid has {x}")
        object.__setattr__(self, "_index", {c.id: i for i, c in enumerate(self.cores)})

    @property
    def channel_count(self) -> int:
        return len(self.grid)

    @property
    def ids(self) -> list[int]:
        return [c.id for c in self.cores]

    def core(self, core_id: int) -> CoreMatrix:
        try:
            return self.cores[self._index[core_id]]
        except KeyError:
            raise KeyError(f"core id {core_id} is not in the STM") from None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Stm):
            return NotImplemented
        return np.array_equal(self.grid.values_nm, other.grid.values_nm) and self.cores == other.cores


def centered_pixels(site: CoreSite, count: int) -> np.ndarray:
    """The ``count`` AOI pixels closest to the centroid, in square rings.

    Ordering by Chebyshev distance first makes selections of increasing size
    nested, roughly square blocks.
    """
    x0, y0, w, h = site.aoi
    ys, xs = np.mgrid[y0 : y0 + h, x0 : x0 + w]
    xs, ys = xs.ravel(), ys.ravel()
    dx, dy = xs - site.cx, ys - site.cy
    cheb = np.round(np.maximum(np.abs(dx), np.abs(dy)), 9)
    eucl = np.round(dx * dx + dy * dy, 9)
    order = np.lexsort((xs, ys, eucl, cheb))[:count]
    return np.column_stack([xs[order], ys[order]])


def _read(frame: SpeckleFrame, pixels: np.ndarray) -> np.ndarray:
    return frame.values[pixels[:, 1], pixels[:, 0]].astype(np.float32) / np.float32(MAX_COUNT)


def calibrate(
    frames: Sequence[SpeckleFrame],
    core_map: CoreMap,
    pixels_per_core: int,
    grid: WavelengthGrid,
) -> Stm:
    """Assemble one ``Y x X`` matrix per core from one frame per grid wavelength."""
    if len(frames) != len(grid):
        raise CalibrationError(f"{len(frames)} frames for a {len(grid)}-wavelength grid")
    if int(pixels_per_core) != pixels_per_core or pixels_per_core < 1:
        raise CalibrationError("pixels_per_core must be a positive integer")
    w, h = core_map.frame_dims
    for f in frames:
        if (f.width, f.height) != (w, h):
            raise CalibrationError(f"frame is {f.width}x{f.height}, core map expects {w}x{h}")
    stack = np.stack([f.values for f in frames], axis=-1)  # (h, w, X)
    cores: list[CoreMatrix] = []
    skipped: list[int] = []
    for site in core_map.sites:
        area = site.aoi[2] * site.aoi[3]
        if area < pixels_per_core:
            skipped.append(site.id)
            continue
        px = centered_pixels(site, int(pixels_per_core))
        mat = stack[px[:, 1], px[:, 0], :].astype(np.float32) / np.float32(MAX_COUNT)
        cores.append(CoreMatrix(site.id, site.cx, site.cy, px, mat))
    if skipped:
        log.warning("skipped %d cores whose AOI holds fewer than %d pixels: %s", len(skipped), pixels_per_core, skipped)
    return Stm(grid, tuple(cores), tuple(skipped))


def extract_pixel_vector(frame: SpeckleFrame, stm: Stm, core_id: int) -> np.ndarray:
    """Read a core's calibrated pixels from a frame, normalised like the STM."""
    return _read(frame, stm.core(core_id).pixels)


def subsample(stm: Stm, ratio: float, seed: int) -> Stm:
    """Keep ``round(ratio * X)`` uniformly random rows of every core.

    The per-core choice is a prefix of a seeded permutation, so smaller ratios
    keep subsets of the rows kept at larger ones.
    """
    keep = int(round(ratio * stm.channel_count))
    if keep < 1:
        raise ValueError(f"ratio {ratio} keeps no rows for X={stm.channel_count}")
    cores = []
    for c in stm.cores:
        if keep > c.rows:
            raise ValueError(f"ratio {ratio} needs {keep} rows but core {c.id} has {c.rows}")
        if keep == c.rows:
            cores.append(c)
            continue
        rng = np.random.default_rng([int(seed), int(c.id)])
        rows = np.sort(rng.permutation(c.rows)[:keep])
        cores.append(CoreMatrix(c.id, c.cx, c.cy, c.pixels[rows], c.matrix[rows]))
    return Stm(stm.grid, tuple(cores), stm.skipped)


def encode_stm(stm: Stm) -> bytes:
    x = stm.channel_count
    parts = [MAGIC, struct.pack("<III", VERSION, len(stm.cores), x)]
    parts.append(np.asarray(stm.grid.values_nm, dtype="<f8").tobytes())
    for c in stm.cores:
        parts.append(struct.pack("<Idd", c.id, c.cx, c.cy))
        parts.append(struct.pack("<I", c.rows))
        parts.append(np.asarray(c.pixels, dtype="<u4").tobytes())
        parts.append(np.asarray(c.matrix, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated STM file while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        raw = self.take(np.dtype(dtype).itemsize * count, what)
        return np.frombuffer(raw, dtype=dtype).copy()


def decode_stm(data: bytes) -> Stm:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version, n_cores, x = r.unpack("<III", "header")
    if version != VERSION:
        raise FormatError(f"unsupported STM version {version}, expected {VERSION}", 4)
    if x < 1:
        raise FormatError("STM grid is empty", 12)
    values = r.array("<f8", x, "wavelength grid")
    step = float((values[-1] - values[0]) / (x - 1)) if x > 1 else 0.0
    try:
        grid = WavelengthGrid(values, step)
    except ValueError as exc:
        raise FormatError(f"invalid wavelength grid: {exc}", 16) from None
    cores = []
    for i in range(n_cores):
        start = r.pos
        cid, cx, cy = r.unpack("<Idd", f"core {i} header")
        (rows,) = r.unpack("<I", f"core {i} row count")
        if rows < 1:
            raise FormatError(f"core {cid} has no rows", start)
        px = r.array("<u4", 2 * rows, f"core {cid} pixels").astype(np.int64).reshape(rows, 2)
        mat = r.array("<f4", rows * x, f"core {cid} matrix").reshape(rows, x)
        cores.append(CoreMatrix(int(cid), float(cx), float(cy), px, mat))
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after STM payload", r.pos)
    try:
        return Stm(grid, tuple(cores))
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def save_stm(stm: Stm, path: str | Path) -> None:
    Path(path).write_bytes(encode_stm(stm))


def load_stm(path: str | Path) -> Stm:
    return decode_stm(Path(path).read_bytes())
