"""12-bit camera frames and their binary PGM representation.

Frames are stored as ``P5`` PGM with 16-bit big-endian samples and
``maxval`` 4095, which is what a 12-bit monochrome sensor produces.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

MAX_COUNT = 4095


@dataclass(frozen=True, eq=False)
class SpeckleFrame:
    """Monochrome camera image in raw counts, row-major ``(height, width)``."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"frame must be 2-D, got shape {v.shape}")
        if v.size and (v.min() < 0 or v.max() > MAX_COUNT):
            raise ValueError("frame values must lie in [0, 4095]")
        v = np.ascontiguousarray(v, dtype=np.uint16)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SpeckleFrame):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    @classmethod
    def zeros(cls, height: int, width: int) -> "SpeckleFrame":
        return cls(np.zeros((height, width), dtype=np.uint16))


def quantize(intensity: np.ndarray) -> np.ndarray:
    """Round a non-negative count image to integers with saturation at 4095."""
    return np.clip(np.rint(intensity), 0, MAX_COUNT).astype(np.uint16)


def encode_pgm(values: np.ndarray, maxval: int = MAX_COUNT) -> bytes:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("PGM payload must be 2-D")
    if values.size and (values.min() < 0 or values.max() > maxval):
        raise ValueError(f"PGM samples must lie in [0, {maxval}]")
    h, w = values.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    return header + np.ascontiguousarray(values, dtype=dtype).tobytes()


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(data):
            raise FormatError("truncated PGM header", pos)
        c = data[pos : pos + 1]
        if c == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise FormatError("unterminated comment in PGM header", pos)
            pos = end + 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
                pos += 1
            tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after PGM header", pos)
    return tokens, pos + 1


def decode_pgm(data: bytes) -> np.ndarray:
    tokens, offset = _header_tokens(data, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"expected magic b'P5', found {tokens[0]!r}", 0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"non-integer PGM header field: {exc}") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise FormatError(f"invalid PGM dimensions {w}x{h} maxval {maxval}")
    nbytes = 2 if maxval > 255 else 1
    expected = w * h * nbytes
    if len(data) - offset < expected:
        raise FormatError(
            f"truncated PGM raster: need {expected} bytes, have {len(data) - offset}",
            len(data),
        )
    dtype = ">u2" if nbytes == 2 else "u1"
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=offset).reshape(h, w)
    if arr.size and arr.max() > maxval:
        raise FormatError(f"sample exceeds maxval {maxval}", offset)
    return arr.astype(np.uint16)


def write_pgm(path: str | Path, frame: SpeckleFrame | np.ndarray, maxval: int = MAX_COUNT) -> None:
    values = frame.values if isinstance(frame, SpeckleFrame) else frame
    Path(path).write_bytes(encode_pgm(values, maxval))


def read_pgm(path: str | Path) -> SpeckleFrame:
    arr = decode_pgm(Path(path).read_bytes())
    if arr.size and arr.max() > MAX_COUNT:
        raise FormatError("frame samples exceed the 12-bit range")
    return SpeckleFrame(arr)
