"""5x7 bitmap letters rasterised onto the fiber bundle."""

from __future__ import annotations

import numpy as np

from .clustering import CoreMap

FULL_BLOCK = "█"

_FONT = {
    "A": ("01110", "10001", "10001", "11111", "10001", "10001", "10001"),
    "B": ("11110", "10001", "10001", "11110", "10001", "10001", "11110"),
    "C": ("01110", "10001", "10000", "10000", "10000", "10001", "01110"),
    "D": ("11100", "10010", "10001", "10001", "10001", "10010", "11100"),
    "E": ("11111", "10000", "10000", "11110", "10000", "10000", "11111"),
    "F": ("11111", "10000", "10000", "11110", "10000", "10000", "10000"),
    "G": ("01110", "10001", "10000", "10111", "10001", "10001", "01111"),
    "H": ("10001", "10001", "10001", "11111", "10001", "10001", "10001"),
    "I": ("01110", "00100", "00100", "00100", "00100", "00100", "01110"),
    "J": ("00111", "00010", "00010", "00010", "00010", "10010", "01100"),
    "K": ("10001", "10010", "10100", "11000", "10100", "10010", "10001"),
    "L": ("10000", "10000", "10000", "10000", "10000", "10000", "11111"),
    "M": ("10001", "11011", "10101", "10101", "10001", "10001", "10001"),
    "N": ("10001", "10001", "11001", "10101", "10011", "10001", "10001"),
    "O": ("01110", "10001", "10001", "10001", "10001", "10001", "01110"),
    "P": ("11110", "10001", "10001", "11110", "10000", "10000", "10000"),
    "Q": ("01110", "10001", "10001", "10001", "10101", "10010", "01101"),
    "R": ("11110", "10001", "10001", "11110", "10100", "10010", "10001"),
    "S": ("01111", "10000", "10000", "01110", "00001", "00001", "11110"),
    "T": ("11111", "00100", "00100", "00100", "00100", "00100", "00100"),
    "U": ("10001", "10001", "10001", "10001", "10001", "10001", "01110"),
    "V": ("10001", "10001", "10001", "10001", "10001", "01010", "00100"),
    "W": ("10001", "10001", "10001", "10101", "10101", "10101", "01010"),
    "X": ("10001", "10001", "01010", "00100", "01010", "10001", "10001"),
    "Y": ("10001", "10001", "01010", "00100", "00100", "00100", "00100"),
    "Z": ("11111", "00001", "00010", "00100", "01000", "10000", "11111"),
    FULL_BLOCK: ("11111",) * 7,
}

SUPPORTED = frozenset(_FONT)


def bitmap(glyph: str) -> np.ndarray:
    """Boolean ``(7, 5)`` bitmap, row 0 at the top."""
    key = glyph.upper() if len(glyph) == 1 and glyph.isalpha() and glyph.isascii() else glyph
    if key not in _FONT:
        raise ValueError(f"unsupported glyph {glyph!r}; expected A-Z or FULL_BLOCK")
    return np.array([[c == "1" for c in row] for row in _FONT[key]])


def _overlap(a0: np.ndarray, a1: np.ndarray, b0: float, b1: float) -> np.ndarray:
    return np.clip(np.minimum(a1, b1) - np.maximum(a0, b0), 0.0, None)


def rasterize_letter(glyph: str, core_map: CoreMap) -> np.ndarray:
    """Fraction of each core's AOI covered by the glyph, in site order.

    The glyph's cells are stretched over the bounding box of all AOIs.
    """
    bits = bitmap(glyph)
    if not core_map.sites:
        return np.zeros(0)
    aoi = np.array([s.aoi for s in core_map.sites], dtype=float)
    x0, y0 = aoi[:, 0], aoi[:, 1]
    x1, y1 = x0 + aoi[:, 2], y0 + aoi[:, 3]
    bx0, by0, bx1, by1 = x0.min(), y0.min(), x1.max(), y1.max()
    rows, cols = bits.shape
    cw, ch = (bx1 - bx0) / cols, (by1 - by0) / rows
    covered = np.zeros(len(aoi))
    for r, c in zip(*np.nonzero(bits)):
        ox = _overlap(x0, x1, bx0 + c * cw, bx0 + (c + 1) * cw)
        oy = _overlap(y0, y1, by0 + r * ch, by0 + (r + 1) * ch)
        covered += ox * oy
    area = np.maximum(aoi[:, 2] * aoi[:, 3], 1.0)
    return np.clip(covered / area, 0.0, 1.0)
