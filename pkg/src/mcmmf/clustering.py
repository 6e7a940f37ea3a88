"""Locate fiber-core speckle patches on a camera frame with DBSCAN."""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .frames import MAX_COUNT, SpeckleFrame

log = logging.getLogger(__name__)

NOISE = -1
SMOOTH_WINDOW = 5  # box window (px) applied before thresholding


@dataclass(frozen=True)
class DbscanParams:
    eps: float = 3.0
    min_pts: int = 13
    intensity_threshold: float | None = None  # None selects Otsu's threshold

    def __post_init__(self) -> None:
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if int(self.min_pts) != self.min_pts or self.min_pts < 1:
            raise ValueError("min_pts must be an integer >= 1")
        t = self.intensity_threshold
        if t is not None and not 0 <= t <= MAX_COUNT:
            raise ValueError("intensity_threshold must lie in [0, 4095]")


@dataclass(frozen=True, eq=False)
class ClusterLabeling:
    labels: np.ndarray
    cluster_count: int
    core_mask: np.ndarray

    @property
    def noise_count(self) -> int:
        return int(np.sum(self.labels == NOISE))


@dataclass(frozen=True)
class CoreSite:
    id: int
    cx: float
    cy: float
    aoi: tuple[int, int, int, int]  # x0, y0, width, height
    clipped: bool = False


@dataclass(frozen=True)
class CoreMap:
    sites: tuple[CoreSite, ...]
    frame_dims: tuple[int, int]  # (width, height)
    warning: str | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.sites)

    @property
    def centroids(self) -> np.ndarray:
        return np.array([(s.cx, s.cy) for s in self.sites], dtype=float).reshape(-1, 2)

    def site(self, site_id: int) -> CoreSite:
        for s in self.sites:
            if s.id == site_id:
                return s
        raise KeyError(f"no core with id {site_id}")

    def to_json(self) -> dict:
        w, h = self.frame_dims
        return {
            "frame": {"w": w, "h": h},
            "sites": [
                {"id": s.id, "cx": s.cx, "cy": s.cy, "aoi": list(s.aoi), "clipped": s.clipped}
                for s in self.sites
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "CoreMap":
        try:
            frame = (int(data["frame"]["w"]), int(data["frame"]["h"]))
            sites = tuple(
                CoreSite(
                    int(s["id"]),
                    float(s["cx"]),
                    float(s["cy"]),
                    tuple(int(v) for v in s["aoi"]),
                    bool(s.get("clipped", False)),
                )
                for s in data["sites"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed core map: {exc!r}") from None
        for s in sites:
            if len(s.aoi) != 4:
                raise FormatError(f"site {s.id}: aoi must have 4 entries")
        return cls(sites, frame)


def save_core_map(core_map: CoreMap, path: str | Path) -> None:
    Path(path).write_text(json.dumps(core_map.to_json(), indent=1) + "\n")


def load_core_map(path: str | Path) -> CoreMap:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"core map is not valid JSON: {exc}") from None
    return CoreMap.from_json(data)


def _neighbourhoods(points: np.ndarray, eps: float) -> list[np.ndarray]:
    """Indices within ``eps`` (inclusive) of every point, via eps-sized buckets."""
    n = len(points)
    cells = np.floor(points / eps).astype(np.int64)
    keys = cells[:, 0] * 1_000_003 + cells[:, 1]
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    uniq, starts = np.unique(sorted_keys, return_index=True)
    ends = np.append(starts[1:], n)
    bucket = {int(k): order[s:e] for k, s, e in zip(uniq, starts, ends)}
    eps2 = eps * eps
    result: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * n
    for k, members in bucket.items():
        cx, cy = cells[members[0]]
        cand = [
            bucket[key]
            for dx in (-1, 0, 1)
            for dy in (-1, 0, 1)
            if (key := int((cx + dx) * 1_000_003 + (cy + dy))) in bucket
        ]
        cand = np.sort(np.concatenate(cand))
        d = points[members, None, :] - points[None, cand, :]
        close = np.einsum("ijk,ijk->ij", d, d) <= eps2 * (1 + 1e-12)
        for row, i in enumerate(members):
            result[i] = cand[close[row]]
    return result


def dbscan(points: np.ndarray, params: DbscanParams) -> ClusterLabeling:
    """Density-based clustering (Ester et al. 1996).

    Points are scanned in ``(y, x)`` order; clusters are numbered in order of
    their first core point and a border point belongs to the first cluster
    that reaches it.  Neighbourhoods include the point itself.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return ClusterLabeling(np.empty(0, dtype=np.int64), 0, np.empty(0, dtype=bool))
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    scan = np.lexsort((pts[:, 0], pts[:, 1]))
    neigh = _neighbourhoods(pts, params.eps)
    is_core = np.fromiter((len(nb) >= params.min_pts for nb in neigh), dtype=bool, count=n)
    labels = np.full(n, NOISE, dtype=np.int64)
    cluster = 0
    for start in scan:
        if labels[start] != NOISE or not is_core[start]:
            continue
        labels[start] = cluster
        queue = deque([start])
        while queue:
            i = queue.popleft()
            for j in neigh[i]:
                if labels[j] == NOISE:
                    labels[j] = cluster
                    if is_core[j]:
                        queue.append(j)
        cluster += 1
    return ClusterLabeling(labels, cluster, is_core)


def otsu_threshold(values: np.ndarray) -> float:
    """Otsu's threshold on the exact integer histogram of a count image.

    Returns ``t`` such that pixels with value ``> t`` form the bright class.
    """
    v = np.asarray(values).ravel().astype(np.int64)
    if v.size == 0 or v.min() == v.max():
        return float(v.max()) if v.size else 0.0
    hist = np.bincount(v).astype(float)
    levels = np.arange(hist.size, dtype=float)
    w0 = np.cumsum(hist)
    m0 = np.cumsum(hist * levels)
    total, mean_total = w0[-1], m0[-1]
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    between = np.zeros_like(w0)
    mu0 = m0[valid] / w0[valid]
    mu1 = (mean_total - m0[valid]) / w1[valid]
    between[valid] = w0[valid] * w1[valid] * (mu0 - mu1) ** 2
    return float(np.argmax(between))


def box_sum(img: np.ndarray, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Integer sum over a ``window x window`` box centred on each pixel (zero padded)."""
    r = window // 2
    a = np.pad(np.asarray(img, dtype=np.int64), r)
    c = np.zeros((a.shape[0] + 1, a.shape[1] + 1), dtype=np.int64)
    c[1:, 1:] = a.cumsum(0).cumsum(1)
    h, w = np.asarray(img).shape
    return c[window : window + h, window : window + w] - c[:h, window : window + w] - c[window : window + h, :w] + c[:h, :w]


def _median_nn_distance(c: np.ndarray) -> float:
    if len(c) < 2:
        return 0.0
    d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    return float(np.median(d.min(axis=1)))


def deduplicate(centroids: np.ndarray, brightness: np.ndarray) -> np.ndarray:
    """Indices of centroids kept after merging near-duplicates.

    Pairs closer than half the median nearest-neighbour distance are merged,
    keeping the brighter cluster.  Processing goes from brightest down so the
    result does not depend on input order.
    """
    c = np.asarray(centroids, dtype=float).reshape(-1, 2)
    if len(c) < 2:
        return np.arange(len(c))
    limit = 0.5 * _median_nn_distance(c)
    order = np.lexsort((c[:, 0], c[:, 1], -np.asarray(brightness, dtype=float)))
    kept: list[int] = []
    for i in order:
        if all(math.dist(c[i], c[k]) >= limit for k in kept):
            kept.append(int(i))
    return np.array(sorted(kept), dtype=np.int64)


def _aoi(cx: float, cy: float, size: int, width: int, height: int) -> tuple[tuple[int, int, int, int], bool]:
    x0 = int(round(cx - (size - 1) / 2.0))
    y0 = int(round(cy - (size - 1) / 2.0))
    x1, y1 = x0 + size, y0 + size
    cx0, cy0 = max(x0, 0), max(y0, 0)
    cx1, cy1 = min(x1, width), min(y1, height)
    clipped = (cx0, cy0, cx1, cy1) != (x0, y0, x1, y1)
    return (cx0, cy0, max(cx1 - cx0, 0), max(cy1 - cy0, 0)), clipped


def extract_core_map(frame: SpeckleFrame, params: DbscanParams, aoi_size_px: int) -> CoreMap:
    """Threshold, cluster, take intensity-weighted centroids, deduplicate."""
    if int(aoi_size_px) != aoi_size_px or aoi_size_px < 4 or aoi_size_px % 2:
        raise ValueError("aoi_size_px must be an even integer >= 4")
    img = frame.values
    h, w = img.shape
    # raw speckle is too grainy for a global threshold; a box sum compacts it
    local = box_sum(img)
    area = SMOOTH_WINDOW * SMOOTH_WINDOW
    if params.intensity_threshold is None:
        threshold = otsu_threshold(local) / area
    else:
        threshold = float(params.intensity_threshold)
    ys, xs = np.nonzero(local > threshold * area)
    if xs.size == 0:
        log.warning("no pixels above threshold %.1f; empty core map", threshold)
        return CoreMap((), (w, h), warning="no pixels above threshold")
    labeling = dbscan(np.column_stack([xs, ys]).astype(float), params)
    if labeling.cluster_count == 0:
        log.warning("DBSCAN found no clusters; empty core map")
        return CoreMap((), (w, h), warning="no clusters found")
    lab = labeling.labels
    keep = lab >= 0
    wts = img[ys[keep], xs[keep]].astype(float)
    k = labeling.cluster_count
    mass = np.bincount(lab[keep], weights=wts, minlength=k)
    cx = np.bincount(lab[keep], weights=wts * xs[keep], minlength=k) / mass
    cy = np.bincount(lab[keep], weights=wts * ys[keep], minlength=k) / mass
    cents = np.column_stack([cx, cy])
    kept = deduplicate(cents, mass)
    cents = cents[kept]
    order = np.lexsort((cents[:, 0], cents[:, 1]))
    sites = []
    for new_id, i in enumerate(order):
        x, y = float(cents[i, 0]), float(cents[i, 1])
        aoi, clipped = _aoi(x, y, int(aoi_size_px), w, h)
        sites.append(CoreSite(new_id, x, y, aoi, clipped))
    return CoreMap(tuple(sites), (w, h))
