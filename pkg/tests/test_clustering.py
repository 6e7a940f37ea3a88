import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import Delaunay
from sklearn.cluster import DBSCAN

from conftest import uniform_blobs
from mcmmf.clustering import (
    NOISE,
    SMOOTH_WINDOW,
    CoreMap,
    DbscanParams,
    box_sum,
    dbscan,
    extract_core_map,
    load_core_map,
    otsu_threshold,
    save_core_map,
)
from mcmmf.errors import FormatError
from mcmmf.frames import SpeckleFrame
from mcmmf.optics import SourceModel, render_bundle


def brute_dbscan(points, eps, min_pts):
    """Textbook DBSCAN on a full distance matrix: (core mask, components of core points)."""
    d = np.sqrt(((points[:, None] - points[None]) ** 2).sum(-1))
    adj = d <= eps
    core = adj.sum(1) >= min_pts
    comp = -np.ones(len(points), dtype=int)
    k = 0
    for i in np.flatnonzero(core):
        if comp[i] >= 0:
            continue
        stack = [i]
        comp[i] = k
        while stack:
            j = stack.pop()
            for n in np.flatnonzero(adj[j] & core):
                if comp[n] < 0:
                    comp[n] = k
                    stack.append(n)
        k += 1
    reachable = (adj[:, core].any(1))
    return core, comp, reachable


def partition(labels, mask):
    groups = {}
    for i in np.flatnonzero(mask):
        groups.setdefault(labels[i], set()).add(i)
    return sorted(map(sorted, groups.values()))


point_sets = st.lists(st.tuples(st.integers(0, 25), st.integers(0, 25)), min_size=1, max_size=70, unique=True)


@settings(max_examples=80, deadline=None)
@given(point_sets, st.sampled_from([1.0, 1.5, 2.0, 3.0]), st.integers(1, 6))
def test_dbscan_matches_brute_force(pts, eps, min_pts):
    pts = np.array(pts, dtype=float)
    lab = dbscan(pts, DbscanParams(eps, min_pts))
    core, comp, reachable = brute_dbscan(pts, eps, min_pts)
    assert np.array_equal(lab.core_mask, core)
    assert partition(lab.labels, core) == partition(comp, core)
    # noise exactly where no core point is in reach
    assert np.array_equal(lab.labels == NOISE, ~reachable)
    # a border point joins a cluster of one of its core neighbours
    d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    for i in np.flatnonzero(~core & reachable):
        neighbours = np.flatnonzero((d[i] <= eps) & core)
        assert lab.labels[i] in set(lab.labels[neighbours])


@settings(max_examples=40, deadline=None)
@given(point_sets, st.integers(2, 8), st.randoms(use_true_random=False))
def test_dbscan_core_membership_matches_sklearn_and_is_order_free(pts, min_pts, rnd):
    pts = np.array(pts, dtype=float)
    ours = dbscan(pts, DbscanParams(2.0, min_pts))
    ref = DBSCAN(eps=2.0, min_samples=min_pts).fit(pts)
    ref_core = np.zeros(len(pts), dtype=bool)
    ref_core[ref.core_sample_indices_] = True
    assert np.array_equal(ours.core_mask, ref_core)
    assert partition(ours.labels, ref_core) == partition(ref.labels_, ref_core)
    perm = list(range(len(pts)))
    rnd.shuffle(perm)
    shuffled = dbscan(pts[perm], DbscanParams(2.0, min_pts))
    back = np.empty_like(shuffled.labels)
    back[perm] = shuffled.labels
    assert partition(back, ours.core_mask) == partition(ours.labels, ours.core_mask)


def test_dbscan_examples():
    empty = dbscan(np.empty((0, 2)), DbscanParams())
    assert empty.cluster_count == 0 and empty.labels.size == 0
    g = np.array([(x, y) for x in range(3) for y in range(3)], dtype=float)
    two = dbscan(np.vstack([g, g + 100]), DbscanParams(3, 4))
    assert two.cluster_count == 2 and two.noise_count == 0
    lone = dbscan(np.array([[5.0, 5.0]]), DbscanParams(3, 2))
    assert lone.labels.tolist() == [NOISE]


def test_dbscan_params_validation():
    for kw in (dict(eps=0), dict(min_pts=0), dict(min_pts=2.5), dict(intensity_threshold=5000)):
        with pytest.raises(ValueError):
            DbscanParams(**kw)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 60), min_size=2, max_size=200))
def test_otsu_maximises_between_class_variance(values):
    v = np.array(values)
    t = otsu_threshold(v)
    if v.min() == v.max():
        return

    def between(th):
        lo, hi = v[v <= th], v[v > th]
        if lo.size == 0 or hi.size == 0:
            return -1.0
        return lo.size * hi.size * (lo.mean() - hi.mean()) ** 2

    best = max(between(th) for th in range(v.min(), v.max()))
    assert between(t) == pytest.approx(best, rel=1e-9)


def test_box_sum_matches_naive():
    img = np.random.default_rng(1).integers(0, 4096, (9, 11))
    out = box_sum(img)
    pad = np.pad(img, 2)
    naive = np.array([[pad[y : y + 5, x : x + 5].sum() for x in range(11)] for y in range(9)])
    assert np.array_equal(out, naive)


@pytest.fixture(scope="module")
def detected(bundle):
    fiber, layout, models = bundle
    frame = render_bundle(
        fiber, models, layout.centroids, SourceModel(650.0, 20.0), np.ones(40), frame_shape=layout.frame_shape
    )
    return frame, layout, extract_core_map(frame, DbscanParams(3, 13), 20)


def test_rendered_bundle_is_found(detected):
    _, layout, cmap = detected
    assert len(cmap) == 40
    d = np.sqrt(((cmap.centroids[:, None] - layout.centroids[None]) ** 2).sum(-1))
    assert d.min(1).max() <= 2.0
    assert len(set(d.argmin(1))) == 40
    ys = [(s.cy, s.cx) for s in cmap.sites]
    assert ys == sorted(ys) and [s.id for s in cmap.sites] == list(range(40))


def test_centroids_lie_in_their_cluster_hull(detected):
    frame, _, cmap = detected
    local = box_sum(frame.values)
    t = otsu_threshold(local) / SMOOTH_WINDOW**2
    ys, xs = np.nonzero(local > t * SMOOTH_WINDOW**2)
    pts = np.column_stack([xs, ys]).astype(float)
    lab = dbscan(pts, DbscanParams(3, 13))
    for s in cmap.sites:
        owners = lab.labels[np.argmin(((pts - (s.cx, s.cy)) ** 2).sum(1))]
        hull = Delaunay(pts[lab.labels == owners])
        assert hull.find_simplex([[s.cx, s.cy]])[0] >= 0


def test_intensity_scaling_leaves_map_unchanged(bundle):
    fiber, layout, models = bundle
    frame = render_bundle(
        fiber, models, layout.centroids, SourceModel(650.0, 20.0), np.ones(40),
        frame_shape=layout.frame_shape, gain=150,
    )
    assert frame.values.max() * 2 <= 4095
    a = extract_core_map(frame, DbscanParams(), 20)
    b = extract_core_map(SpeckleFrame(frame.values * 2), DbscanParams(), 20)
    assert a == b


def test_dark_frame_gives_empty_map():
    cmap = extract_core_map(SpeckleFrame.zeros(50, 60), DbscanParams(), 20)
    assert len(cmap) == 0 and cmap.warning and cmap.frame_dims == (60, 50)


def grid_centres(n=4, pitch=30, offset=20):
    return [(offset + pitch * i, offset + pitch * j) for j in range(n) for i in range(n)]


@pytest.mark.parametrize("gap", [3, 5])
def test_split_core_is_merged(gap):
    centres = grid_centres()
    img = uniform_blobs(centres, 14, (140, 140))
    cx, cy = centres[5]
    x0, y0 = int(cx - 6.5), int(cy - 6.5)
    img[y0 : y0 + 14, x0 + 7 - gap // 2 : x0 + 7 - gap // 2 + gap] = 0
    cmap = extract_core_map(SpeckleFrame(img), DbscanParams(3, 13), 14)
    assert len(cmap) == 16
    d = np.sqrt(((cmap.centroids[:, None] - np.array(centres, dtype=float)[None]) ** 2).sum(-1))
    assert d.min(1).max() < 7  # the kept half lies within the original blob
    assert len(set(d.argmin(1))) == 16


def test_extraction_is_a_fixed_point_on_its_own_sites():
    first = extract_core_map(SpeckleFrame(uniform_blobs(grid_centres(), 14, (140, 140))), DbscanParams(), 14)
    again = extract_core_map(SpeckleFrame(uniform_blobs(first.centroids, 14, (140, 140))), DbscanParams(), 14)
    assert again == first


def test_aoi_clipping_is_flagged():
    img = uniform_blobs([(5.5, 30.5), (40.5, 30.5)], 12, (60, 60))
    cmap = extract_core_map(SpeckleFrame(img), DbscanParams(), 16)
    assert [s.clipped for s in cmap.sites] == [True, False]
    assert cmap.sites[0].aoi[0] == 0


def test_core_map_json_round_trip(tmp_path, detected):
    cmap = detected[2]
    save_core_map(cmap, tmp_path / "c.json")
    assert load_core_map(tmp_path / "c.json") == cmap
    (tmp_path / "bad.json").write_text('{"frame": {"w": 1}}')
    with pytest.raises(FormatError):
        load_core_map(tmp_path / "bad.json")
    assert CoreMap.from_json(cmap.to_json()).site(3) == cmap.site(3)
