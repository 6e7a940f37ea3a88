import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcmmf.errors import CorrelationError, LayoutError
from mcmmf.optics import (
    FiberSpec,
    SourceModel,
    WavelengthGrid,
    angle_correlation,
    build_core_model,
    hex_layout,
    linewidth_nodes,
    mode_count,
    patch_stack,
    place_patches,
    render_bundle,
    render_intensity,
    spectral_correlation,
    speckle_contrast,
    synthesize_patch,
)


def spec_with(**kw):
    base = dict(length_m=0.3085, core_diameter_m=50e-6, numerical_aperture=0.06, core_count=10, pitch_m=75e-6)
    base.update(kw)
    return FiberSpec(**base)


def v_number_oracle(d, na, lam):
    v = math.pi * d * na / lam
    return max(1, round(4 * v * v / math.pi**2))


def test_mode_count_reference_value():
    assert mode_count(spec_with(), 670.0) == 80
    assert 75 <= mode_count(spec_with(), 670.0) <= 90


def test_mode_count_single_mode_floor():
    assert mode_count(spec_with(numerical_aperture=1e-6), 670.0) == 1


@settings(max_examples=40, deadline=None)
@given(st.floats(20e-6, 100e-6), st.floats(0.02, 0.2), st.floats(400, 1600))
def test_mode_count_matches_closed_form_and_scales_quadratically(d, na, lam):
    spec = spec_with(core_diameter_m=d, numerical_aperture=na, pitch_m=2 * d)
    n = mode_count(spec, lam)
    assert n == v_number_oracle(d, na, lam * 1e-9)
    doubled = mode_count(spec_with(core_diameter_m=2 * d, numerical_aperture=na, pitch_m=4 * d), lam)
    exact = 4 * v_number_oracle(d, na, lam * 1e-9)
    assert abs(doubled - exact) <= 4


@pytest.mark.parametrize(
    "kw", [dict(length_m=0), dict(core_diameter_m=-1), dict(numerical_aperture=0), dict(pitch_m=10e-6), dict(core_count=0)]
)
def test_fiber_spec_validation(kw):
    with pytest.raises(ValueError):
        spec_with(**kw)


def test_incidence_limit_is_cited():
    with pytest.raises(ValueError, match="4.5"):
        SourceModel(650.0, 0.0, 5.0)


def test_grid_construction():
    g = WavelengthGrid.uniform(654.0, 0.4, 111)
    assert len(g) == 111 and g.values_nm[-1] == pytest.approx(698.0)
    with pytest.raises(ValueError):
        WavelengthGrid([600.0, 600.0], 0.0)


def test_core_model_is_deterministic():
    spec = spec_with()
    a = build_core_model(spec, SourceModel(650.0), 12, 7)
    b = build_core_model(spec, SourceModel(650.0), 12, 7)
    c = build_core_model(spec, SourceModel(650.0), 12, 8)
    assert a == b and a != c
    assert a.mode_fields.shape == (mode_count(spec, 650.0), 2, 12, 12)
    assert np.array_equal(synthesize_patch(a, spec, 650.0), synthesize_patch(b, spec, 650.0))


def test_participation_ratio_grows_with_angle():
    m = build_core_model(spec_with(), SourceModel(650.0), 8, 0)
    assert m.participation_ratio(0.0) <= 2
    assert m.participation_ratio(4.0) > m.participation_ratio(2.0)
    assert m.participation_ratio(3.5) == pytest.approx(m.mode_count / 2, rel=1e-6)


def test_patch_mean_is_about_one():
    spec = spec_with()
    patches = [synthesize_patch(build_core_model(spec, SourceModel(650.0), 20, s), spec, 650.0) for s in range(30)]
    assert np.mean(patches) == pytest.approx(1.0, rel=0.1)


def test_linewidth_nodes_cover_the_band():
    lam, w = linewidth_nodes(650.0, 2.0)
    assert len(lam) == 5 and w.sum() == pytest.approx(1.0)
    assert lam.min() > 649.0 and lam.max() < 651.0
    assert linewidth_nodes(650.0, 0.0)[0].tolist() == [650.0]


def single_polarisation_patch(model, spec, lam):
    phase = np.exp(2j * np.pi * spec.length_m * 1e9 / lam * model.mode_indices)
    field = np.tensordot(model.coupling() * phase, model.mode_fields[:, 0], axes=1)
    return np.abs(field) ** 2


def test_two_polarisations_reduce_contrast_by_root_two():
    spec = spec_with()
    models = [build_core_model(spec, SourceModel(650.0), 20, s) for s in range(60)]
    both = speckle_contrast(np.stack([synthesize_patch(m, spec, 650.0) for m in models]))
    one = speckle_contrast(np.stack([single_polarisation_patch(m, spec, 650.0) for m in models]))
    assert both / one == pytest.approx(1 / math.sqrt(2), abs=0.15)


def test_patches_far_apart_in_wavelength_are_uncorrelated():
    spec = spec_with()
    r = []
    for s in range(20):
        m = build_core_model(spec, SourceModel(650.0), 20, s)
        a, b = patch_stack(m, spec, [650.0, 670.0])
        r.append(np.corrcoef(a.ravel(), b.ravel())[0, 1])
    assert abs(np.mean(r)) < 0.2


def test_spectral_fwhm_in_band():
    spec = spec_with()
    grid = WavelengthGrid.uniform(665.0, 0.1, 60)
    stacks = [patch_stack(build_core_model(spec, SourceModel(670.0), 20, s), spec, grid.values_nm) for s in range(20)]
    curve = spectral_correlation(np.stack(stacks, axis=1), grid, per_core=True)
    assert curve.values[0] == 1.0
    assert 0.7 <= curve.fwhm <= 2.8


def test_finite_linewidth_broadens_spectral_correlation():
    spec = spec_with()
    grid = WavelengthGrid.uniform(665.0, 0.1, 60)
    models = [build_core_model(spec, SourceModel(670.0), 20, s) for s in range(20)]
    fw = []
    for lw in (0.0, 0.5):
        st_ = np.stack([patch_stack(m, spec, grid.values_nm, linewidth_nm=lw) for m in models], axis=1)
        fw.append(spectral_correlation(st_, grid, per_core=True).fwhm)
    assert fw[1] > fw[0]


def test_angle_fwhm_near_one_degree_and_narrowing():
    spec = spec_with()
    models = [build_core_model(spec, SourceModel(650.0), 20, s) for s in range(20)]

    def fwhm(theta):
        angles = theta + np.arange(-20, 21) * 0.05
        patches = np.stack([np.stack([synthesize_patch(m, spec, 650.0, a) for m in models]) for a in angles])
        centre = len(angles) // 2
        return angle_correlation(patches[centre:], angles[centre:], per_core=True).fwhm

    at35 = fwhm(3.5)
    assert 0.5 <= at35 <= 2.0
    assert fwhm(4.0) < fwhm(1.0)


def test_identical_patches_have_no_width():
    p = np.random.default_rng(0).random((1, 8, 8))
    with pytest.raises(CorrelationError):
        spectral_correlation(np.repeat(p, 5, axis=0), [1.0, 2.0, 3.0, 4.0, 5.0])
    with pytest.raises(CorrelationError):
        angle_correlation(np.zeros((5, 8, 8)), [0, 1, 2, 3, 4])


def test_hex_layout_patches_do_not_overlap():
    lay = hex_layout(200, 30, 20)
    c = lay.centroids
    d = np.abs(c[:, None, :] - c[None, :, :]).max(-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() >= 20
    assert np.all(c - 9.5 >= 0)
    assert np.all(c[:, 0] + 10 <= lay.frame_shape[1]) and np.all(c[:, 1] + 10 <= lay.frame_shape[0])


def test_place_patches_rejects_out_of_frame():
    with pytest.raises(LayoutError):
        place_patches(np.ones((1, 4, 4)), np.array([[8, 0]]), (10, 10))


def test_render_locality_and_zero_scene(bundle):
    fiber, layout, models = bundle
    src = SourceModel(650.0)
    dark = render_bundle(fiber, models, layout.centroids, src, np.zeros(40), frame_shape=layout.frame_shape)
    assert not dark.values.any()
    w = np.zeros(40)
    w[7] = 1
    one = render_bundle(fiber, models, layout.centroids, src, w, frame_shape=layout.frame_shape).values
    x0, y0 = layout.origins()[7]
    inside = np.zeros_like(one, dtype=bool)
    inside[y0 : y0 + 20, x0 : x0 + 20] = True
    assert one[inside].any() and not one[~inside].any()
    assert one.max() <= 4095


@settings(max_examples=15, deadline=None)
@given(st.floats(0.01, 1.0))
def test_scene_weight_scales_intensity_exactly(alpha):
    spec = spec_with(core_count=1)
    m = build_core_model(spec, SourceModel(650.0), 8, 3)
    cen = np.array([[5.5, 5.5]])
    full = render_intensity(spec, [m], cen, SourceModel(650.0), [1.0])
    part = render_intensity(spec, [m], cen, SourceModel(650.0), [alpha])
    np.testing.assert_allclose(part, alpha * full, rtol=1e-12)
