import json

import pytest

from mcmmf.config import load_config, parse_config, write_effective_config
from mcmmf.errors import ConfigError

MINIMAL = {
    "fiber": {"length_m": 0.3085, "core_diameter_m": 5e-5, "numerical_aperture": 0.06, "core_count": 20, "pitch_m": 7.5e-5},
    "grid": {"start_nm": 609, "step_nm": 2.0, "count": 43},
}


def with_(section, **kw):
    d = json.loads(json.dumps(MINIMAL))
    d.setdefault(section, {}).update(kw)
    return d


def test_minimal_config_gets_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(MINIMAL))
    cfg = load_config(p)
    assert cfg.clustering.eps == 3 and cfg.clustering.min_pts == 13
    assert cfg.source.incidence_deg == 3.5
    assert len(cfg.wavelength_grid()) == 43
    assert cfg.source_model().center_nm == cfg.wavelength_grid().values_nm[21]


def test_effective_config_round_trips(tmp_path):
    cfg = parse_config(MINIMAL).with_seed(9)
    write_effective_config(cfg, tmp_path / "e.json")
    assert load_config(tmp_path / "e.json") == cfg


@pytest.mark.parametrize(
    "data, key",
    [
        (with_("clustering", eps=-1), "clustering.eps"),
        (with_("clustering", foo=1), "clustering.foo"),
        (with_("fiber", core_count=2.5), "fiber.core_count"),
        (with_("fiber", length_m="long"), "fiber.length_m"),
        (with_("solver", tolerance=0), "solver.tolerance"),
        (with_("camera", patch_size_px=7), "camera.patch_size_px"),
        (with_("experiments", noise_levels=[0.0, 2.0]), "experiments.noise_levels"),
        ({"fiber": MINIMAL["fiber"]}, "grid"),
        (dict(MINIMAL, extra={}), "extra"),
    ],
)
def test_invalid_fields_are_named(data, key):
    with pytest.raises(ConfigError) as err:
        parse_config(data)
    assert err.value.key == key
    assert str(err.value).startswith(key)


def test_incidence_limit():
    with pytest.raises(ConfigError, match="4.5") as err:
        parse_config(with_("source", incidence_deg=5.0))
    assert err.value.key == "source.incidence_deg"


def test_bad_json(tmp_path):
    (tmp_path / "c.json").write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")
