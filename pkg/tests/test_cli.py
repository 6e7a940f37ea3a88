import json

import pytest

from mcmmf.cli import FRAME_NAME, frame_name, run, scan_frame_dir

CFG = {
    "fiber": {"length_m": 0.3085, "core_diameter_m": 5e-5, "numerical_aperture": 0.06, "core_count": 12, "pitch_m": 7.5e-5},
    "grid": {"start_nm": 609, "step_nm": 4.0, "count": 8},
    "experiments": {"noise_levels": [0.0, 0.3], "ratios": [1.0, 2.0], "counts": [1, 3], "letters": "LT", "composite_ratio": 4.0},
    "camera": {"patch_size_px": 24, "pitch_px": 36},
}


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(CFG))
    return p


def test_frame_names_sort_by_wavelength(tmp_path):
    for i, lam in [(2, 700.0), (0, 650.5), (1, 9999.0)]:
        (tmp_path / frame_name(i, lam)).write_bytes(b"")
    (tmp_path / "other.pgm").write_bytes(b"")
    assert frame_name(3, 650.5) == "frame_0003_650.5000.pgm"
    assert FRAME_NAME.match("frame_0003_650.5000.pgm")
    assert [w for w, _ in scan_frame_dir(tmp_path)] == [650.5, 700.0, 9999.0]


def test_full_pipeline(tmp_path, cfg, capsys):
    sim = tmp_path / "sim"
    assert run(["simulate", "--config", str(cfg), "--out", str(sim)]) == 0
    assert len(list((sim / "calibration").glob("frame_*.pgm"))) == 8
    assert (sim / "effective_config.json").exists()
    cores = tmp_path / "cores.json"
    assert run(["find-cores", "--frame", str(sim / "bundle.pgm"), "--eps", "3", "--min-pts", "13", "--aoi-size", "24", "--out", str(cores)]) == 0
    assert len(json.loads(cores.read_text())["sites"]) == 12
    stm = tmp_path / "stm.bin"
    assert run(["calibrate", "--frames", str(sim / "calibration"), "--cores", str(cores), "--pixels-per-core", "32", "--out", str(stm)]) == 0
    assert stm.read_bytes()[:4] == b"STM1"
    out = tmp_path / "spectra.csv"
    assert run(["reconstruct", "--stm", str(stm), "--frame", str(sim / "scene.pgm"), "--out", str(out), "--threads", "2"]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "core_id,wavelength_nm,intensity" and len(rows) == 1 + 12 * 8
    assert capsys.readouterr().out == ""


def test_missing_stm_is_a_domain_error(tmp_path, capsys):
    code = run(["reconstruct", "--stm", str(tmp_path / "missing.bin"), "--frame", "f.pgm", "--out", str(tmp_path / "x.csv")])
    assert code == 1
    assert "missing.bin" in capsys.readouterr().err
    assert not (tmp_path / "x.csv").exists()


@pytest.mark.parametrize("argv", [["bogus"], [], ["find-cores", "--frame", "f.pgm"], ["sweep", "--kind", "magic", "--config", "c", "--out", "o"], ["find-cores", "--nope"]])
def test_usage_errors(argv, capsys):
    assert run(argv) == 2
    assert "usage" in capsys.readouterr().err


def test_bad_config_is_a_domain_error(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(dict(CFG, clustering={"eps": -1})))
    assert run(["sweep", "--kind", "noise", "--config", str(p), "--out", str(tmp_path / "o.csv")]) == 1
    assert "clustering.eps" in capsys.readouterr().err


def test_noise_sweep_starts_at_zero(tmp_path, cfg):
    out = tmp_path / "noise.csv"
    assert run(["sweep", "--kind", "noise", "--config", str(cfg), "--ratio", "2", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "axis,mean_corr,std_corr,n_cores,seed"
    assert lines[1].startswith("0.0,")
    assert (tmp_path / "noise.csv.config.json").exists()


def test_seed_override_and_determinism(tmp_path, cfg):
    outs = []
    for name, seed in (("a", "3"), ("b", "3"), ("c", "4")):
        out = tmp_path / f"{name}.csv"
        assert run(["sweep", "--kind", "sparsity", "--config", str(cfg), "--ratio", "1.0", "--seed", seed, "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert outs[0].splitlines()[1].endswith(b",3") and outs[2].splitlines()[1].endswith(b",4")


def test_composite_writes_maps(tmp_path, cfg):
    cfg_data = dict(CFG, grid={"start_nm": 654.0, "step_nm": 0.4, "count": 20})
    cfg.write_text(json.dumps(cfg_data))
    out = tmp_path / "comp"
    assert run(["composite", "--config", str(cfg), "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["L_655.2.pgm", "T_658.0.pgm", "crosstalk.csv", "effective_config.json", "spectra.csv"]
