"""Command-line entry point: ``mcmmf <subcommand> ...``.

Exit status is 0 on success, 1 on a domain or I/O error and 2 on a usage
error.  Diagnostics go to standard error; data goes only to the paths named
on the command line.  Commands that read a config write the effective config
next to their output (``<out>.config.json``, or ``effective_config.json``
inside an output directory).
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .clustering import DbscanParams, extract_core_map, load_core_map, save_core_map
from .config import RunConfig, load_config, write_effective_config
from .errors import FormatError, MCMMFError
from .frames import read_pgm, write_pgm
from .optics import WavelengthGrid, render_bundle
from .solver import DEFAULT_TOLERANCE, solve_batch, write_spectra_csv
from .stm import calibrate, load_stm, save_stm, subsample

log = logging.getLogger("mcmmf")

FRAME_NAME = re.compile(r"^frame_(\d{4,})_(\d+(?:\.\d+)?)\.pgm$")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def frame_name(index: int, wavelength_nm: float) -> str:
    return f"frame_{index:04d}_{wavelength_nm:.4f}.pgm"


def scan_frame_dir(directory: str | Path) -> list[tuple[float, Path]]:
    """Calibration frames sorted by the wavelength in their file name."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"frame directory not found: {d}")
    found = []
    for p in d.iterdir():
        m = FRAME_NAME.match(p.name)
        if m:
            found.append((float(m.group(2)), p))
    if not found:
        raise FormatError(f"no frame_<index>_<wavelength>.pgm files in {d}")
    found.sort()
    return found


def _grid_from(wavelengths: list[float]) -> WavelengthGrid:
    values = np.array(wavelengths)
    step = float(np.diff(values).mean()) if len(values) > 1 else 0.0
    return WavelengthGrid(values, step)


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _sidecar(cfg: RunConfig, out: Path) -> None:
    target = out / "effective_config.json" if out.is_dir() else out.with_name(out.name + ".config.json")
    write_effective_config(cfg, target)


def cmd_simulate(args) -> None:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench_cfg = cfg.bench_config()
    layout, models = ex.bundle_models(bench_cfg)
    write_pgm(out / "bundle.pgm", ex.detection_frame(bench_cfg, layout, models))
    scene = render_bundle(
        cfg.fiber, models, layout.centroids, cfg.source_model(), np.ones(len(models)),
        frame_shape=layout.frame_shape, gain=cfg.camera.gain,
    )
    write_pgm(out / "scene.pgm", scene)
    cal = out / "calibration"
    cal.mkdir(exist_ok=True)
    for i, lam in enumerate(bench_cfg.grid.values_nm):
        src = cfg.source_model()
        mono = type(src)(float(lam), 0.0, src.incidence_deg)
        frame = render_bundle(
            cfg.fiber, models, layout.centroids, mono, np.ones(len(models)),
            frame_shape=layout.frame_shape, gain=cfg.camera.gain,
        )
        write_pgm(cal / frame_name(i, lam), frame)
    _sidecar(cfg, out)
    log.info("wrote %d calibration frames to %s", len(bench_cfg.grid), cal)


def cmd_find_cores(args) -> None:
    params = DbscanParams(args.eps, args.min_pts, args.threshold)
    cmap = extract_core_map(read_pgm(args.frame), params, args.aoi_size)
    if cmap.warning:
        log.warning("%s", cmap.warning)
    save_core_map(cmap, args.out)
    log.info("found %d cores", len(cmap))


def cmd_calibrate(args) -> None:
    found = scan_frame_dir(args.frames)
    frames = [read_pgm(p) for _, p in found]
    cmap = load_core_map(args.cores)
    stm = calibrate(frames, cmap, args.pixels_per_core, _grid_from([w for w, _ in found]))
    save_stm(stm, args.out)
    log.info("calibrated %d cores x %d channels", len(stm.cores), stm.channel_count)


def cmd_reconstruct(args) -> None:
    if not Path(args.stm).is_file():
        raise FileNotFoundError(f"STM file not found: {args.stm}")
    stm = load_stm(args.stm)
    if args.ratio is not None:
        stm = subsample(stm, args.ratio, args.seed or 0)
    frame = read_pgm(args.frame)
    results = solve_batch(stm, frame, args.tolerance, args.max_iterations, workers=args.threads)
    write_spectra_csv(args.out, results, stm.grid)


def cmd_sweep(args) -> None:
    cfg = _config(args)
    e = cfg.experiments
    bench = ex.build_bench(cfg.bench_config())
    seed = cfg.seeds.experiment
    kw = dict(tolerance=cfg.solver.tolerance, workers=args.threads)
    if args.kind == "sampling":
        n = args.n_lines if args.n_lines is not None else e.n_lines
        result = ex.sweep_sampling(bench, n, e.ratios, seed, **kw)
    else:
        ratio = args.ratio if args.ratio is not None else e.ratio
        if args.kind == "sparsity":
            result = ex.sweep_sparsity(bench, ratio, e.counts, seed, **kw)
        else:
            result = ex.sweep_noise(bench, ratio, e.noise_levels, seed, **kw)
    out = Path(args.out)
    ex.write_sweep_csv(out, result)
    _sidecar(cfg, out)


def cmd_composite(args) -> None:
    cfg = _config(args)
    e = cfg.experiments
    bench = ex.build_bench(cfg.bench_config())
    letters = args.letters or e.letters
    channels = ex.letter_channels(len(letters))
    if channels[-1] >= len(bench.grid):
        raise ValueError(f"{len(letters)} letters need at least {channels[-1] + 1} channels, grid has {len(bench.grid)}")
    ratio = args.ratio if args.ratio is not None else e.composite_ratio
    result = ex.run_composite(
        bench, list(letters), channels, ratio, cfg.seeds.experiment,
        tolerance=cfg.solver.tolerance, workers=args.threads,
    )
    out = Path(args.out)
    ex.write_composite(result, out)
    _sidecar(cfg, out)
    for g, c, r in zip(result.glyphs, result.channels, result.correlations):
        log.info("%s @ %.1f nm: map correlation %.3f", ex.glyph_label(g), result.grid.values_nm[c], r)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="worker threads (0 = auto)")
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mcmmf", description="Multicore fiber snapshot spectral imaging pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="render bundle, scene and calibration frames")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("find-cores", parents=[common], help="detect cores on a frame")
    s.add_argument("--frame", required=True)
    s.add_argument("--eps", type=float, default=3.0)
    s.add_argument("--min-pts", type=int, default=13)
    s.add_argument("--threshold", type=float, default=None, help="count threshold (default: Otsu)")
    s.add_argument("--aoi-size", type=int, default=20)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_find_cores)

    s = sub.add_parser("calibrate", parents=[common], help="build an STM from calibration frames")
    s.add_argument("--frames", required=True, help="directory of frame_<index>_<wavelength>.pgm")
    s.add_argument("--cores", required=True, help="core map JSON")
    s.add_argument("--pixels-per-core", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("reconstruct", parents=[common], help="recover per-core spectra from a frame")
    s.add_argument("--stm", required=True)
    s.add_argument("--frame", required=True)
    s.add_argument("--ratio", type=float, default=None, help="subsample rows to Y/X = ratio")
    s.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    s.add_argument("--max-iterations", type=int, default=None)
    s.add_argument("--out", required=True, help="spectra CSV")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("sweep", parents=[common], help="run a correlation sweep")
    s.add_argument("--kind", required=True, choices=("sampling", "sparsity", "noise"))
    s.add_argument("--config", required=True)
    s.add_argument("--n-lines", type=int, default=None, help="sampling sweep: lines per spectrum")
    s.add_argument("--ratio", type=float, default=None, help="sparsity/noise sweep: Y/X")
    s.add_argument("--out", required=True, help="sweep CSV")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("composite", parents=[common], help="reconstruct a superposition of letters")
    s.add_argument("--config", required=True)
    s.add_argument("--letters", default=None)
    s.add_argument("--ratio", type=float, default=None)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_composite)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.threads < 0:
        print("mcmmf: error: --threads must be >= 0", file=sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        args.func(args)
    except (MCMMFError, ValueError, OSError, KeyError) as exc:
        print(f"mcmmf {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
