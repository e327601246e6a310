"""Command-line entry point: ``cassikit <subcommand> [options]``.

Exit codes: 0 success, 1 oracle mismatch, 2 configuration error,
3 numerical failure, 4 oracle size cap exceeded.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .core import ContainerError, HyperCube, Measurement, MeasurementSet, read_container, write_container
from .experiment import (
    ConfigError,
    experiment_from_raw,
    load_config,
    load_scene,
    metrics_row,
    oracle_masks,
    run_experiment,
    run_oracle,
    write_iterations_csv,
    write_masks,
    write_measurements,
    write_metrics_csv,
)
from .metrics import quality_report
from .optics import ORACLE_CAP
from .recon import SolverDivergence, reconstruct
from .sampling import ProgressiveSampler, acquire, plan_shots

log = logging.getLogger("cassikit")

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CAP = 0, 1, 2, 3, 4


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                   help="override a config key, e.g. --set solver.phases=20 (repeatable)")
    p.add_argument("--out", type=Path, help="output directory (default: output.dir or ./out)")
    p.add_argument("--seed", type=_u64, help="master seed for phantom, masks and noise")
    p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    p.add_argument("--quiet", action="store_true", help="only report errors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cassikit", description="Coded-aperture spectral imaging simulation and reconstruction.")
    sub = parser.add_subparsers(dest="command", required=True)

    specs = {
        "phantom": "write the configured synthetic scene as phantom.hsc",
        "mask": "write the apertures of the shot plan (shot 1 only for content-aware plans)",
        "sample": "acquire the scene with the shot plan and noise model; writes measurements and masks",
        "reconstruct": "reconstruct from measurement_*.hsc and mask_*.hsc in the output directory",
        "metrics": "compare input.recon against input.truth and write metrics.csv",
        "oracle": "check the matrix-free operators against a dense sensing matrix",
        "pipeline": "phantom -> acquisition -> reconstruction -> metrics, with all artifacts",
    }
    for name, help_text in specs.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        _common(p)
        if name == "oracle":
            p.add_argument("--cap", type=int, default=ORACLE_CAP, help="maximum dense matrix entries")
            p.add_argument("--corrupt-adjoint", action="store_true", help=argparse.SUPPRESS)
    return parser


def _say(args, *parts) -> None:
    if not args.quiet:
        print(*parts)


def _load_measurements(directory: Path, exp) -> tuple[MeasurementSet, list]:
    shots, masks = [], []
    for i in range(1, exp.sensing.shots + 1):
        m = read_container(directory / f"measurement_{i}.hsc", exp.sensing, shot=i)
        a = read_container(directory / f"mask_{i}.hsc", exp.sensing)
        if not isinstance(m, Measurement):
            raise ContainerError(f"measurement_{i}.hsc does not hold a measurement")
        shots.append(m)
        masks.append(a)
    return MeasurementSet(exp.sensing, tuple(shots)), masks


def _cmd_phantom(args, exp) -> int:
    out = exp.output.directory
    write_container(load_scene(exp), out / "phantom.hsc")
    _say(args, f"wrote {out / 'phantom.hsc'}")
    return EXIT_OK


def _cmd_mask(args, exp) -> int:
    source = plan_shots(exp.plan, exp.sensing)
    masks = [source.first] if isinstance(source, ProgressiveSampler) else source
    write_masks(exp.output.directory, masks)
    _say(args, f"wrote {len(masks)} mask(s) to {exp.output.directory}")
    return EXIT_OK


def _cmd_sample(args, exp) -> int:
    measurements, masks = acquire(load_scene(exp), exp.plan, exp.sensing, exp.noise)
    write_measurements(exp.output.directory, measurements)
    write_masks(exp.output.directory, masks)
    _say(args, f"wrote {len(measurements)} measurement(s) to {exp.output.directory}")
    return EXIT_OK


def _cmd_reconstruct(args, exp) -> int:
    out = exp.output.directory
    measurements, masks = _load_measurements(out, exp)
    truth = None
    truth_path = exp.raw.path("input.truth")
    if truth_path is not None:
        truth = read_container(truth_path, exp.sensing)
    report = reconstruct(measurements, masks, exp.sensing, exp.solver, truth=truth)
    write_container(report.cube, out / "recon.hsc")
    write_iterations_csv(out / "iterations.csv", report)
    _say(args, f"wrote {out / 'recon.hsc'} after {len(report.records)} iterations")
    return EXIT_OK


def _cmd_metrics(args, exp) -> int:
    truth_path = exp.raw.path("input.truth")
    recon_path = exp.raw.path("input.recon", exp.output.directory / "recon.hsc")
    if truth_path is None:
        raise ConfigError("metrics needs input.truth", None, exp.raw.source)
    truth = read_container(truth_path)
    recon = read_container(recon_path)
    if not isinstance(truth, HyperCube) or not isinstance(recon, HyperCube):
        raise ContainerError("metrics compares two cubes")
    q = quality_report(recon, truth)
    scene = exp.raw.str("input.scene", truth_path.stem)
    row = metrics_row(scene, exp.solver.algorithm, exp.sensing.shots, exp.solver.phases, q)
    write_metrics_csv(exp.output.directory / "metrics.csv", [row])
    _say(args, f"psnr {q.psnr_cube:.4f} dB, ssim {q.ssim_band_mean:.4f}")
    return EXIT_OK


def _cmd_oracle(args, exp) -> int:
    try:
        result = run_oracle(
            oracle_masks(exp),
            exp.sensing,
            seed=exp.plan.seed,
            rcond=exp.solver.rcond,
            cap=args.cap,
            corrupt_adjoint=args.corrupt_adjoint,
        )
    except ValueError as exc:
        print(f"oracle: {exc}", file=sys.stderr)
        return EXIT_CAP
    for name, dev in result.deviations.items():
        _say(args, f"{name:14s} max |deviation| = {dev:.3e}")
    _say(args, "oracle: all checks within tolerance" if result.ok else "oracle: MISMATCH")
    return EXIT_OK if result.ok else EXIT_MISMATCH


def _cmd_pipeline(args, exp) -> int:
    result = run_experiment(exp)
    q = result.quality
    _say(args, f"{exp.scene}: psnr {q.psnr_cube:.4f} dB, ssim {q.ssim_band_mean:.4f}; artifacts in {exp.output.directory}")
    return EXIT_OK


COMMANDS = {
    "phantom": _cmd_phantom,
    "mask": _cmd_mask,
    "sample": _cmd_sample,
    "reconstruct": _cmd_reconstruct,
    "metrics": _cmd_metrics,
    "oracle": _cmd_oracle,
    "pipeline": _cmd_pipeline,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        raw = load_config(args.config, args.overrides)
        exp = experiment_from_raw(raw, args.out, args.threads, args.seed)
        if args.command != "oracle":
            exp.output.directory.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, exp)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContainerError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverDivergence, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
