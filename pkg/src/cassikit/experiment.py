"""Config-driven experiment pipelines and the dense-operator oracle.

Config files are plain text::

    # comment
    [sensing]
    height = 32
    width = 32

Every key may be overridden with ``section.key=value``. Relative paths are
resolved against the config file's directory.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (
    CodedAperture,
    ContainerError,
    HyperCube,
    MeasurementSet,
    PhantomSpec,
    SensingConfig,
    make_phantom,
    read_container,
    write_container,
)
from .metrics import QualityReport, quality_report
from .optics import (
    DEFAULT_RCOND,
    ORACLE_CAP,
    adjoint_array,
    build_dense_phi,
    forward_array,
    mask_stack,
    pinv_exact_array,
    project_range_array,
)
from .prng import SplitMix64
from .recon import ReconReport, SolverConfig, make_prox, reconstruct
from .sampling import NoiseModel, PlanMode, PredictorConfig, ShotPlan, acquire, plan_shots, random_mask

log = logging.getLogger(__name__)

ORACLE_TOL = 1e-8


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


# ---------------------------------------------------------------------------
# raw key/value parsing
# ---------------------------------------------------------------------------


@dataclass
class RawConfig:
    """Flat ``section.key -> (value, line)`` mapping plus the file it came from."""

    values: dict[str, tuple[str, Optional[int]]] = field(default_factory=dict)
    source: str = "<config>"
    base: Path = field(default_factory=Path.cwd)

    def has(self, key: str) -> bool:
        return key in self.values

    def sections(self) -> set[str]:
        return {k.split(".", 1)[0] for k in self.values}

    def _convert(self, key, kind, default):
        if key not in self.values:
            return default
        raw, line = self.values[key]
        try:
            return kind(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})", line, self.source) from None

    def str(self, key, default=None):
        return self._convert(key, str, default)

    def int(self, key, default=None):
        return self._convert(key, lambda s: int(s, 0), default)

    def float(self, key, default=None):
        return self._convert(key, float, default)

    def bool(self, key, default=False):
        def parse(s):
            low = s.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected a boolean")

        return self._convert(key, parse, default)

    def floats(self, key, default=None):
        return self._convert(key, lambda s: [float(v) for v in s.split(",") if v.strip()], default)

    def paths(self, key, default=None):
        return self._convert(key, lambda s: [self.base / v.strip() for v in s.split(",") if v.strip()], default)

    def path(self, key, default=None):
        return self._convert(key, lambda s: self.base / s.strip(), default)

    def line(self, key):
        return self.values.get(key, (None, None))[1]

    def error(self, key, message):
        return ConfigError(message, self.line(key), self.source)


def parse_config(text: str, source: str = "<config>", base: Path | None = None) -> RawConfig:
    raw = RawConfig(source=source, base=base or Path.cwd())
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]") or len(stripped) < 3:
                raise ConfigError(f"malformed section header {stripped!r}", lineno, source)
            section = stripped[1:-1].strip()
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", lineno, source)
        if section is None:
            raise ConfigError("key outside of any [section]", lineno, source)
        key, value = (s.strip() for s in stripped.split("=", 1))
        if not key:
            raise ConfigError("empty key", lineno, source)
        raw.values[f"{section}.{key}"] = (value, lineno)
    return raw


def load_config(path: Path | None, overrides: Sequence[str] = ()) -> RawConfig:
    if path is None:
        raw = RawConfig()
    else:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", None, str(path)) from None
        raw = parse_config(text, str(path), path.parent)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value", None, "--set")
        key, value = (s.strip() for s in item.split("=", 1))
        raw.values[key] = (value, None)
    return raw


# ---------------------------------------------------------------------------
# typed experiment config
# ---------------------------------------------------------------------------


@dataclass
class OutputOptions:
    directory: Path
    cubes: bool = True
    masks: bool = True
    band_images: bool = False
    csv: bool = True


@dataclass
class ExperimentConfig:
    sensing: SensingConfig
    phantom: Optional[PhantomSpec]
    input_cube: Optional[Path]
    plan: ShotPlan
    noise: NoiseModel
    solver: SolverConfig
    output: OutputOptions
    raw: RawConfig

    @property
    def scene(self) -> str:
        if self.phantom is not None:
            return f"phantom-{self.phantom.seed}"
        return self.input_cube.stem


def _build(raw: RawConfig, what: str, factory):
    try:
        return factory()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        section_keys = [k for k in raw.values if k.startswith(what + ".")]
        # prefer the key the message talks about, else the section's first line
        named = [k for k in section_keys if re.search(rf"\b{re.escape(k.split('.', 1)[1])}\b", str(exc))]
        lines = [raw.line(k) for k in (named or section_keys) if raw.line(k) is not None]
        line = min(lines, default=None)
        raise ConfigError(f"invalid [{what}] section: {exc}", line, raw.source) from None


def _load_masks(raw: RawConfig, key: str, sensing: SensingConfig) -> list[CodedAperture]:
    paths = raw.paths(key, [])
    out = []
    for p in paths:
        try:
            obj = read_container(p, sensing)
        except (OSError, ContainerError) as exc:
            raise raw.error(key, str(exc)) from None
        if not isinstance(obj, CodedAperture):
            raise raw.error(key, f"{p} does not hold an aperture")
        out.append(obj)
    return out


def _load_layers(raw: RawConfig, sensing: SensingConfig):
    if not raw.has("shots.kernels"):
        return None
    paths = raw.paths("shots.kernels")
    channels = raw.floats("shots.channels", [4, 4, 4])
    if len(paths) != 3 or len(channels) != 3:
        raise raw.error("shots.kernels", "three kernel files and three channel counts are required")
    layers, in_ch = [], 1
    for p, out_ch in zip(paths, channels):
        try:
            obj = read_container(p)
        except (OSError, ContainerError) as exc:
            raise raw.error("shots.kernels", str(exc)) from None
        data = np.asarray(obj.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        out_ch = int(out_ch)
        if data.shape[0] != out_ch * in_ch:
            raise raw.error("shots.kernels", f"{p} holds {data.shape[0]} kernels, expected {out_ch}x{in_ch}")
        layers.append(data.reshape(out_ch, in_ch, *data.shape[1:]))
        in_ch = out_ch
    return layers


def experiment_from_raw(raw: RawConfig, out_dir: Path | None = None, threads: int = 1, seed: int | None = None) -> ExperimentConfig:
    for sec in raw.sections():
        if sec not in ("sensing", "phantom", "input", "shots", "noise", "solver", "output", "oracle"):
            key = next(k for k in raw.values if k.startswith(sec + "."))
            raise raw.error(key, f"unknown section [{sec}]")

    sensing = _build(
        raw,
        "sensing",
        lambda: SensingConfig(
            raw.int("sensing.height", 32),
            raw.int("sensing.width", 32),
            raw.int("sensing.bands", 4),
            raw.int("sensing.step", 2),
            raw.int("sensing.shots", 1),
        ),
    )

    has_phantom = any(k.startswith("phantom.") for k in raw.values)
    input_cube = raw.path("input.cube")
    if has_phantom and input_cube is not None:
        raise raw.error("input.cube", "give either a [phantom] section or input.cube, not both")
    phantom = None
    if input_cube is None:
        phantom = _build(
            raw,
            "phantom",
            lambda: PhantomSpec(
                seed if seed is not None else raw.int("phantom.seed", 0),
                raw.int("phantom.blobs", 6),
                raw.float("phantom.background", 0.1),
                raw.float("phantom.spectral_sigma", 2.0),
                (raw.float("phantom.radius_min", 2.0), raw.float("phantom.radius_max", 6.0)),
            ),
        )
    elif not input_cube.exists():
        raise raw.error("input.cube", f"input cube {input_cube} does not exist")

    plan_seed = seed if seed is not None else raw.int("shots.seed", 0)
    mode = raw.str("shots.mode", "complementary")
    masks = _load_masks(raw, "shots.masks", sensing)

    def make_plan():
        predictor = None
        if mode == PlanMode.CONTENT_AWARE.value:
            shared = _load_masks(raw, "shots.shared", sensing)
            if not shared:
                first = masks[0] if masks else random_mask(sensing, raw.float("shots.density", 0.5), plan_seed)
                shared = [first]
                for i in range(1, sensing.shots):
                    shared.append(CodedAperture(1.0 - first.data, first.kind) if i % 2 else first)
            eta = raw.floats("shots.eta", [0.1])
            if len(eta) == 1:
                eta = [0.0] + eta * (sensing.shots - 1)
            layers = _load_layers(raw, sensing)
            kwargs = {"layers": tuple(layers)} if layers is not None else {}
            predictor = PredictorConfig(tuple(shared), tuple(eta), **kwargs)
        return ShotPlan(mode, sensing.shots, plan_seed, raw.float("shots.density", 0.5), tuple(masks), predictor)

    plan = _build(raw, "shots", make_plan)

    noise = _build(
        raw,
        "noise",
        lambda: NoiseModel(
            raw.str("noise.kind", "none"),
            raw.float("noise.sigma", 0.0),
            raw.int("noise.full_scale", 2047),
            seed if seed is not None else raw.int("noise.seed", 0),
        ),
    )

    def make_solver():
        step = raw.str("solver.step", "auto")
        tv_iters = raw.int("solver.tv_iters", 50)
        rho = raw.floats("solver.rho", [1.0])
        return SolverConfig(
            algorithm=raw.str("solver.algorithm", "rnd"),
            phases=raw.int("solver.phases", 10),
            step=step if step == "auto" else float(step),
            rho=rho[0] if len(rho) == 1 else tuple(rho),
            lam=raw.float("solver.lam", 0.01),
            prox=make_prox(raw.str("solver.prox", "tv"), tv_iters, threads),
            tv_iters=tv_iters,
            weights=raw.floats("solver.weights", None),
            pinv=raw.str("solver.pinv", "exact"),
            rcond=raw.float("solver.rcond", DEFAULT_RCOND),
            init=raw.str("solver.init", "pinv"),
            fusion=raw.str("solver.fusion", "weighted"),
            enhanced=raw.str("solver.enhanced", "masked"),
            norm_iters=raw.int("solver.norm_iters", 100),
            workers=threads,
        )

    solver = _build(raw, "solver", make_solver)

    directory = out_dir or raw.path("output.dir", Path("out"))
    output = OutputOptions(
        Path(directory),
        raw.bool("output.cubes", True),
        raw.bool("output.masks", True),
        raw.bool("output.band_images", False),
        raw.bool("output.csv", True),
    )
    return ExperimentConfig(sensing, phantom, input_cube, plan, noise, solver, output, raw)


# ---------------------------------------------------------------------------
# artifact writers
# ---------------------------------------------------------------------------


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


METRIC_COLUMNS = ["scene", "algorithm", "shots", "K", "mse", "psnr_cube", "psnr_band_mean", "ssim"]
ITERATION_COLUMNS = ["iteration", "objective", "residual", "psnr"]


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    path.write_text(buf.getvalue(), newline="")


def write_iterations_csv(path: Path, report: ReconReport) -> None:
    _write_csv(path, ITERATION_COLUMNS, [[r.iteration, r.objective, r.residual, r.psnr] for r in report.records])


def metrics_row(scene: str, algorithm: str, shots: int, phases: int, q: QualityReport) -> list:
    return [scene, algorithm, shots, phases, q.mse, q.psnr_cube, q.psnr_band_mean, q.ssim_band_mean]


def write_metrics_csv(path: Path, rows: list[list]) -> None:
    _write_csv(path, METRIC_COLUMNS, rows)


def write_pgm(path: Path, band: np.ndarray) -> None:
    """16-bit binary PGM with a linear map of [0, 1] onto [0, 65535]."""
    levels = np.round(np.clip(band, 0.0, 1.0) * 65535.0).astype(">u2")
    h, w = band.shape
    path.write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + levels.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    return np.frombuffer(parts[3], dtype=">u2").reshape(h, w).astype(np.float64) / maxval


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    truth: HyperCube
    measurements: MeasurementSet
    masks: list[CodedAperture]
    report: ReconReport
    quality: QualityReport
    metrics_row: list


def load_scene(exp: ExperimentConfig) -> HyperCube:
    if exp.phantom is not None:
        return make_phantom(exp.phantom, exp.sensing)
    obj = read_container(exp.input_cube, exp.sensing)
    if not isinstance(obj, HyperCube):
        raise exp.raw.error("input.cube", f"{exp.input_cube} does not hold a cube")
    return obj


def write_masks(directory: Path, masks: Sequence[CodedAperture]) -> None:
    for i, m in enumerate(masks, start=1):
        write_container(m, directory / f"mask_{i}.hsc")


def write_measurements(directory: Path, measurements: MeasurementSet) -> None:
    for m in measurements:
        write_container(m, directory / f"measurement_{m.shot}.hsc")


def run_experiment(exp: ExperimentConfig) -> ExperimentResult:
    """Phantom, progressive acquisition, reconstruction and metrics, with artifacts on disk."""
    out = exp.output.directory
    out.mkdir(parents=True, exist_ok=True)
    truth = load_scene(exp)
    measurements, masks = acquire(truth, exp.plan, exp.sensing, exp.noise)
    report = reconstruct(measurements, masks, exp.sensing, exp.solver, truth=truth)
    q = quality_report(report.cube, truth)
    row = metrics_row(exp.scene, exp.solver.algorithm, exp.sensing.shots, exp.solver.phases, q)

    if exp.output.cubes:
        write_container(truth, out / "truth.hsc")
        write_container(report.cube, out / "recon.hsc")
        write_measurements(out, measurements)
    if exp.output.masks:
        write_masks(out, masks)
    if exp.output.csv:
        write_iterations_csv(out / "iterations.csv", report)
        write_metrics_csv(out / "metrics.csv", [row])
    if exp.output.band_images:
        bands = out / "bands"
        bands.mkdir(exist_ok=True)
        for c in range(exp.sensing.bands):
            write_pgm(bands / f"recon_band_{c + 1:02d}.pgm", report.cube.data[c])
    return ExperimentResult(truth, measurements, masks, report, q, row)


# ---------------------------------------------------------------------------
# dense oracle
# ---------------------------------------------------------------------------


@dataclass
class OracleResult:
    deviations: dict[str, float]
    tolerance: float = ORACLE_TOL

    @property
    def ok(self) -> bool:
        return all(v <= self.tolerance for v in self.deviations.values())


def oracle_masks(exp: ExperimentConfig) -> list[CodedAperture]:
    source = plan_shots(exp.plan, exp.sensing)
    if isinstance(source, list):
        return source
    return list(exp.plan.predictor.shared)


def run_oracle(
    masks: Sequence[CodedAperture],
    config: SensingConfig,
    seed: int = 0,
    rcond: float = DEFAULT_RCOND,
    cap: int = ORACLE_CAP,
    corrupt_adjoint: bool = False,
) -> OracleResult:
    """Compare the matrix-free operators with explicit dense algebra on seeded data.

    Raises ``ValueError`` when the dense matrix would exceed ``cap`` entries.
    ``corrupt_adjoint`` perturbs the matrix-free adjoint as a negative control.
    """
    phi = build_dense_phi(masks, config, cap)
    m = mask_stack(masks, config)
    rng = SplitMix64(seed)
    x = rng.uniform_block(int(np.prod(config.cube_shape))).reshape(config.cube_shape)
    y = rng.uniform_block(phi.shape[0]).reshape(config.shots, *config.meas_shape)

    adj = adjoint_array(y, m, config.bands, config.step)
    if corrupt_adjoint:
        adj = adj.copy()
        adj.flat[0] += 1e-3
    # the dense pseudo-inverse threshold is on singular values, i.e. the
    # square root of the Gram eigenvalue threshold
    phi_pinv = np.linalg.pinv(phi, rcond=math.sqrt(rcond))
    deviations = {
        "forward": float(np.max(np.abs(phi @ x.ravel() - forward_array(x, m, config.step).ravel()))),
        "adjoint": float(np.max(np.abs(phi.T @ y.ravel() - adj.ravel()))),
        "pinv_exact": float(
            np.max(np.abs(phi_pinv @ y.ravel() - pinv_exact_array(y, m, config.bands, config.step, rcond).ravel()))
        ),
        "project_range": float(
            np.max(np.abs(phi_pinv @ (phi @ x.ravel()) - project_range_array(x, m, config.step, rcond).ravel()))
        ),
    }
    return OracleResult(deviations)
