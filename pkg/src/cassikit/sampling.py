"""Aperture generation, the content-aware mask predictor, shot plans and noise."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .core import CodedAperture, HyperCube, MaskKind, Measurement, MeasurementSet, SensingConfig
from .optics import forward_array, mask_stack, windows
from .prng import SplitMix64


def random_mask(config: SensingConfig, p: float = 0.5, seed: int = 0) -> CodedAperture:
    """Binary aperture whose pixel ``(h, w)`` is open iff draw ``h*W + w`` is below ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"open fraction p must lie in [0, 1], got {p}")
    u = SplitMix64(seed).uniform_block(config.height * config.width).reshape(config.mask_shape)
    return CodedAperture((u < p).astype(np.float64), MaskKind.BINARY)


def complement_mask(mask: CodedAperture) -> CodedAperture:
    return CodedAperture(1.0 - np.asarray(mask.data, dtype=np.float64), mask.kind)


def clamp01(a: np.ndarray) -> np.ndarray:
    return np.clip(a, 0.0, 1.0)


# ---------------------------------------------------------------------------
# predictor
# ---------------------------------------------------------------------------

_BOX = np.full((3, 3), 1.0 / 9.0)
_EDGES = [
    np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0,
    np.array([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]]) / 8.0,
    np.array([[0.0, 1.0, 2.0], [-1.0, 0.0, 1.0], [-2.0, -1.0, 0.0]]) / 8.0,
    np.array([[2.0, 1.0, 0.0], [1.0, 0.0, -1.0], [0.0, -1.0, -2.0]]) / 8.0,
]


def default_filter_bank(channels: int = 4) -> list[np.ndarray]:
    """Three layers of weights shaped ``(out, in, k, k)``.

    Layer one smooths with the 3x3 box and then takes one oriented edge
    response per channel (the two stages folded into a single 5x5 kernel);
    layers two and three box-blur each channel on its own.
    """
    if channels != len(_EDGES):
        raise ValueError(f"the default bank has {len(_EDGES)} edge channels")
    first = np.stack([_full_conv(_BOX, e) for e in _EDGES])[:, None]
    depthwise = np.zeros((channels, channels, 3, 3))
    for k in range(channels):
        depthwise[k, k] = _BOX
    return [first, depthwise.copy(), depthwise.copy()]


def _full_conv(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + b.shape[0] - 1, a.shape[1] + b.shape[1] - 1))
    for i in range(b.shape[0]):
        for j in range(b.shape[1]):
            out[i : i + a.shape[0], j : j + a.shape[1]] += b[i, j] * a
    return out


@dataclass(frozen=True)
class PredictorConfig:
    """Settings of the progressive mask predictor.

    ``shared`` and ``eta`` are indexed by shot (entry 0 is shot 1, whose
    aperture is ``shared[0]`` itself); ``layers`` hold ``(out, in, k, k)``
    correlation weights with odd ``k``.
    """

    shared: tuple[CodedAperture, ...]
    eta: tuple[float, ...] = ()
    layers: tuple[np.ndarray, ...] = field(default_factory=lambda: tuple(default_filter_bank()))
    clamp: str = "clamp01"

    def __post_init__(self):
        shared = tuple(self.shared)
        eta = tuple(float(e) for e in self.eta) if self.eta else (0.1,) * len(shared)
        if len(eta) != len(shared):
            raise ValueError(f"eta has {len(eta)} entries for {len(shared)} shared masks")
        if not all(np.isfinite(eta)):
            raise ValueError("eta must be finite")
        layers = tuple(np.asarray(w, dtype=np.float64) for w in self.layers)
        if len(layers) != 3:
            raise ValueError(f"the predictor has exactly three layers, got {len(layers)}")
        in_ch = 1
        for n, w in enumerate(layers, start=1):
            if w.ndim != 4:
                raise ValueError(f"layer {n} weights must be (out, in, k, k), got shape {w.shape}")
            if w.shape[1] != in_ch:
                raise ValueError(f"layer {n} expects {w.shape[1]} input channels, previous layer gives {in_ch}")
            if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
                raise ValueError(f"layer {n} kernel sides must be odd, got {w.shape[2:]}")
            in_ch = w.shape[0]
        if self.clamp != "clamp01":
            raise ValueError(f"unknown clamp mode {self.clamp!r}")
        object.__setattr__(self, "shared", shared)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "layers", layers)


def realign(y: np.ndarray, config: SensingConfig) -> np.ndarray:
    """Average of the C dispersion-aligned detector windows, ``(H, W)``."""
    return windows(y, config.bands, config.width, config.step).mean(axis=0)


def content_features(y: np.ndarray, layers: Sequence[np.ndarray], config: SensingConfig) -> np.ndarray:
    """Content-aware component of the predictor, an ``(H, W)`` field in [0, 1]."""
    field_ = realign(np.asarray(y, dtype=np.float64), config)
    # offset removal makes the predictor blind to constant shifts of y
    feats = (field_ - field_.min())[None]
    for w in layers:
        out = np.zeros((w.shape[0], *feats.shape[1:]))
        for o in range(w.shape[0]):
            for i in range(w.shape[1]):
                out[o] += ndimage.correlate(feats[i], w[o, i], mode="constant", cval=0.0)
        feats = np.maximum(out, 0.0)
    lo, hi = feats.min(), feats.max()
    if hi > lo:
        feats = (feats - lo) / (hi - lo)
    else:
        feats = np.full_like(feats, 0.5)
    return feats.mean(axis=0)


def predict_mask(prev: Measurement, predictor: PredictorConfig, shot: int, config: SensingConfig) -> CodedAperture:
    """Aperture for ``shot`` from the previous snapshot: ``clamp01(shared + eta * content)``."""
    if shot < 2:
        raise ValueError("shot 1 has no predecessor; its aperture is the plan's first shared mask")
    if shot > len(predictor.shared):
        raise ValueError(f"no shared mask configured for shot {shot}")
    if prev.shape != config.meas_shape:
        raise ValueError(f"measurement has shape {prev.shape}, expected {config.meas_shape}")
    base = np.asarray(predictor.shared[shot - 1].data, dtype=np.float64)
    eta = predictor.eta[shot - 1]
    content = content_features(prev.data, predictor.layers, config)
    return CodedAperture.infer(clamp01(base + eta * content))


# ---------------------------------------------------------------------------
# shot plans
# ---------------------------------------------------------------------------


class PlanMode(str, enum.Enum):
    FIXED = "fixed"
    COMPLEMENTARY = "complementary"
    RANDOM = "random"
    CONTENT_AWARE = "content_aware"


@dataclass(frozen=True)
class ShotPlan:
    """How the N apertures are chosen.

    ``masks`` supplies the fixed apertures, or the base aperture for the
    complementary mode; absent masks are drawn with :func:`random_mask` at
    open fraction ``density``.
    """

    mode: PlanMode
    shots: int
    seed: int = 0
    density: float = 0.5
    masks: tuple[CodedAperture, ...] = ()
    predictor: PredictorConfig | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", PlanMode(self.mode))
        object.__setattr__(self, "masks", tuple(self.masks))
        if self.shots < 1:
            raise ValueError("a plan needs at least one shot")
        if self.mode is PlanMode.CONTENT_AWARE:
            if self.predictor is None:
                raise ValueError("content_aware plans need a predictor config")
            if len(self.predictor.shared) != self.shots:
                raise ValueError(f"predictor has {len(self.predictor.shared)} shared masks for {self.shots} shots")
        if self.mode is PlanMode.FIXED and self.masks and len(self.masks) != self.shots:
            raise ValueError(f"fixed plan lists {len(self.masks)} masks for {self.shots} shots")


class ProgressiveSampler:
    """Sequential aperture source: shot i's mask is known once shot i-1 is measured."""

    def __init__(self, plan: ShotPlan, config: SensingConfig):
        self.plan = plan
        self.config = config
        self.first = plan.predictor.shared[0]
        self.issued = [self.first]

    def next_mask(self, prev: Measurement) -> CodedAperture:
        shot = len(self.issued) + 1
        if shot > self.plan.shots:
            raise StopIteration("all shots of the plan have been issued")
        if prev.shot != shot - 1:
            raise ValueError(f"expected the measurement of shot {shot - 1}, got shot {prev.shot}")
        mask = predict_mask(prev, self.plan.predictor, shot, self.config)
        self.issued.append(mask)
        return mask

    @property
    def done(self) -> bool:
        return len(self.issued) >= self.plan.shots


def plan_shots(plan: ShotPlan, config: SensingConfig) -> list[CodedAperture] | ProgressiveSampler:
    """All apertures up front, or a :class:`ProgressiveSampler` for content-aware plans."""
    n = plan.shots
    if plan.mode is PlanMode.CONTENT_AWARE:
        return ProgressiveSampler(plan, config)
    if plan.mode is PlanMode.RANDOM:
        return [random_mask(config, plan.density, plan.seed + i) for i in range(n)]
    if plan.mode is PlanMode.COMPLEMENTARY:
        base = plan.masks[0] if plan.masks else random_mask(config, plan.density, plan.seed)
        pair = [base, complement_mask(base)]
        return [pair[i % 2] for i in range(n)]
    if plan.masks:
        return list(plan.masks)
    return [random_mask(config, plan.density, plan.seed + i) for i in range(n)]


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------


class NoiseKind(str, enum.Enum):
    NONE = "none"
    GAUSSIAN = "gaussian"
    SHOT11 = "shot11"


@dataclass(frozen=True)
class NoiseModel:
    kind: NoiseKind = NoiseKind.NONE
    sigma: float = 0.0
    full_scale: int = 2047
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")
        if int(self.full_scale) != self.full_scale or self.full_scale < 1:
            raise ValueError("full_scale must be a positive integer")


POISSON_INVERSION_LIMIT = 50.0


def poisson_counts(k: np.ndarray, rng: SplitMix64) -> np.ndarray:
    """Poisson draws with means ``k`` (flattened order), two uniforms per element.

    Means below 50 use sequential-search inversion on the first uniform;
    larger means use ``round(k + sqrt(k) g)`` clamped at 0, where ``g`` is the
    Box-Muller cosine variate of the element's uniform pair.
    """
    flat = np.asarray(k, dtype=np.float64).ravel()
    u = rng.uniform_block(2 * flat.size).reshape(-1, 2)
    out = np.zeros(flat.size)

    small = flat < POISSON_INVERSION_LIMIT
    idx = np.flatnonzero(small & (flat > 0))
    if idx.size:
        lam = flat[idx]
        target = u[idx, 0]
        count = np.zeros(idx.size)
        p = np.exp(-lam)
        cdf = p.copy()
        active = target > cdf
        x = 0
        while active.any():
            x += 1
            p = p * lam / x
            cdf = cdf + p
            count[active] = x
            # float round-off can leave cdf a hair below 1; stop where terms vanish
            active &= (target > cdf) & (p > 0)
        out[idx] = count

    big = np.flatnonzero(~small)
    if big.size:
        lam = flat[big]
        g = np.sqrt(-2.0 * np.log1p(-u[big, 0])) * np.cos(2.0 * np.pi * u[big, 1])
        out[big] = np.maximum(np.round(lam + np.sqrt(lam) * g), 0.0)
    return out.reshape(np.shape(k))


def noise_arrays(y: np.ndarray, model: NoiseModel) -> np.ndarray:
    """Apply ``model`` to a stack of clean snapshots ``(N, H, W')``."""
    y = np.asarray(y, dtype=np.float64)
    if model.kind is NoiseKind.NONE:
        return y.copy()
    rng = SplitMix64(model.seed)
    if model.kind is NoiseKind.GAUSSIAN:
        if model.sigma == 0.0:
            return y.copy()
        return y + model.sigma * rng.normal_block(y.size).reshape(y.shape)
    if np.any(y < 0):
        raise ValueError("shot noise needs non-negative measurements")
    y_max = float(y.max()) if y.size else 0.0
    if y_max == 0.0:
        y_max = 1.0
    counts = poisson_counts(y * model.full_scale / y_max, rng)
    return counts * (y_max / model.full_scale)


def inject_noise(measurements: MeasurementSet, model: NoiseModel) -> MeasurementSet:
    return MeasurementSet.from_array(measurements.config, noise_arrays(measurements.stack(), model))


# ---------------------------------------------------------------------------
# acquisition loop
# ---------------------------------------------------------------------------


def acquire(
    cube: HyperCube,
    plan: ShotPlan,
    config: SensingConfig,
    noise: NoiseModel = NoiseModel(),
) -> tuple[MeasurementSet, list[CodedAperture]]:
    """Capture every shot of ``plan``.

    Shots are measured one at a time so a content-aware plan sees the
    (noisy) snapshot i-1 before choosing aperture i. Shot i is noised on its
    own with seed ``noise.seed + i - 1``.
    """
    if plan.shots != config.shots:
        raise ValueError(f"plan has {plan.shots} shots but the sensing config expects {config.shots}")
    x = np.asarray(cube.data, dtype=np.float64)
    if x.shape != config.cube_shape:
        raise ValueError(f"cube has shape {x.shape}, expected {config.cube_shape}")
    source = plan_shots(plan, config)
    progressive = isinstance(source, ProgressiveSampler)
    masks: list[CodedAperture] = [source.first] if progressive else list(source)
    shots: list[Measurement] = []
    for i in range(1, config.shots + 1):
        if progressive and i > 1:
            masks.append(source.next_mask(shots[-1]))
        clean = forward_array(x, np.asarray(masks[i - 1].data, dtype=np.float64)[None], config.step)
        shot_noise = NoiseModel(noise.kind, noise.sigma, noise.full_scale, noise.seed + i - 1)
        shots.append(Measurement(noise_arrays(clean, shot_noise)[0], i))
    mask_stack(masks, config)
    return MeasurementSet(config, tuple(shots)), masks
