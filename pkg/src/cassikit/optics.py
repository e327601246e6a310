"""Sensing operator, its adjoint, pseudo-inverses and the dense oracle.

Band ``c`` is modulated by the aperture and written to detector columns
``[c*step, c*step + W)``; the detector sums everything that lands on a pixel.
Because every cube voxel hits exactly one detector pixel per shot, ``Phi Phi^T``
is block diagonal over detector pixels with one ``N x N`` block per pixel.
That block field is what makes the exact pseudo-inverse cheap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import CodedAperture, HyperCube, Measurement, MeasurementSet, SensingConfig
from .prng import SplitMix64

DEFAULT_RCOND = 1e-10
ORACLE_CAP = 10**7
EPS_E = 1e-3


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# array-level kernels
# ---------------------------------------------------------------------------


def disperse(z: np.ndarray, step: int) -> np.ndarray:
    """Shift-and-sum of a modulated cube ``z`` with shape ``(..., C, H, W)``.

    Returns ``(..., H, W + (C-1)*step)``. Bands are accumulated in order with
    Kahan compensation so results do not depend on how callers batch work.
    """
    *lead, C, H, W = z.shape
    out = np.zeros((*lead, H, W + (C - 1) * step))
    comp = np.zeros_like(out)
    for c in range(C):
        sl = (..., slice(None), slice(c * step, c * step + W))
        term = z[..., c, :, :] - comp[sl]
        total = out[sl] + term
        comp[sl] = (total - out[sl]) - term
        out[sl] = total
    return out


def windows(y: np.ndarray, bands: int, width: int, step: int) -> np.ndarray:
    """Stack the per-band detector windows of ``y`` (``(..., H, W')``) into ``(..., C, H, W)``."""
    return np.stack([y[..., c * step : c * step + width] for c in range(bands)], axis=-3)


def _kahan_sum(terms) -> np.ndarray:
    total = None
    comp = None
    for t in terms:
        if total is None:
            total = np.array(t, dtype=np.float64)
            comp = np.zeros_like(total)
            continue
        y = t - comp
        s = total + y
        comp = (s - total) - y
        total = s
    return total


def forward_array(x: np.ndarray, masks: np.ndarray, step: int) -> np.ndarray:
    """``(C, H, W)`` cube and ``(N, H, W)`` masks to ``(N, H, W')`` measurements."""
    return disperse(masks[:, None, :, :] * x[None, :, :, :], step)


def adjoint_array(y: np.ndarray, masks: np.ndarray, bands: int, step: int) -> np.ndarray:
    """Transpose of :func:`forward_array`: ``x_c = sum_i M_i * y_i[:, d_c:d_c+W]``."""
    W = masks.shape[-1]
    per_shot = windows(y, bands, W, step) * masks[:, None, :, :]
    return _kahan_sum(per_shot[i] for i in range(per_shot.shape[0]))


def gram_array(masks: np.ndarray, bands: int, step: int) -> np.ndarray:
    """Per-detector-pixel Gram blocks, shape ``(H, W', N, N)``."""
    products = masks[:, None, :, :] * masks[None, :, :, :]
    N, _, H, W = products.shape
    stacked = np.broadcast_to(products[:, :, None, :, :], (N, N, bands, H, W))
    g = disperse(stacked, step)
    return np.moveaxis(g, (0, 1), (2, 3))


def gram_pinv_apply(gram: np.ndarray, r: np.ndarray, rcond: float = DEFAULT_RCOND) -> np.ndarray:
    """Apply the per-pixel pseudo-inverse of ``gram`` to residuals ``r`` (``(N, H, W')``)."""
    N = gram.shape[-1]
    if N == 1:
        g = gram[..., 0, 0]
        safe = np.where(g > 0, g, 1.0)
        return np.where(g > 0, r[0] / safe, 0.0)[None]
    H, Wm = gram.shape[:2]
    evals, evecs = np.linalg.eigh(gram.reshape(-1, N, N))
    top = evals[:, -1:]
    keep = (evals > rcond * top) & (top > 0)
    inv = np.where(keep, 1.0 / np.where(keep, evals, 1.0), 0.0)
    rv = np.moveaxis(r, 0, -1).reshape(-1, N)
    coeff = np.einsum("pji,pj->pi", evecs, rv) * inv
    u = np.einsum("pij,pj->pi", evecs, coeff)
    return np.moveaxis(u.reshape(H, Wm, N), -1, 0)


def covered_array(gram: np.ndarray, rcond: float = DEFAULT_RCOND) -> np.ndarray:
    """Boolean ``(H, W')`` map of detector pixels whose Gram block is nonsingular."""
    N = gram.shape[-1]
    if N == 1:
        return gram[..., 0, 0] > 0
    evals = np.linalg.eigvalsh(gram.reshape(-1, N, N))
    ok = (evals[:, -1] > 0) & (evals[:, 0] > rcond * evals[:, -1])
    return ok.reshape(gram.shape[:2])


def pinv_exact_array(y: np.ndarray, masks: np.ndarray, bands: int, step: int, rcond: float = DEFAULT_RCOND) -> np.ndarray:
    gram = gram_array(masks, bands, step)
    return adjoint_array(gram_pinv_apply(gram, y, rcond), masks, bands, step)


# ---------------------------------------------------------------------------
# typed API
# ---------------------------------------------------------------------------


def mask_stack(apertures: Sequence[CodedAperture], config: SensingConfig) -> np.ndarray:
    if len(apertures) != config.shots:
        raise ShapeError(f"expected {config.shots} apertures, got {len(apertures)}")
    for i, m in enumerate(apertures, start=1):
        if m.shape != config.mask_shape:
            raise ShapeError(f"aperture {i} has shape {m.shape}, expected {config.mask_shape}")
    return np.stack([np.asarray(m.data, dtype=np.float64) for m in apertures])


def _cube_array(cube: HyperCube, config: SensingConfig) -> np.ndarray:
    if cube.shape != config.cube_shape:
        raise ShapeError(f"cube has shape {cube.shape}, expected {config.cube_shape}")
    return np.asarray(cube.data, dtype=np.float64)


def _meas_array(measurements: MeasurementSet, config: SensingConfig) -> np.ndarray:
    y = measurements.stack()
    expected = (config.shots, *config.meas_shape)
    if y.shape != expected:
        raise ShapeError(f"measurements have shape {y.shape}, expected {expected}")
    return y


def forward(cube: HyperCube, apertures: Sequence[CodedAperture], config: SensingConfig) -> MeasurementSet:
    """Noise-free coded snapshots of ``cube``, one per aperture."""
    y = forward_array(_cube_array(cube, config), mask_stack(apertures, config), config.step)
    return MeasurementSet.from_array(config, y)


def adjoint(measurements: MeasurementSet, apertures: Sequence[CodedAperture], config: SensingConfig) -> HyperCube:
    y = _meas_array(measurements, config)
    return HyperCube(adjoint_array(y, mask_stack(apertures, config), config.bands, config.step))


@dataclass(frozen=True)
class GramField:
    config: SensingConfig
    data: np.ndarray  # (H, W', N, N)

    def scalar(self) -> np.ndarray:
        """Overlap energy map; only meaningful for single-shot fields."""
        return self.data[..., 0, 0]

    def covered(self, rcond: float = DEFAULT_RCOND) -> np.ndarray:
        return covered_array(self.data, rcond)


def coverage_gram(apertures: Sequence[CodedAperture], config: SensingConfig) -> GramField:
    masks = mask_stack(apertures, config)
    return GramField(config, gram_array(masks, config.bands, config.step))


def pinv_exact(
    measurements: MeasurementSet,
    apertures: Sequence[CodedAperture],
    config: SensingConfig,
    rcond: float = DEFAULT_RCOND,
) -> HyperCube:
    """Moore-Penrose solution ``Phi^T (Phi Phi^T)^+ y`` via per-pixel Gram solves."""
    y = _meas_array(measurements, config)
    masks = mask_stack(apertures, config)
    return HyperCube(pinv_exact_array(y, masks, config.bands, config.step, rcond))


@dataclass(frozen=True)
class EnhancedMask:
    """Deterministic stand-ins for the learned modulation/rectification weights.

    ``modulation`` replaces the aperture inside the forward model and
    ``rectification`` divides the back-projected windows; both are ``(C, H, W)``.
    """

    modulation: np.ndarray
    rectification: np.ndarray

    def __post_init__(self):
        if self.modulation.shape != self.rectification.shape:
            raise ShapeError("modulation and rectification weights differ in shape")
        if not np.all(self.rectification > 0):
            raise ValueError("rectification weights must be strictly positive")

    @classmethod
    def from_aperture(cls, aperture: CodedAperture, config: SensingConfig, mode: str = "masked", eps: float = EPS_E):
        """``mode='masked'``: E = max(M, eps); ``mode='uniform'``: E = 1."""
        if aperture.shape != config.mask_shape:
            raise ShapeError(f"aperture has shape {aperture.shape}, expected {config.mask_shape}")
        m = np.asarray(aperture.data, dtype=np.float64)
        f = np.broadcast_to(m, config.cube_shape).copy()
        if mode == "masked":
            e = np.broadcast_to(np.maximum(m, eps), config.cube_shape).copy()
        elif mode == "uniform":
            e = np.ones(config.cube_shape)
        else:
            raise ValueError(f"unknown enhanced-mask mode {mode!r}")
        return cls(f, e)


def appendix_weights(config: SensingConfig) -> np.ndarray:
    """Inverse band-coverage count per detector column (the ``alpha`` row)."""
    count = np.zeros(config.meas_width)
    for d in config.offsets:
        count[d : d + config.width] += 1
    return 1.0 / count


def shift_and_sum(x: np.ndarray, modulation: np.ndarray, step: int) -> np.ndarray:
    """Single-shot degradation with per-band modulation weights, ``(C,H,W) -> (H,W')``."""
    return disperse(x * modulation, step)


def pinv_appendix_array(y: np.ndarray, rectification: np.ndarray, step: int) -> np.ndarray:
    C, H, W = rectification.shape
    count = np.zeros(y.shape[-1])
    for c in range(C):
        count[c * step : c * step + W] += 1
    z = y * (1.0 / count)
    return windows(z, C, W, step) / rectification


def pinv_appendix(measurement: Measurement, enhanced: EnhancedMask, config: SensingConfig) -> HyperCube:
    """Rectify by coverage count, crop each band's window, divide by E."""
    y = np.asarray(measurement.data, dtype=np.float64)
    if y.shape != config.meas_shape:
        raise ShapeError(f"measurement has shape {y.shape}, expected {config.meas_shape}")
    if enhanced.rectification.shape != config.cube_shape:
        raise ShapeError(f"enhanced mask has shape {enhanced.rectification.shape}, expected {config.cube_shape}")
    return HyperCube(pinv_appendix_array(y, enhanced.rectification, config.step))


def project_range_array(x: np.ndarray, masks: np.ndarray, step: int, rcond: float = DEFAULT_RCOND) -> np.ndarray:
    return pinv_exact_array(forward_array(x, masks, step), masks, x.shape[0], step, rcond)


def project_range(
    cube: HyperCube, apertures: Sequence[CodedAperture], config: SensingConfig, rcond: float = DEFAULT_RCOND
) -> HyperCube:
    x = _cube_array(cube, config)
    return HyperCube(project_range_array(x, mask_stack(apertures, config), config.step, rcond))


def project_null(
    cube: HyperCube, apertures: Sequence[CodedAperture], config: SensingConfig, rcond: float = DEFAULT_RCOND
) -> HyperCube:
    x = _cube_array(cube, config)
    return HyperCube(x - project_range_array(x, mask_stack(apertures, config), config.step, rcond))


def build_dense_phi(apertures: Sequence[CodedAperture], config: SensingConfig, cap: int = ORACLE_CAP) -> np.ndarray:
    """Explicit sensing matrix.

    Columns follow the cube's linear order ``((c*H)+h)*W + w``; rows are
    shot-major, then detector pixels row-major.
    """
    masks = mask_stack(apertures, config)
    N = config.shots
    C, H, W = config.cube_shape
    Wm = config.meas_width
    rows, cols = N * H * Wm, C * H * W
    if rows * cols > cap:
        raise ValueError(f"dense operator would have {rows} x {cols} = {rows * cols} entries, above the cap of {cap}")
    phi = np.zeros((rows, cols))
    for i in range(N):
        for c in range(C):
            d = c * config.step
            for h in range(H):
                for w in range(W):
                    phi[(i * H + h) * Wm + w + d, (c * H + h) * W + w] = masks[i, h, w]
    return phi


def rayleigh_sequence(apertures: Sequence[CodedAperture], config: SensingConfig, iters: int = 100, seed: int = 0) -> list[float]:
    """Rayleigh quotients ``|Phi v_k|^2 / |v_k|^2`` along the power iteration on ``Phi^T Phi``.

    The start vector is seeded SplitMix64 noise centred on zero.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    masks = mask_stack(apertures, config)
    v = SplitMix64(seed).uniform_block(int(np.prod(config.cube_shape))).reshape(config.cube_shape) - 0.5
    out = []
    for _ in range(iters):
        nv = np.linalg.norm(v)
        if nv == 0:
            out.append(0.0)
            break
        v = v / nv
        w = adjoint_array(forward_array(v, masks, config.step), masks, config.bands, config.step)
        out.append(float(np.vdot(v, w)))
        v = w
    return out


def operator_norm(apertures: Sequence[CodedAperture], config: SensingConfig, iters: int = 100, seed: int = 0) -> float:
    """Power-iteration estimate of the spectral norm of the sensing operator."""
    return float(np.sqrt(max(rayleigh_sequence(apertures, config, iters, seed))))
