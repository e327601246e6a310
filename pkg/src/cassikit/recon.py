"""Iterative reconstruction: ISTA, GAP-TV and the range-null decomposition scheme.

All three alternate a data step with a denoising (proximal) step. The
denoiser is pluggable through :class:`ProxOperator`; total variation is the
shipped instance.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .core import CodedAperture, HyperCube, MeasurementSet, SensingConfig
from .metrics import psnr
from .optics import (
    DEFAULT_RCOND,
    EnhancedMask,
    adjoint_array,
    forward_array,
    gram_array,
    gram_pinv_apply,
    mask_stack,
    operator_norm,
    pinv_appendix_array,
    shift_and_sum,
)

log = logging.getLogger(__name__)

ArrayOrCube = Union[np.ndarray, HyperCube]


class SolverDivergence(RuntimeError):
    """An iterate became non-finite."""


# ---------------------------------------------------------------------------
# total variation
# ---------------------------------------------------------------------------


def _grad(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gy = np.zeros_like(u)
    gx = np.zeros_like(u)
    gy[..., :-1, :] = u[..., 1:, :] - u[..., :-1, :]
    gx[..., :, :-1] = u[..., :, 1:] - u[..., :, :-1]
    return gy, gx


def _div(py: np.ndarray, px: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`_grad`."""
    d = np.zeros_like(py)
    d[..., 0, :] += py[..., 0, :]
    d[..., 1:-1, :] += py[..., 1:-1, :] - py[..., :-2, :]
    d[..., -1, :] -= py[..., -2, :]
    d[..., :, 0] += px[..., :, 0]
    d[..., :, 1:-1] += px[..., :, 1:-1] - px[..., :, :-2]
    d[..., :, -1] -= px[..., :, -2]
    return d


def tv_iso(u: np.ndarray) -> float:
    """Isotropic total variation summed over bands (forward differences, Neumann edges)."""
    gy, gx = _grad(np.asarray(u, dtype=np.float64))
    return float(np.sqrt(gy**2 + gx**2).sum())


def _chambolle(z: np.ndarray, strength: float, iters: int, tau: float) -> np.ndarray:
    if z.shape[-2] == 1 and z.shape[-1] == 1:
        return z.copy()
    py = np.zeros_like(z)
    px = np.zeros_like(z)
    # the usual update with numerator and denominator scaled by strength, so
    # tiny strengths never divide z into overflow
    for _ in range(iters):
        gy, gx = _grad(strength * _div(py, px) - z)
        norm = strength + tau * np.sqrt(gy**2 + gx**2)
        py = (strength * py + tau * gy) / norm
        px = (strength * px + tau * gx) / norm
    return z - strength * _div(py, px)


def tv_denoise(cube: ArrayOrCube, strength: float, iters: int = 50, tau: float = 0.25, workers: int = 1) -> ArrayOrCube:
    """Band-wise TV proximal map ``argmin_u 0.5|u - z|^2 + strength * TV(u)``.

    Chambolle's dual projection with a fixed number of iterations. Bands are
    independent, so ``workers > 1`` splits them over threads without
    changing a single bit of the result.
    """
    if strength < 0:
        raise ValueError("TV strength must be non-negative")
    wrap = isinstance(cube, HyperCube)
    z = np.asarray(cube.data if wrap else cube, dtype=np.float64)
    if strength == 0 or iters == 0:
        out = z.copy()
    elif z.ndim == 2:
        out = _chambolle(z, strength, iters, tau)
    elif workers <= 1 or z.shape[0] == 1:
        out = _chambolle(z, strength, iters, tau)
    else:
        chunks = np.array_split(np.arange(z.shape[0]), min(workers, z.shape[0]))
        out = np.empty_like(z)
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = pool.map(lambda idx: _chambolle(z[idx], strength, iters, tau), chunks)
            for idx, part in zip(chunks, parts):
                out[idx] = part
    return HyperCube(out) if wrap else out


class ProxOperator:
    """Denoiser ``D(z, strength)`` standing in for a proximal map.

    Subclasses implement :meth:`apply` on float64 ``(C, H, W)`` arrays and
    must return ``z`` unchanged when ``strength`` is zero.
    """

    name = "abstract"

    def apply(self, z: np.ndarray, strength: float) -> np.ndarray:
        raise NotImplementedError

    @property
    def params(self) -> dict:
        return {}

    def __call__(self, z: ArrayOrCube, strength: float) -> ArrayOrCube:
        if isinstance(z, HyperCube):
            return HyperCube(self.apply(np.asarray(z.data, dtype=np.float64), strength))
        out = self.apply(np.asarray(z, dtype=np.float64), strength)
        if out.shape != np.shape(z):
            raise ValueError(f"{self.name} changed the shape from {np.shape(z)} to {out.shape}")
        return out


class IdentityProx(ProxOperator):
    name = "identity"

    def apply(self, z, strength):
        return z.copy()


class TVProx(ProxOperator):
    name = "tv_chambolle"

    def __init__(self, iters: int = 50, tau: float = 0.25, workers: int = 1):
        self.iters = iters
        self.tau = tau
        self.workers = workers

    @property
    def params(self):
        return {"iters": self.iters, "tau": self.tau}

    def apply(self, z, strength):
        return tv_denoise(z, strength, self.iters, self.tau, self.workers)


def make_prox(name: str, tv_iters: int = 50, workers: int = 1) -> ProxOperator:
    if name == "identity":
        return IdentityProx()
    if name in ("tv", "tv_chambolle"):
        return TVProx(tv_iters, workers=workers)
    raise ValueError(f"unknown prox operator {name!r}")


# ---------------------------------------------------------------------------
# configuration and reporting
# ---------------------------------------------------------------------------


@dataclass
class SolverConfig:
    """Knobs shared by the three solvers.

    ``step`` is the ISTA step (a number or ``"auto"``); ``rho`` the per-phase
    RND step, either one value for every phase or one per phase. ``weights``
    fuse the per-shot RND estimates (uniform when omitted). ``fusion`` picks
    the per-shot weighted scheme or a joint pseudo-inverse over all shots.
    """

    algorithm: str = "rnd"
    phases: int = 10
    step: Union[float, str] = "auto"
    rho: Union[float, Sequence[float]] = 1.0
    lam: float = 0.01
    prox: Optional[ProxOperator] = None
    tv_iters: int = 50
    weights: Optional[Sequence[float]] = None
    pinv: str = "exact"
    rcond: float = DEFAULT_RCOND
    init: str = "pinv"
    fusion: str = "weighted"
    enhanced: str = "masked"
    norm_iters: int = 100
    workers: int = 1

    def __post_init__(self):
        if self.algorithm not in ("ista", "gap_tv", "rnd"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.phases < 1:
            raise ValueError("phases must be positive")
        if self.step != "auto" and not (isinstance(self.step, (int, float)) and self.step > 0):
            raise ValueError(f"step must be positive or 'auto', got {self.step!r}")
        if not self.lam >= 0:
            raise ValueError("lam must be non-negative")
        if self.tv_iters < 1:
            raise ValueError("tv_iters must be positive")
        if self.pinv not in ("exact", "appendix"):
            raise ValueError(f"unknown pinv mode {self.pinv!r}")
        if self.init not in ("adjoint", "pinv", "zero"):
            raise ValueError(f"unknown initialization {self.init!r}")
        if self.fusion not in ("weighted", "joint"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if not self.rcond > 0:
            raise ValueError("rcond must be positive")
        if any(r <= 0 for r in np.atleast_1d(self.rho)):
            raise ValueError("rho values must be positive")
        if self.prox is None:
            self.prox = make_prox("tv", self.tv_iters, self.workers)

    def rho_at(self, k: int) -> float:
        """Step of phase ``k`` (1-based)."""
        rho = np.atleast_1d(np.asarray(self.rho, dtype=np.float64))
        if rho.size == 1:
            return float(rho[0])
        if rho.size != self.phases:
            raise ValueError(f"{rho.size} rho values for {self.phases} phases")
        return float(rho[k - 1])

    def fusion_weights(self, shots: int) -> np.ndarray:
        if self.weights is None:
            return np.full(shots, 1.0 / shots)
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (shots,):
            raise ValueError(f"{w.size} fusion weights for {shots} shots")
        return w


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    residual: float
    psnr: Optional[float] = None


@dataclass
class ReconReport:
    algorithm: str
    records: list[IterationRecord]
    cube: HyperCube
    wall_time: float
    step: Optional[float] = None

    @property
    def objectives(self) -> list[float]:
        return [r.objective for r in self.records]

    @property
    def final_psnr(self) -> Optional[float]:
        return self.records[-1].psnr if self.records else None


def objective(x: np.ndarray, y: np.ndarray, masks: np.ndarray, step: int, lam: float) -> tuple[float, float]:
    """``(0.5 |y - Phi x|^2 + lam * TV(x), |y - Phi x|)``."""
    r = y - forward_array(x, masks, step)
    res = float(np.sqrt(np.sum(r * r)))
    return 0.5 * res * res + lam * tv_iso(x), res


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------


@dataclass
class _Problem:
    y: np.ndarray
    masks: np.ndarray
    config: SensingConfig
    truth: Optional[np.ndarray]

    @property
    def bands(self):
        return self.config.bands

    @property
    def step(self):
        return self.config.step


def _setup(measurements, apertures, config, truth) -> _Problem:
    masks = mask_stack(apertures, config)
    y = measurements.stack()
    if y.shape != (config.shots, *config.meas_shape):
        raise ValueError(f"measurements have shape {y.shape}, expected {(config.shots, *config.meas_shape)}")
    gt = None
    if truth is not None:
        gt = np.asarray(truth.data if isinstance(truth, HyperCube) else truth, dtype=np.float64)
        if gt.shape != config.cube_shape:
            raise ValueError(f"ground truth has shape {gt.shape}, expected {config.cube_shape}")
    return _Problem(y, masks, config, gt)


def _initial(prob: _Problem, solver: SolverConfig, x0) -> np.ndarray:
    if x0 is not None:
        return np.array(x0.data if isinstance(x0, HyperCube) else x0, dtype=np.float64)
    if solver.init == "zero":
        return np.zeros(prob.config.cube_shape)
    if solver.init == "adjoint":
        return adjoint_array(prob.y, prob.masks, prob.bands, prob.step)
    first = prob.masks[:1]
    if solver.pinv == "appendix":
        em = EnhancedMask.from_aperture(CodedAperture(first[0]), prob.config, solver.enhanced)
        return pinv_appendix_array(prob.y[0], em.rectification, prob.step)
    gram = gram_array(first, prob.bands, prob.step)
    return adjoint_array(gram_pinv_apply(gram, prob.y[:1], solver.rcond), first, prob.bands, prob.step)


def _record(k: int, x: np.ndarray, prob: _Problem, lam: float) -> IterationRecord:
    if not np.all(np.isfinite(x)):
        raise SolverDivergence(f"iterate {k} is not finite; the step size is probably too large")
    with np.errstate(over="ignore"):
        obj, res = objective(x, prob.y, prob.masks, prob.step, lam)
    if not np.isfinite(obj):
        raise SolverDivergence(f"objective at iterate {k} overflowed; the step size is probably too large")
    quality = psnr(x, prob.truth) if prob.truth is not None else None
    return IterationRecord(k, obj, res, quality)


Callback = Callable[[int, dict], None]


def ista_solve(
    measurements: MeasurementSet,
    apertures: Sequence[CodedAperture],
    config: SensingConfig,
    solver: SolverConfig,
    truth=None,
    x0=None,
    callback: Optional[Callback] = None,
) -> ReconReport:
    """Gradient step on the data term followed by the prox at strength ``rho * lam``.

    With ``step="auto"`` the step is ``0.95 / |Phi|^2`` using the
    power-iteration norm estimate.
    """
    t0 = time.perf_counter()
    prob = _setup(measurements, apertures, config, truth)
    if solver.step == "auto":
        norm = operator_norm(apertures, config, solver.norm_iters)
        rho = 0.95 / norm**2 if norm > 0 else 1.0
    else:
        rho = float(solver.step)
    x = _initial(prob, solver, x0)
    records = []
    for k in range(1, solver.phases + 1):
        resid = forward_array(x, prob.masks, prob.step) - prob.y
        r = x - rho * adjoint_array(resid, prob.masks, prob.bands, prob.step)
        x = solver.prox(r, rho * solver.lam)
        records.append(_record(k, x, prob, solver.lam))
        if callback is not None:
            callback(k, {"r": r, "x": x})
    return ReconReport("ista", records, HyperCube(x), time.perf_counter() - t0, rho)


def gap_tv_solve(
    measurements: MeasurementSet,
    apertures: Sequence[CodedAperture],
    config: SensingConfig,
    solver: SolverConfig,
    truth=None,
    x0=None,
    callback: Optional[Callback] = None,
) -> ReconReport:
    """Generalized alternating projection with TV denoising.

    Each iterate is the Euclidean projection of the denoised estimate onto
    ``{x : Phi x = y}``, computed with the joint per-pixel Gram solve. The
    reported cube is the last projected iterate.
    """
    t0 = time.perf_counter()
    prob = _setup(measurements, apertures, config, truth)
    gram = gram_array(prob.masks, prob.bands, prob.step)
    v = _initial(prob, solver, x0)
    records = []
    x = v
    for k in range(1, solver.phases + 1):
        resid = prob.y - forward_array(v, prob.masks, prob.step)
        x = v + adjoint_array(gram_pinv_apply(gram, resid, solver.rcond), prob.masks, prob.bands, prob.step)
        records.append(_record(k, x, prob, solver.lam))
        v = solver.prox(x, solver.lam)
        if callback is not None:
            callback(k, {"x": x, "v": v})
    return ReconReport("gap_tv", records, HyperCube(x), time.perf_counter() - t0)


@dataclass
class _RndOperators:
    """Per-shot forward/back-projection pairs used by one RND phase."""

    masks: np.ndarray
    modulation: list[np.ndarray]
    backproject: list[Callable[[np.ndarray], np.ndarray]]
    joint: Optional[Callable[[np.ndarray], np.ndarray]] = None


def _rnd_operators(prob: _Problem, solver: SolverConfig) -> _RndOperators:
    C, step = prob.bands, prob.step
    modulation, back = [], []
    for i in range(prob.masks.shape[0]):
        m = prob.masks[i : i + 1]
        if solver.pinv == "appendix":
            em = EnhancedMask.from_aperture(CodedAperture(m[0]), prob.config, solver.enhanced)
            modulation.append(em.modulation)
            back.append(lambda v, e=em.rectification: pinv_appendix_array(v, e, step))
        else:
            modulation.append(np.broadcast_to(m[0], prob.config.cube_shape))
            g = gram_array(m, C, step)
            back.append(lambda v, g=g, m=m: adjoint_array(gram_pinv_apply(g, v[None], solver.rcond), m, C, step))
    joint = None
    if solver.fusion == "joint":
        if solver.pinv != "exact":
            raise ValueError("joint fusion needs the exact pseudo-inverse")
        g_all = gram_array(prob.masks, C, step)
        joint = lambda v: adjoint_array(gram_pinv_apply(g_all, v, solver.rcond), prob.masks, C, step)
    return _RndOperators(prob.masks, modulation, back, joint)


def _rnd_phase(
    x_prev: np.ndarray,
    y: np.ndarray,
    ops: _RndOperators,
    rho: float,
    weights: np.ndarray,
    step: int,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """One decomposition phase; returns the fused estimate and the per-shot ``z_i``.

    ``z_i = x + rho * B_i(y_i - A_i x)`` with ``A_i`` the shot's degradation and
    ``B_i`` its back-projection; the fused estimate is ``sum_i w_i z_i``. In
    joint mode the shots share one exact pseudo-inverse and ``z_i`` is empty.
    """
    if ops.joint is not None:
        resid = y - forward_array(x_prev, ops.masks, step)
        return x_prev + rho * ops.joint(resid), []
    zs = []
    for i in range(y.shape[0]):
        v = y[i] - shift_and_sum(x_prev, ops.modulation[i], step)
        zs.append(x_prev + rho * ops.backproject[i](v))
    z = weights[0] * zs[0]
    for w, zi in zip(weights[1:], zs[1:]):
        z = z + w * zi
    return z, zs


def rnd_step(
    x_prev: ArrayOrCube,
    measurements: MeasurementSet,
    apertures: Sequence[CodedAperture],
    config: SensingConfig,
    solver: SolverConfig,
    phase: int = 1,
) -> tuple[HyperCube, list[HyperCube]]:
    """Fused estimate ``z`` of one phase and the per-shot estimates it was built from."""
    prob = _setup(measurements, apertures, config, None)
    x = np.asarray(x_prev.data if isinstance(x_prev, HyperCube) else x_prev, dtype=np.float64)
    ops = _rnd_operators(prob, solver)
    z, zs = _rnd_phase(x, prob.y, ops, solver.rho_at(phase), solver.fusion_weights(config.shots), prob.step)
    return HyperCube(z), [HyperCube(zi) for zi in zs]


def rnd_solve(
    measurements: MeasurementSet,
    apertures: Sequence[CodedAperture],
    config: SensingConfig,
    solver: SolverConfig,
    truth=None,
    x0=None,
    callback: Optional[Callback] = None,
) -> ReconReport:
    """Unrolled range-null decomposition: ``z = rnd_step(x)``, ``x = prox(z, lam)``."""
    t0 = time.perf_counter()
    prob = _setup(measurements, apertures, config, truth)
    ops = _rnd_operators(prob, solver)
    weights = solver.fusion_weights(config.shots)
    x = _initial(prob, solver, x0)
    records = []
    for k in range(1, solver.phases + 1):
        z, zs = _rnd_phase(x, prob.y, ops, solver.rho_at(k), weights, prob.step)
        x = solver.prox(z, solver.lam)
        records.append(_record(k, x, prob, solver.lam))
        if callback is not None:
            callback(k, {"z": z, "z_shots": zs, "x": x})
    return ReconReport("rnd", records, HyperCube(x), time.perf_counter() - t0)


SOLVERS = {"ista": ista_solve, "gap_tv": gap_tv_solve, "rnd": rnd_solve}


def reconstruct(measurements, apertures, config, solver: SolverConfig, truth=None, callback=None) -> ReconReport:
    return SOLVERS[solver.algorithm](measurements, apertures, config, solver, truth=truth, callback=callback)
