"""Simulation and reconstruction toolkit for coded-aperture snapshot spectral imaging."""

from .core import (
    CodedAperture,
    HyperCube,
    MaskKind,
    Measurement,
    MeasurementSet,
    PhantomSpec,
    SensingConfig,
    make_phantom,
    read_container,
    write_container,
)
from .metrics import mse, psnr, quality_report, ssim
from .optics import (
    EnhancedMask,
    adjoint,
    build_dense_phi,
    coverage_gram,
    forward,
    operator_norm,
    pinv_appendix,
    pinv_exact,
    project_null,
    project_range,
)
from .recon import SolverConfig, gap_tv_solve, ista_solve, reconstruct, rnd_solve, rnd_step, tv_denoise
from .sampling import (
    NoiseModel,
    PredictorConfig,
    ShotPlan,
    acquire,
    complement_mask,
    inject_noise,
    plan_shots,
    predict_mask,
    random_mask,
)

__all__ = [
    "CodedAperture",
    "HyperCube",
    "MaskKind",
    "Measurement",
    "MeasurementSet",
    "PhantomSpec",
    "SensingConfig",
    "make_phantom",
    "read_container",
    "write_container",
    "mse",
    "psnr",
    "quality_report",
    "ssim",
    "EnhancedMask",
    "adjoint",
    "build_dense_phi",
    "coverage_gram",
    "forward",
    "operator_norm",
    "pinv_appendix",
    "pinv_exact",
    "project_null",
    "project_range",
    "SolverConfig",
    "gap_tv_solve",
    "ista_solve",
    "reconstruct",
    "rnd_solve",
    "rnd_step",
    "tv_denoise",
    "NoiseModel",
    "PredictorConfig",
    "ShotPlan",
    "acquire",
    "complement_mask",
    "inject_noise",
    "plan_shots",
    "predict_mask",
    "random_mask",
]

__version__ = "0.1.0"
