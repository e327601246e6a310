"""Domain types, the HSC1 container format and synthetic phantoms."""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .prng import SplitMix64

MAGIC = b"HSC1"
VERSION = 1


def _frozen(array, dtype=None) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SensingConfig:
    """Geometry of the sensing operator.

    ``step`` is the dispersion shift between neighbouring bands, so band c
    (0-based) lands at column offset ``c * step`` on the detector.
    """

    height: int
    width: int
    bands: int
    step: int = 2
    shots: int = 1

    def __post_init__(self):
        for name in ("height", "width", "bands", "shots"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if int(self.step) != self.step or self.step < 0:
            raise ValueError(f"step must be a non-negative integer, got {self.step!r}")

    @property
    def meas_width(self) -> int:
        return self.width + (self.bands - 1) * self.step

    @property
    def offsets(self) -> list[int]:
        return [c * self.step for c in range(self.bands)]

    @property
    def cube_shape(self) -> tuple[int, int, int]:
        return (self.bands, self.height, self.width)

    @property
    def mask_shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def meas_shape(self) -> tuple[int, int]:
        return (self.height, self.meas_width)

    def with_shots(self, shots: int) -> "SensingConfig":
        return SensingConfig(self.height, self.width, self.bands, self.step, shots)


@dataclass(frozen=True, eq=False)
class HyperCube:
    """Hyperspectral cube stored band-major as ``(C, H, W)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"cube must be 3-D (C, H, W), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("cube contains non-finite values")
        dtype = data.dtype if data.dtype in (np.float32, np.float64) else np.float64
        object.__setattr__(self, "data", _frozen(data, dtype))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, HyperCube):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))


class MaskKind(str, enum.Enum):
    BINARY = "binary"
    CONTINUOUS = "continuous"


@dataclass(frozen=True, eq=False)
class CodedAperture:
    """Transmittance pattern in [0, 1]; binary apertures hold only 0 and 1."""

    data: np.ndarray
    kind: MaskKind = MaskKind.CONTINUOUS

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"aperture must be 2-D (H, W), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("aperture contains non-finite values")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("aperture values must lie in [0, 1]")
        kind = MaskKind(self.kind)
        if kind is MaskKind.BINARY and not np.all((data == 0) | (data == 1)):
            raise ValueError("binary aperture holds values other than 0 and 1")
        dtype = data.dtype if data.dtype in (np.float32, np.float64) else np.float64
        object.__setattr__(self, "data", _frozen(data, dtype))
        object.__setattr__(self, "kind", kind)

    @classmethod
    def infer(cls, data) -> "CodedAperture":
        """Wrap ``data``, declaring it binary when every value is 0 or 1."""
        data = np.asarray(data)
        binary = bool(np.all((data == 0) | (data == 1)))
        return cls(data, MaskKind.BINARY if binary else MaskKind.CONTINUOUS)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, CodedAperture):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class Measurement:
    """One coded snapshot of shape ``(H, W + (C - 1) * step)``; ``shot`` is 1-based."""

    data: np.ndarray
    shot: int = 1

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"measurement must be 2-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("measurement contains non-finite values")
        if self.shot < 1:
            raise ValueError(f"shot index must be >= 1, got {self.shot}")
        dtype = data.dtype if data.dtype in (np.float32, np.float64) else np.float64
        object.__setattr__(self, "data", _frozen(data, dtype))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Measurement):
            return NotImplemented
        return (
            self.shot == other.shot
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )


@dataclass(frozen=True)
class MeasurementSet:
    """All shots of one acquisition, ordered by shot index."""

    config: SensingConfig
    shots: tuple[Measurement, ...]

    def __post_init__(self):
        shots = tuple(self.shots)
        if len(shots) != self.config.shots:
            raise ValueError(f"expected {self.config.shots} shots, got {len(shots)}")
        for expected, m in enumerate(shots, start=1):
            if m.shot != expected:
                raise ValueError(f"shot indices must run 1..N in order; got {m.shot} at position {expected}")
            if m.shape != self.config.meas_shape:
                raise ValueError(f"shot {m.shot} has shape {m.shape}, expected {self.config.meas_shape}")
        object.__setattr__(self, "shots", shots)

    @classmethod
    def from_array(cls, config: SensingConfig, stack: np.ndarray) -> "MeasurementSet":
        return cls(config, tuple(Measurement(stack[i], i + 1) for i in range(stack.shape[0])))

    def stack(self) -> np.ndarray:
        """Shots as a float64 array ``(N, H, W')``."""
        return np.stack([np.asarray(m.data, dtype=np.float64) for m in self.shots])

    def __len__(self):
        return len(self.shots)

    def __iter__(self):
        return iter(self.shots)

    def __getitem__(self, i):
        return self.shots[i]


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    blobs: int = 6
    background: float = 0.1
    spectral_sigma: float = 2.0
    radius: tuple[float, float] = (2.0, 6.0)

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.blobs < 0:
            raise ValueError("blob count must be non-negative")
        if not 0.0 <= self.background <= 1.0:
            raise ValueError("background level must lie in [0, 1]")
        if not self.spectral_sigma > 0:
            raise ValueError("spectral_sigma must be positive")
        lo, hi = self.radius
        if not (0 < lo <= hi):
            raise ValueError(f"radius range must satisfy 0 < min <= max, got {self.radius}")


def make_phantom(spec: PhantomSpec, config: SensingConfig) -> HyperCube:
    """Smooth synthetic scene: background plus Gaussian blobs with Gaussian spectra.

    Each blob consumes five uniforms in order: centre row, centre column,
    radius, amplitude, spectral centre.
    """
    C, H, W = config.cube_shape
    rng = SplitMix64(spec.seed)
    rows = np.arange(H, dtype=np.float64)[:, None]
    cols = np.arange(W, dtype=np.float64)[None, :]
    bands = np.arange(C, dtype=np.float64)
    lo, hi = spec.radius
    cube = np.full((C, H, W), float(spec.background))
    for _ in range(spec.blobs):
        ch = rng.uniform() * H
        cw = rng.uniform() * W
        radius = lo + rng.uniform() * (hi - lo)
        amplitude = 0.3 + 0.7 * rng.uniform()
        c0 = rng.uniform() * (C - 1)
        spatial = np.exp(-((rows - ch) ** 2 + (cols - cw) ** 2) / (2.0 * radius**2))
        spectrum = np.exp(-((bands - c0) ** 2) / (2.0 * spec.spectral_sigma**2))
        cube += amplitude * spectrum[:, None, None] * spatial[None, :, :]
    return HyperCube(np.clip(cube, 0.0, 1.0))


# ---------------------------------------------------------------------------
# HSC1 container
# ---------------------------------------------------------------------------

Storable = Union[HyperCube, CodedAperture, Measurement]

_KIND_CODES = {HyperCube: 0, CodedAperture: 1, Measurement: 2}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<4sIBBBB")


class ContainerError(ValueError):
    """Raised for malformed or unreadable HSC1 files."""


def encode_container(obj: Storable, dtype=None) -> bytes:
    """Serialise to HSC1 bytes.

    ``dtype`` selects the payload precision (``"f4"``/``"f8"``); by default
    float32 arrays stay float32 and everything else is written as float64.
    """
    kind = _KIND_CODES.get(type(obj))
    if kind is None:
        raise TypeError(f"cannot store {type(obj).__name__} in HSC1")
    data = np.asarray(obj.data)
    if dtype is None:
        dtype = np.float32 if data.dtype == np.float32 else np.float64
    dtype = np.dtype(dtype)
    if dtype == np.float32:
        code = 0
    elif dtype == np.float64:
        code = 1
    else:
        raise ValueError(f"unsupported payload dtype {dtype}")
    if not np.all(np.isfinite(data)):
        raise ValueError("refusing to write non-finite values")
    payload = np.ascontiguousarray(data, dtype=_DTYPES[code])
    if not np.all(np.isfinite(payload)):
        raise ValueError("values overflow the requested payload dtype")
    header = _HEADER.pack(MAGIC, VERSION, kind, code, data.ndim, 0)
    dims = struct.pack(f"<{data.ndim}I", *data.shape)
    return header + dims + payload.tobytes()


def write_container(obj: Storable, path, dtype=None) -> None:
    blob = encode_container(obj, dtype)
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise OSError(f"cannot write HSC1 file {os.fspath(path)!r}: {exc.strerror}") from exc


def decode_container(blob: bytes, config: SensingConfig | None = None, shot: int = 1) -> Storable:
    if len(blob) < _HEADER.size or blob[:4] != MAGIC:
        raise ContainerError("not an HSC1 file")
    magic, version, kind, code, rank, reserved = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise ContainerError(f"unsupported HSC1 version {version}")
    if kind not in (0, 1, 2):
        raise ContainerError(f"unknown object kind {kind}")
    if code not in _DTYPES:
        raise ContainerError(f"unknown dtype code {code}")
    expected_rank = 3 if kind == 0 else 2
    if rank != expected_rank:
        raise ContainerError(f"rank {rank} does not match object kind {kind}")
    if reserved != 0:
        raise ContainerError("reserved header byte must be zero")
    offset = _HEADER.size + 4 * rank
    if len(blob) < offset:
        raise ContainerError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", blob, _HEADER.size)
    dtype = _DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise ContainerError(f"payload length mismatch: expected {expected} bytes, found {len(blob) - offset}")
    data = np.frombuffer(blob, dtype=dtype, offset=offset).reshape(dims).astype(dtype.newbyteorder("="))
    if kind == 0:
        if config is not None and data.shape != config.cube_shape:
            raise ContainerError(f"cube shape {data.shape} does not match config {config.cube_shape}")
        return HyperCube(data)
    if kind == 1:
        if config is not None and data.shape != config.mask_shape:
            raise ContainerError(f"aperture shape {data.shape} does not match config {config.mask_shape}")
        return CodedAperture.infer(data)
    if config is not None and data.shape != config.meas_shape:
        raise ContainerError(f"measurement shape {data.shape} does not match config {config.meas_shape}")
    return Measurement(data, shot)


def read_container(path, config: SensingConfig | None = None, shot: int = 1) -> Storable:
    """Load an HSC1 file; ``config`` (optional) validates the stored shape."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read HSC1 file {str(path)!r}: {exc.strerror}") from exc
    try:
        return decode_container(blob, config, shot)
    except ContainerError as exc:
        raise ContainerError(f"{path}: {exc}") from None


def linear_index(c: int, h: int, w: int, height: int, width: int) -> int:
    return ((c * height) + h) * width + w


def load_apertures(paths: Sequence[str | os.PathLike], config: SensingConfig) -> list[CodedAperture]:
    out = []
    for p in paths:
        obj = read_container(p, config)
        if not isinstance(obj, CodedAperture):
            raise ContainerError(f"{p}: expected an aperture, found {type(obj).__name__}")
        out.append(obj)
    return out
