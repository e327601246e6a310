import numpy as np
import pytest

from cassikit.core import CodedAperture, HyperCube, MaskKind, SensingConfig


def rand_cube(config, seed):
    rng = np.random.default_rng(seed)
    return HyperCube(rng.random(config.cube_shape))


def binary_masks(config, seed, p=0.5):
    rng = np.random.default_rng(seed)
    return [
        CodedAperture((rng.random(config.mask_shape) < p).astype(float), MaskKind.BINARY)
        for _ in range(config.shots)
    ]


def positive_masks(config, seed, low=0.2):
    rng = np.random.default_rng(seed)
    return [CodedAperture(low + (1 - low) * rng.random(config.mask_shape)) for _ in range(config.shots)]


def ones_masks(config):
    return [CodedAperture(np.ones(config.mask_shape), MaskKind.BINARY) for _ in range(config.shots)]


@pytest.fixture
def tiny_config():
    return SensingConfig(height=4, width=5, bands=3, step=1, shots=2)


# acceptance bookkeeping: one line per criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
