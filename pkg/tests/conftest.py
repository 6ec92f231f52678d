import numpy as np
import pytest
import torch

from expsplat import _composite
from expsplat.core import CameraParams, GaussianCloud


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    # compile the numba kernels up front so per-test timing stays meaningful
    _composite.warmup(np.float64)
    _composite.warmup(np.float32)


def random_cloud(rng, count, sh_degree=0, dtype=torch.float64,
                 spread=0.8, z_center=2.5):
    """A cloud in front of the default test camera."""
    n_coeff = (sh_degree + 1) ** 2
    center = rng.uniform(-spread, spread, size=(count, 3))
    center[:, 2] = z_center + rng.uniform(-0.6, 0.6, size=count)
    quat = rng.normal(size=(count, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    sh = np.zeros((count, 3, n_coeff))
    sh[:, :, 0] = rng.uniform(-2.0, 5.0, size=(count, 3))
    if n_coeff > 1:
        sh[:, :, 1:] = 0.1 * rng.normal(size=(count, 3, n_coeff - 1))
    return GaussianCloud(
        center=torch.tensor(center, dtype=dtype),
        opacity=torch.tensor(rng.uniform(0.05, 0.95, size=count), dtype=dtype),
        rotation=torch.tensor(quat, dtype=dtype),
        scale=torch.tensor(np.exp(rng.uniform(-3.5, -1.2, size=(count, 3))), dtype=dtype),
        sh=torch.tensor(sh, dtype=dtype),
    )


def random_camera(rng, focal=40.0, jitter=0.15):
    rot = rng.normal(scale=jitter, size=3)
    trans = np.array([0.0, 0.0, 0.0]) + rng.normal(scale=0.1, size=3)
    return CameraParams(focal=focal, rotation=rot, translation=trans,
                        principal_offset=rng.normal(scale=0.5, size=2))
