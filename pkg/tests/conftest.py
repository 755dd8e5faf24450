"""Shared fixtures for the dtireg test suite."""

import numpy as np
import pytest

from dtireg.volgrid import GridMeta, ScalarVolume, TensorVolume, LabelVolume
from dtireg import augment


@pytest.fixture(scope="session")
def small_meta():
    return GridMeta((8, 8, 8), (1.2, 1.2, 1.2))


@pytest.fixture(scope="session")
def tubes_phantom():
    """Crossing-tubes phantom reused by several modules (read-only)."""
    return augment.make_phantom("crossing-tubes", (32, 32, 32), seed=0)


def random_spd(rng, scale=1e-3):
    """Random symmetric positive-definite 3x3 tensor."""
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    lam = rng.uniform(0.2, 3.0, size=3) * scale
    return q @ np.diag(lam) @ q.T


def make_scalar(meta, data):
    return ScalarVolume(meta, np.asarray(data, dtype=np.float64))


def smooth_texture(meta, seed=0, sigma=2.0):
    """Smooth nonconstant scalar volume in [0, 1]."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    f = gaussian_filter(rng.normal(size=meta.dims), sigma, mode="nearest")
    f = (f - f.min()) / (f.max() - f.min() + 1e-12)
    return ScalarVolume(meta, f)
