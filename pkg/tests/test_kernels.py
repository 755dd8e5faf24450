"""Interpolation kernels: numba path agrees with the pure-NumPy fallback."""

import numpy as np
import pytest

from dtireg import kernels


@pytest.fixture(scope="module")
def workload():
    rng = np.random.default_rng(0)
    dims = (9, 8, 7)
    scalar = rng.normal(size=dims + (1,))
    tensor = rng.normal(size=dims + (6,))
    labels = rng.integers(0, 4, size=dims).astype(np.int64)
    coords = rng.uniform(-1.5, 9.5, size=(500, 3))
    return scalar, tensor, labels, coords


class TestFallbackAgreement:
    def test_trilinear(self, workload):
        scalar, tensor, _, coords = workload
        for data in (scalar, tensor):
            a = kernels.trilinear_gather(data, coords)
            b = kernels._trilinear_np(data, coords)
            assert np.abs(a - b).max() < 1e-12

    def test_trilinear_grad(self, workload):
        _, tensor, _, coords = workload
        va, ga = kernels.trilinear_gather_grad(tensor, coords)
        vb, gb = kernels._trilinear_grad_np(tensor, coords)
        assert np.abs(va - vb).max() < 1e-12
        assert np.abs(ga - gb).max() < 1e-12

    def test_nearest(self, workload):
        _, _, labels, coords = workload
        a = kernels.nearest_gather(labels, coords)
        b = kernels._nearest_np(labels, coords)
        assert np.array_equal(a, b)


class TestSemantics:
    def test_lattice_points_exact(self, workload):
        scalar, _, _, _ = workload
        idx = np.array([[2.0, 3.0, 4.0], [0.0, 0.0, 0.0], [8.0, 7.0, 6.0]])
        vals = kernels.trilinear_gather(scalar, idx)
        expected = np.array([scalar[2, 3, 4, 0], scalar[0, 0, 0, 0],
                             scalar[8, 7, 6, 0]])
        assert np.abs(vals[:, 0] - expected).max() < 1e-15

    def test_out_of_bounds_zero(self, workload):
        scalar, _, labels, _ = workload
        far = np.array([[-5.0, 0.0, 0.0], [20.0, 3.0, 3.0]])
        assert np.abs(kernels.trilinear_gather(scalar, far)).max() == 0.0
        assert np.all(kernels.nearest_gather(labels, far) == 0)

    def test_gradient_matches_finite_difference(self, workload):
        scalar, _, _, _ = workload
        pts = np.array([[3.3, 2.7, 4.1], [5.6, 1.2, 2.9]])
        _, grad = kernels.trilinear_gather_grad(scalar, pts)
        eps = 1e-6
        for ax in range(3):
            plus = pts.copy()
            plus[:, ax] += eps
            minus = pts.copy()
            minus[:, ax] -= eps
            fd = (kernels.trilinear_gather(scalar, plus)
                  - kernels.trilinear_gather(scalar, minus)) / (2 * eps)
            assert np.abs(grad[:, 0, ax] - fd[:, 0]).max() < 1e-6

    def test_snap_lattice_kills_jitter(self):
        coords = np.array([[2.0 + 1e-12, 3.0 - 1e-12, 4.0]])
        snapped = kernels.snap_lattice(coords)
        assert np.array_equal(snapped, np.array([[2.0, 3.0, 4.0]]))
