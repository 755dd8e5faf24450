"""Losses and metrics: naive-summation oracles, identities, analytic gradients."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtireg import objectives as obj
from dtireg import xform
from dtireg.errors import UndefinedMetricError, ValidationError
from dtireg.volgrid import GridMeta, LabelVolume, ScalarVolume, TensorVolume

from conftest import smooth_texture


def naive_local_ncc(a, b, k):
    """Direct per-window summation oracle for the windowed squared-NCC loss."""
    r = k // 2
    pa = np.pad(a, r)
    pb = np.pad(b, r)
    n = float(k) ** 3
    total = 0.0
    for idx in np.ndindex(a.shape):
        sl = tuple(slice(i, i + k) for i in idx)
        wa = pa[sl].ravel()
        wb = pb[sl].ravel()
        va = (wa ** 2).sum() - wa.sum() ** 2 / n
        vb = (wb ** 2).sum() - wb.sum() ** 2 / n
        if va > 1e-10 and vb > 1e-10:
            cross = (wa * wb).sum() - wa.sum() * wb.sum() / n
            total += cross ** 2 / (va * vb)
    return 1.0 - total / a.size


class TestLocalNcc:
    def test_self_similarity_near_zero(self, small_meta):
        vol = smooth_texture(small_meta, seed=0)
        assert obj.local_ncc(vol, vol, kernel=3) < 1e-9

    def test_scale_invariance(self, small_meta):
        a = smooth_texture(small_meta, seed=1)
        b = ScalarVolume(small_meta, 2.0 * a.data)
        assert obj.local_ncc(a, b, kernel=3) < 1e-9

    def test_affine_intensity_invariance_interior(self, small_meta):
        # additive offsets interact with the zero padding at border windows;
        # interior windows are exactly invariant
        a = smooth_texture(small_meta, seed=1)
        b = ScalarVolume(small_meta, 2.0 * a.data + 5.0)
        loss = obj.local_ncc(a, b, kernel=3)
        assert abs(loss - naive_local_ncc(a.data, b.data, 3)) < 1e-9
        # one fully interior window correlates perfectly despite the offset
        wa = a.data[3:6, 3:6, 3:6].ravel()
        wb = b.data[3:6, 3:6, 3:6].ravel()
        cc = np.corrcoef(wa, wb)[0, 1]
        assert abs(cc - 1.0) < 1e-12

    def test_noise_vs_texture_matches_oracle(self, small_meta):
        # [DERIVED] naive windowed-sum oracle on an 8^3 volume
        rng = np.random.default_rng(2)
        a = smooth_texture(small_meta, seed=2)
        b = ScalarVolume(small_meta, rng.normal(size=small_meta.dims))
        for k in (3, 5):
            loss = obj.local_ncc(a, b, kernel=k)
            oracle = naive_local_ncc(a.data, b.data, k)
            assert abs(loss - oracle) < 1e-9
        assert obj.local_ncc(a, b, kernel=5) > 0.5

    def test_zero_variance_windows_count_as_loss_one(self, small_meta):
        # an all-zero image has zero variance in every window (padding is
        # also zero), so every window contributes correlation 0
        a = smooth_texture(small_meta, seed=3)
        b = ScalarVolume(small_meta, np.zeros(small_meta.dims))
        assert abs(obj.local_ncc(a, b, kernel=3) - 1.0) < 1e-12

    def test_meta_mismatch_rejected(self, small_meta):
        other = GridMeta((8, 8, 8), (1.0, 1.0, 1.0))
        with pytest.raises(ValidationError):
            obj.local_ncc(smooth_texture(small_meta),
                          smooth_texture(other), kernel=3)

    def test_even_kernel_rejected(self, small_meta):
        vol = smooth_texture(small_meta)
        with pytest.raises(ValidationError):
            obj.local_ncc(vol, vol, kernel=4)


class TestTensorLoss:
    def test_identical_zero(self, small_meta):
        rng = np.random.default_rng(0)
        t = TensorVolume(small_meta, rng.normal(size=small_meta.dims + (6,)))
        assert obj.tensor_loss(t, t) == 0.0

    def test_hand_value_isotropic_vs_zero(self, small_meta):
        # [DERIVED] single-voxel region, D_A = I, D = 0: ED = 3, DD = 3
        atlas = np.zeros(small_meta.dims + (6,))
        atlas[4, 4, 4, 0] = atlas[4, 4, 4, 2] = atlas[4, 4, 4, 5] = 1.0
        moved = np.zeros(small_meta.dims + (6,))
        region = np.zeros(small_meta.dims, dtype=np.int64)
        region[4, 4, 4] = 1
        loss = obj.tensor_loss(TensorVolume(small_meta, atlas),
                               TensorVolume(small_meta, moved),
                               LabelVolume(small_meta, region, {1: "r"}))
        assert abs(loss - 6.0) < 1e-12

    def test_offdiagonal_counts_twice(self, small_meta):
        # [DERIVED] Dxy difference delta: ED = 2 delta^2, DD = 0
        delta = 0.3
        atlas = np.zeros(small_meta.dims + (6,))
        moved = np.zeros(small_meta.dims + (6,))
        moved[4, 4, 4, 1] = delta  # Dxy
        region = np.zeros(small_meta.dims, dtype=np.int64)
        region[4, 4, 4] = 1
        loss = obj.tensor_loss(TensorVolume(small_meta, atlas),
                               TensorVolume(small_meta, moved),
                               LabelVolume(small_meta, region, {1: "r"}))
        assert abs(loss - 2 * delta ** 2) < 1e-12

    def test_empty_region_rejected(self, small_meta):
        t = TensorVolume(small_meta, np.zeros(small_meta.dims + (6,)))
        region = LabelVolume(small_meta, np.zeros(small_meta.dims, np.int64), {})
        with pytest.raises(ValidationError):
            obj.tensor_loss(t, t, region)


class TestDice:
    def _labels(self, meta, boxes):
        data = np.zeros(meta.dims, dtype=np.int64)
        for lab, sl in boxes:
            data[sl] = lab
        return LabelVolume(meta, data, {lab: f"l{lab}" for lab, _ in boxes})

    def test_identical_is_one(self, small_meta):
        a = self._labels(small_meta, [(1, (slice(0, 4),) * 3)])
        assert obj.dice_multiclass(a, a) == 1.0

    def test_disjoint_is_zero(self, small_meta):
        a = self._labels(small_meta, [(1, (slice(0, 2),) * 3)])
        b = self._labels(small_meta, [(1, (slice(4, 6),) * 3)])
        assert obj.dice_multiclass(a, b) == 0.0

    def test_half_overlap_counting_oracle(self, small_meta):
        # [DERIVED] 8-voxel cubes overlapping in 4 voxels: 2*4/(8+8) = 0.5
        a = self._labels(small_meta, [(1, (slice(0, 2), slice(0, 2), slice(0, 2)))])
        b = self._labels(small_meta, [(1, (slice(0, 2), slice(0, 2), slice(1, 3)))])
        assert abs(obj.dice_multiclass(a, b) - 0.5) < 1e-12

    def test_symmetry(self, small_meta):
        rng = np.random.default_rng(1)
        a = LabelVolume(small_meta, rng.integers(0, 3, small_meta.dims), {1: "a", 2: "b"})
        b = LabelVolume(small_meta, rng.integers(0, 3, small_meta.dims), {1: "a", 2: "b"})
        assert obj.dice_multiclass(a, b) == obj.dice_multiclass(b, a)

    def test_both_empty_undefined(self, small_meta):
        empty = LabelVolume(small_meta, np.zeros(small_meta.dims, np.int64), {})
        with pytest.raises(UndefinedMetricError):
            obj.dice_multiclass(empty, empty)


class TestSmoothness:
    def test_zero_field(self, small_meta):
        assert obj.smoothness_loss(xform.DeformationField.zero(small_meta)) == 0.0

    def test_constant_translation(self, small_meta):
        disp = np.full(small_meta.dims + (3,), 2.5)
        assert obj.smoothness_loss(xform.DeformationField(small_meta, disp)) == 0.0

    def test_linear_ramp_oracle(self):
        # [DERIVED] disp_x = x (voxel units): unit forward difference along x
        meta = GridMeta((4, 4, 4), (1.0, 1.0, 1.0))
        pts = meta.grid_points()
        disp = np.zeros(meta.dims + (3,))
        disp[..., 0] = pts[..., 0]
        loss = obj.smoothness_loss(xform.DeformationField(meta, disp))
        assert abs(loss - 1.0) < 1e-12

    def test_matches_naive_sum(self, small_meta):
        rng = np.random.default_rng(4)
        disp = rng.normal(size=small_meta.dims + (3,))
        field = xform.DeformationField(small_meta, disp)
        u = disp / np.asarray(small_meta.spacing)
        total = 0.0
        dims = small_meta.dims
        for i in range(dims[0] - 1):
            for j in range(dims[1] - 1):
                for k in range(dims[2] - 1):
                    for c in range(3):
                        total += (u[i + 1, j, k, c] - u[i, j, k, c]) ** 2
                        total += (u[i, j + 1, k, c] - u[i, j, k, c]) ** 2
                        total += (u[i, j, k + 1, c] - u[i, j, k, c]) ** 2
        naive = total / ((dims[0] - 1) * (dims[1] - 1) * (dims[2] - 1))
        assert abs(obj.smoothness_loss(field) - naive) < 1e-9


class TestImageCc:
    def test_self_is_one(self, small_meta):
        a = smooth_texture(small_meta, seed=5)
        assert obj.image_cc(a, a) == 1.0

    def test_negated_is_minus_one(self, small_meta):
        a = smooth_texture(small_meta, seed=6)
        b = ScalarVolume(small_meta, -a.data)
        assert abs(obj.image_cc(a, b) + 1.0) < 1e-12

    def test_translated_by_one_voxel_oracle(self):
        # [DERIVED] direct-summation oracle; value strictly inside (0, 1)
        meta = GridMeta((16, 16, 16), (1.0, 1.0, 1.0))
        a = smooth_texture(meta, seed=7, sigma=2.5)
        shifted = np.zeros(meta.dims)
        shifted[:-1] = a.data[1:]
        b = ScalarVolume(meta, shifted)
        cc = obj.image_cc(a, b)
        x = a.data.ravel() - a.data.mean()
        y = b.data.ravel() - b.data.mean()
        oracle = (x * y).sum() / np.sqrt((x ** 2).sum() * (y ** 2).sum())
        assert abs(cc - oracle) < 1e-12
        assert 0.0 < cc < 1.0

    def test_intensity_rescaling_invariance(self, small_meta):
        a = smooth_texture(small_meta, seed=8)
        b = smooth_texture(small_meta, seed=9)
        c1 = obj.image_cc(a, b)
        c2 = obj.image_cc(ScalarVolume(small_meta, 3.0 * a.data + 1.0), b)
        assert abs(c1 - c2) < 1e-12

    def test_both_constant_undefined(self, small_meta):
        a = ScalarVolume(small_meta, np.full(small_meta.dims, 1.0))
        with pytest.raises(UndefinedMetricError):
            obj.image_cc(a, a)


class TestNjd:
    def test_affine_field_zero(self, small_meta):
        rng = np.random.default_rng(10)
        A = np.eye(3) + 0.1 * rng.normal(size=(3, 3))
        if np.linalg.det(A) < 0:
            A[0] = -A[0]
        aff = xform.AffineTransform(A, rng.normal(size=3))
        field = xform.affine_to_field(aff, small_meta)
        assert obj.njd_percent(field) == 0.0

    def test_zero_field_zero(self, small_meta):
        assert obj.njd_percent(xform.DeformationField.zero(small_meta)) == 0.0

    def test_fold_counted_brute_force(self):
        # [DERIVED] disp_x = -2x folds the field; count negative dets directly
        meta = GridMeta((12, 12, 12), (1.0, 1.0, 1.0))
        pts = meta.grid_points()
        disp = np.zeros(meta.dims + (3,))
        band = (pts[..., 0] >= 4) & (pts[..., 0] <= 6)
        disp[..., 0] = np.where(band, -2.0 * (pts[..., 0] - 5.0) + 0.3, 0.0)
        field = xform.DeformationField(meta, disp)
        pct = obj.njd_percent(field)
        dets = xform.jacobian_determinant(field)
        active = np.abs(disp).max(axis=-1) > 1e-9
        brute = 100.0 * (dets[active] < 0).sum() / active.sum()
        assert pct == brute and pct > 0.0


class TestTenengrad:
    def test_constant_zero(self, small_meta):
        a = ScalarVolume(small_meta, np.full(small_meta.dims, 2.0))
        assert obj.tenengrad(a) == 0.0

    def test_step_edge_sharper_than_smoothed(self):
        from scipy.ndimage import uniform_filter
        meta = GridMeta((16, 16, 16), (1.0, 1.0, 1.0))
        step = np.zeros(meta.dims)
        step[8:] = 1.0
        smoothed = uniform_filter(step, size=3, mode="nearest")
        assert obj.tenengrad(ScalarVolume(meta, step)) \
            > obj.tenengrad(ScalarVolume(meta, smoothed))


# ---------------------------------------------------------------------------
# analytic gradients vs central finite differences
# ---------------------------------------------------------------------------

def finite_diff_disp(loss_fn, field, eps=1e-6, n_probe=24, seed=0):
    """Central finite differences of loss_fn(field) at random components."""
    rng = np.random.default_rng(seed)
    flat = field.disp.reshape(-1)
    idx = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
    grads = np.zeros(idx.size)
    for n, i in enumerate(idx):
        for sign in (+1, -1):
            d = field.disp.copy().reshape(-1)
            d[i] += sign * eps
            f = xform.DeformationField(field.meta, d.reshape(field.disp.shape))
            grads[n] += sign * loss_fn(f)
        grads[n] /= 2 * eps
    return idx, grads


def assert_grad_matches(loss_fn, grad_fn, field, rtol=1e-4, seed=0):
    loss, grad = grad_fn(field)
    idx, fd = finite_diff_disp(loss_fn, field, seed=seed)
    analytic = grad.reshape(-1)[idx]
    scale = max(np.abs(fd).max(), 1e-8)
    assert np.abs(analytic - fd).max() / scale < rtol


class TestGradients:
    def _field(self, meta, seed, scale=0.4):
        rng = np.random.default_rng(seed)
        return xform.DeformationField(
            meta, rng.normal(scale=scale, size=meta.dims + (3,)))

    def test_ncc_grad(self):
        meta = GridMeta((6, 6, 6), (1.0, 1.0, 1.0))
        target = smooth_texture(meta, seed=11, sigma=1.2)
        moving = smooth_texture(meta, seed=12, sigma=1.2)
        field = self._field(meta, 13)
        assert_grad_matches(
            lambda f: obj.ncc_loss_disp_grad(target, moving, f, 3)[0],
            lambda f: obj.ncc_loss_disp_grad(target, moving, f, 3),
            field)

    def test_tensor_grad(self):
        meta = GridMeta((6, 6, 6), (1.0, 1.0, 1.0))
        rng = np.random.default_rng(14)
        atlas = TensorVolume(meta, rng.normal(size=meta.dims + (6,)))
        moving = TensorVolume(meta, rng.normal(size=meta.dims + (6,)))
        field = self._field(meta, 15)
        rots = xform.rotation_field(self._field(meta, 16, scale=0.2))
        assert_grad_matches(
            lambda f: obj.tensor_loss_disp_grad(atlas, moving, f, rots)[0],
            lambda f: obj.tensor_loss_disp_grad(atlas, moving, f, rots),
            field)

    def test_tract_grad(self):
        meta = GridMeta((6, 6, 6), (1.0, 1.0, 1.0))
        rng = np.random.default_rng(17)
        mv = LabelVolume(meta, rng.integers(0, 3, meta.dims), {1: "a", 2: "b"})
        tg = LabelVolume(meta, rng.integers(0, 3, meta.dims), {1: "a", 2: "b"})
        field = self._field(meta, 18)
        assert_grad_matches(
            lambda f: obj.tract_loss_disp_grad(mv, tg, f)[0],
            lambda f: obj.tract_loss_disp_grad(mv, tg, f),
            field)

    def test_smoothness_grad(self):
        meta = GridMeta((6, 6, 6), (1.2, 1.2, 1.2))
        field = self._field(meta, 19)
        assert_grad_matches(
            obj.smoothness_loss,
            obj.smoothness_loss_grad,
            field)


class TestComposites:
    def test_affine_composite_additivity(self, small_meta):
        rng = np.random.default_rng(20)
        fa_a = smooth_texture(small_meta, seed=21)
        fa_b = smooth_texture(small_meta, seed=22)
        t_a = TensorVolume(small_meta, rng.normal(size=small_meta.dims + (6,)))
        t_b = TensorVolume(small_meta, rng.normal(size=small_meta.dims + (6,)))
        tot1, l_fa, l_dti = obj.composite_affine_loss(fa_a, t_a, fa_b, t_b,
                                                      lambda_fa=10.0)
        tot2, _, _ = obj.composite_affine_loss(fa_a, t_a, fa_b, t_b,
                                               lambda_fa=20.0)
        assert abs(tot1 - (10.0 * l_fa + l_dti)) < 1e-12
        assert abs((tot2 - tot1) - 10.0 * l_fa) < 1e-12

    def test_perfect_alignment_zero(self, small_meta):
        rng = np.random.default_rng(23)
        fa = smooth_texture(small_meta, seed=24)
        t = TensorVolume(small_meta, rng.normal(size=small_meta.dims + (6,)))
        total, l_fa, l_dti = obj.composite_affine_loss(fa, t, fa, t)
        assert total < 1e-8

    def test_deform_composite_drops_tract_without_masks(self, small_meta):
        rng = np.random.default_rng(25)
        fa_a = smooth_texture(small_meta, seed=26)
        fa_b = smooth_texture(small_meta, seed=27)
        t = TensorVolume(small_meta, rng.normal(size=small_meta.dims + (6,)))
        field = xform.DeformationField.zero(small_meta)
        tot, l_fa, l_dti, l_tract, l_def = obj.composite_deform_loss(
            fa_a, t, fa_b, t, field)
        assert l_tract == 0.0 and l_def == 0.0
        assert abs(tot - (100.0 * l_fa + l_dti)) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    meta = GridMeta((6, 6, 6), (1.0, 1.0, 1.0))
    a = ScalarVolume(meta, rng.normal(size=meta.dims))
    b = ScalarVolume(meta, rng.normal(size=meta.dims))
    assert obj.local_ncc(a, b, kernel=3) >= 0.0
    ta = TensorVolume(meta, rng.normal(size=meta.dims + (6,)))
    tb = TensorVolume(meta, rng.normal(size=meta.dims + (6,)))
    assert obj.tensor_loss(ta, tb) >= 0.0
    field = xform.DeformationField(meta, rng.normal(size=meta.dims + (3,)))
    assert obj.smoothness_loss(field) >= 0.0
