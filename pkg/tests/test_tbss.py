"""Skeletonization and projection: tube centerline oracle, projection rules."""

import numpy as np
import pytest

from dtireg import tbss
from dtireg.errors import ValidationError
from dtireg.volgrid import GridMeta, ScalarVolume

from conftest import smooth_texture


def gaussian_tube(meta, center_yz=(16.0, 16.0), sigma=3.0, peak=0.8):
    """Straight tube along x with a Gaussian FA cross-section."""
    pts_y = np.arange(meta.dims[1])[None, :, None]
    pts_z = np.arange(meta.dims[2])[None, None, :]
    r2 = (pts_y - center_yz[0]) ** 2 + (pts_z - center_yz[1]) ** 2
    profile = peak * np.exp(-r2 / (2 * sigma ** 2))
    data = np.broadcast_to(profile, meta.dims).copy()
    return ScalarVolume(meta, data)


class TestMeanFa:
    def test_identical(self, small_meta):
        vol = smooth_texture(small_meta, seed=0)
        out = tbss.mean_fa([vol, vol, vol])
        assert np.abs(out.data - vol.data).max() < 1e-15

    def test_weighted_average(self, small_meta):
        a = smooth_texture(small_meta, seed=1)
        b = ScalarVolume(small_meta, 2.0 * a.data)
        out = tbss.mean_fa([a, b])
        assert np.abs(out.data - 1.5 * a.data).max() < 1e-12

    def test_order_invariant(self, small_meta):
        vols = [smooth_texture(small_meta, seed=s) for s in range(4)]
        m1 = tbss.mean_fa(vols)
        m2 = tbss.mean_fa(vols[::-1])
        assert np.abs(m1.data - m2.data).max() < 1e-12

    def test_single_volume_rejected(self, small_meta):
        with pytest.raises(ValidationError):
            tbss.mean_fa([smooth_texture(small_meta)])


class TestSkeletonize:
    def test_tube_centerline(self):
        # [DERIVED] skeleton of a straight tube lies within 1 voxel of the
        # analytic centerline over >= 90% of its length
        meta = GridMeta((32, 32, 32), (1.0, 1.0, 1.0))
        tube = gaussian_tube(meta)
        skel = tbss.skeletonize(tube, threshold=0.2)
        on = np.argwhere(skel.mask.data > 0)
        assert on.shape[0] > 0
        d = np.sqrt((on[:, 1] - 16.0) ** 2 + (on[:, 2] - 16.0) ** 2)
        assert (d <= 1.0 + 1e-9).mean() >= 0.9
        # one skeleton hit per slice over >= 90% of the length
        hit_x = np.unique(on[:, 0])
        assert hit_x.size >= 0.9 * meta.dims[0]

    def test_subthreshold_empty(self, small_meta):
        vol = ScalarVolume(small_meta, np.full(small_meta.dims, 0.1))
        skel = tbss.skeletonize(vol, threshold=0.2)
        assert skel.mask.data.sum() == 0

    def test_threshold_excludes_background(self):
        meta = GridMeta((32, 32, 32), (1.0, 1.0, 1.0))
        tube = gaussian_tube(meta)
        skel = tbss.skeletonize(tube, threshold=0.2)
        assert np.all(tube.data[skel.mask.data > 0] > 0.2)

    def test_perp_dirs_unit_on_skeleton(self):
        meta = GridMeta((32, 32, 32), (1.0, 1.0, 1.0))
        skel = tbss.skeletonize(gaussian_tube(meta), threshold=0.2)
        norms = np.linalg.norm(skel.perp_dirs[skel.mask.data > 0], axis=-1)
        assert np.abs(norms - 1.0).max() < 1e-9

    def test_bad_threshold_rejected(self, small_meta):
        vol = smooth_texture(small_meta)
        with pytest.raises(ValidationError):
            tbss.skeletonize(vol, threshold=0.0)

    def test_monotone_rescaling_keeps_ridge(self):
        # ridge locations depend only on the FA ordering along the
        # perpendicular; a global positive scaling preserves them
        meta = GridMeta((32, 32, 32), (1.0, 1.0, 1.0))
        tube = gaussian_tube(meta)
        s1 = tbss.skeletonize(tube, threshold=0.2)
        s2 = tbss.skeletonize(ScalarVolume(meta, 1.1 * tube.data), threshold=0.22)
        assert np.array_equal(s1.mask.data, s2.mask.data)


class TestProject:
    def test_projection_dominates_direct_sampling(self):
        meta = GridMeta((32, 32, 32), (1.0, 1.0, 1.0))
        tube = gaussian_tube(meta)
        skel = tbss.skeletonize(tube, threshold=0.2)
        proj = tbss.project(tube, skel)
        on = skel.mask.data > 0
        assert np.all(proj.data[on] >= tube.data[on] - 1e-12)

    def test_zero_subject_zero_projection(self):
        meta = GridMeta((32, 32, 32), (1.0, 1.0, 1.0))
        skel = tbss.skeletonize(gaussian_tube(meta), threshold=0.2)
        proj = tbss.project(ScalarVolume(meta, np.zeros(meta.dims)), skel)
        assert np.abs(proj.data).max() == 0.0

    def test_perpendicular_shift_compensated(self):
        # [DERIVED] a 1-voxel perpendicular shift of the subject changes
        # projected ridge values by < 2%
        meta = GridMeta((32, 32, 32), (1.0, 1.0, 1.0))
        tube = gaussian_tube(meta)
        skel = tbss.skeletonize(tube, threshold=0.2)
        shifted = gaussian_tube(meta, center_yz=(17.0, 16.0))
        p0 = tbss.project(tube, skel)
        p1 = tbss.project(shifted, skel)
        on = skel.mask.data > 0
        rel = np.abs(p1.data[on] - p0.data[on]) / p0.data[on]
        assert rel.max() < 0.02

    def test_parallel_shift_blind_spot(self):
        # a shift along the tube axis leaves the projection unchanged:
        # parallel misalignment is not compensated, and not detected either
        meta = GridMeta((32, 32, 32), (1.0, 1.0, 1.0))
        tube = gaussian_tube(meta)
        skel = tbss.skeletonize(tube, threshold=0.2)
        shifted = np.zeros(meta.dims)
        shifted[1:] = tube.data[:-1]
        p0 = tbss.project(tube, skel)
        p1 = tbss.project(ScalarVolume(meta, shifted), skel)
        on = skel.mask.data > 0
        interior = on.copy()
        interior[:2] = False  # exclude the zero-filled entry face
        rel = np.abs(p1.data[interior] - p0.data[interior]) \
            / np.maximum(p0.data[interior], 1e-12)
        assert rel.max() < 0.02


class TestGroup:
    def test_identical_subjects(self):
        meta = GridMeta((24, 24, 24), (1.0, 1.0, 1.0))
        tube = gaussian_tube(meta, center_yz=(12.0, 12.0))
        stack, skel = tbss.skeletonize_group([tube, tube, tube])
        assert stack.shape[0] == 3
        assert np.array_equal(stack[0], stack[1])
        assert np.array_equal(stack[1], stack[2])

    def test_stack_order_and_support(self):
        meta = GridMeta((24, 24, 24), (1.0, 1.0, 1.0))
        a = gaussian_tube(meta, center_yz=(12.0, 12.0), peak=0.8)
        b = gaussian_tube(meta, center_yz=(12.0, 12.0), peak=0.6)
        stack, skel = tbss.skeletonize_group([a, b])
        on = skel.mask.data > 0
        # order preserved: first subject has the higher peak everywhere
        assert np.all(stack[0][on] >= stack[1][on])
        # support equals the skeleton for all subjects
        assert np.abs(stack[:, ~on]).max() == 0.0
