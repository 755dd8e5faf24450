"""Synthetic phantoms, random affine sampling, and smooth random deformations.

Everything here carries an exactly known ground truth, so registration
recovery error is measured, never estimated.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import gaussian_filter

from .dtensor import fa_map
from .errors import ValidationError
from .volgrid import (
    GridMeta,
    LabelVolume,
    ScalarVolume,
    TensorVolume,
    mat33_to_tensor6,
)
from .xform import (
    AffineTransform,
    DeformationField,
    affine_to_field,
    compose,
    rotation_field,
    warp_labels,
    warp_scalar,
    warp_tensor,
)

TUBE_EIGENVALUES = (0.9e-3, 0.2e-3, 0.2e-3)
BACKGROUND_DIFFUSIVITY = 0.7e-3


@dataclass(frozen=True)
class AffineSampleSpec:
    """Sampling ranges for synthetic affine transforms.

    Isotropic scale, a rotation about a single randomly chosen axis through
    the image center, and a per-axis translation in voxels. No shearing is
    ever sampled.
    """

    scale_range: tuple = (0.9, 1.1)
    rotation_range_deg: tuple = (-20.0, 20.0)
    translation_range_vox: tuple = (-4.0, 4.0)

    def __post_init__(self):
        for name in ("scale_range", "rotation_range_deg", "translation_range_vox"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ValidationError(f"invalid range for {name}")


@dataclass(frozen=True)
class Phantom:
    fa: ScalarVolume
    tensors: TensorVolume
    masks: LabelVolume
    landmarks: np.ndarray  # (n, 3) physical mm

    @property
    def meta(self):
        return self.fa.meta

    def brain_mask(self):
        """Voxels with nonzero diffusivity, as a binary LabelVolume."""
        md = self.tensors.data[..., 0] + self.tensors.data[..., 2] \
            + self.tensors.data[..., 5]
        return LabelVolume(self.meta, (md > 0).astype(np.int64), {1: "brain"})


def _axis_rotation(axis, theta):
    c, s = np.cos(theta), np.sin(theta)
    if axis == 0:
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)
    if axis == 1:
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def grid_center(meta):
    return np.asarray(meta.origin) + np.asarray(meta.spacing) * (
        np.asarray(meta.dims, dtype=np.float64) - 1.0) / 2.0


def sample_affine(spec, rng, meta):
    """Draw s * R(theta, one axis) about the image center plus a translation."""
    s = rng.uniform(*spec.scale_range)
    theta = np.deg2rad(rng.uniform(*spec.rotation_range_deg))
    axis = int(rng.integers(0, 3))
    t_vox = rng.uniform(*spec.translation_range_vox, size=3)
    t_mm = t_vox * np.asarray(meta.spacing)
    c = grid_center(meta)
    A = s * _axis_rotation(axis, theta)
    t = c - A @ c + t_mm
    return AffineTransform(A, t)


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------

def _tensor_from_axis(axis_vec, eigenvalues=TUBE_EIGENVALUES):
    """Anisotropic tensor with the principal eigenvector along axis_vec."""
    e1 = np.asarray(axis_vec, dtype=np.float64)
    e1 = e1 / np.linalg.norm(e1)
    helper = np.array([0.0, 0.0, 1.0]) if abs(e1[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e2 = np.cross(e1, helper)
    e2 /= np.linalg.norm(e2)
    e3 = np.cross(e1, e2)
    V = np.column_stack([e1, e2, e3])
    return V @ np.diag(eigenvalues) @ V.T


def _ellipsoid_mask(meta, center, radii_mm):
    pts = meta.grid_points()
    d = (pts - center) / np.asarray(radii_mm)
    return (d ** 2).sum(axis=-1) <= 1.0


def _tube_mask(meta, axis, center, radius_mm, half_length_mm):
    pts = meta.grid_points()
    rel = pts - center
    along = rel[..., axis]
    perp = np.delete(rel, axis, axis=-1)
    return (np.linalg.norm(perp, axis=-1) <= radius_mm) \
        & (np.abs(along) <= half_length_mm)


def _box_landmarks(center, half_extent):
    corners = np.array([
        [sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)
    ], dtype=np.float64)
    return center + corners * half_extent


def make_phantom(kind, dims, seed=0, spacing=(1.2, 1.2, 1.2)):
    """Analytic DTI phantom with tensors, FA, masks, and landmarks.

    kinds: ``blob`` (single anisotropic ellipsoid), ``crossing-tubes`` (two
    orthogonal anisotropic cylinders, overlap assigned to the lower label),
    ``layered`` (slabs of alternating fiber direction), ``blob-cluster``
    (separated textured anisotropic blobs on zero-FA background),
    ``textured`` (smoothly varying anisotropy with nonzero FA everywhere).
    """
    dims = tuple(int(d) for d in dims)
    if min(dims) < 16:
        raise ValidationError("phantom dims must be >= 16 per axis")
    if kind == "blob-cluster":
        return _blob_cluster_phantom(dims, seed, spacing)
    if kind == "textured":
        return _textured_phantom(dims, seed, spacing)
    meta = GridMeta(dims, spacing)
    rng = np.random.default_rng(seed)
    center = grid_center(meta)
    extent = np.asarray(meta.spacing) * (np.asarray(dims) - 1)
    pts = meta.grid_points()

    brain = _ellipsoid_mask(meta, center, extent * 0.42)
    tensors = np.zeros(dims + (6,), dtype=np.float64)
    iso6 = mat33_to_tensor6(BACKGROUND_DIFFUSIVITY * np.eye(3))
    tensors[brain] = iso6
    labels = np.zeros(dims, dtype=np.int64)

    if kind == "blob":
        radii = extent * np.array([0.24, 0.18, 0.15])
        rel = (pts - center) / radii
        r2 = (rel ** 2).sum(axis=-1)
        inside = r2 <= 1.0
        # smooth anisotropy profile gives the blob internal FA texture
        w = np.clip(1.0 - r2, 0.0, 1.0)
        aniso = _tensor_from_axis([1.0, 0.0, 0.0])
        iso = BACKGROUND_DIFFUSIVITY * np.eye(3)
        mix = (w[..., None, None] * aniso[None, None, None]
               + (1.0 - w)[..., None, None] * iso[None, None, None])
        tensors[inside] = mat33_to_tensor6(mix[inside])
        labels[inside & brain] = 1
        landmarks = np.vstack([
            _box_landmarks(center, radii * 0.7), center[None, :],
        ])
    elif kind == "crossing-tubes":
        radius = 0.10 * extent.min()
        half_len = 0.34 * extent.min()
        m1 = _tube_mask(meta, 0, center, radius, half_len) & brain
        m2 = _tube_mask(meta, 1, center, radius, half_len) & brain
        t1 = mat33_to_tensor6(_tensor_from_axis([1.0, 0.0, 0.0]))
        t2 = mat33_to_tensor6(_tensor_from_axis([0.0, 1.0, 0.0]))
        tensors[m2] = t2
        tensors[m1] = t1  # overlap resolved in favor of the lower label
        labels[m2] = 2
        labels[m1] = 1
        landmarks = np.vstack([
            center + np.array([[d, 0, 0] for d in (-half_len * 0.8, half_len * 0.8)]),
            center + np.array([[0, d, 0] for d in (-half_len * 0.8, half_len * 0.8)]),
            _box_landmarks(center, np.array([half_len, half_len, radius]) * 0.5),
        ])
    elif kind == "layered":
        period = extent[2] / 4.0
        phase = rng.uniform(0, 2 * np.pi)
        z = pts[..., 2] - center[2]
        band = np.sin(2 * np.pi * z / period + phase) > 0
        t1 = mat33_to_tensor6(_tensor_from_axis([1.0, 0.0, 0.0]))
        t2 = mat33_to_tensor6(_tensor_from_axis([0.0, 1.0, 0.0]))
        tensors[brain & band] = t1
        tensors[brain & ~band] = t2
        labels[brain & band] = 1
        labels[brain & ~band] = 2
        landmarks = _box_landmarks(center, extent * 0.2)
    else:
        raise ValidationError(f"unknown phantom kind {kind!r}")

    tvol = TensorVolume(meta, tensors)
    fa = fa_map(tvol)
    masks = LabelVolume(meta, labels, {1: "bundle_1", 2: "bundle_2"})
    return Phantom(fa, tvol, masks, np.asarray(landmarks, dtype=np.float64))


def _smooth_noise(rng, dims, sigma):
    f = gaussian_filter(rng.normal(size=dims), sigma, mode="nearest")
    return (f - f.mean()) / (f.std() + 1e-12)


def _direction_field(rng, dims, sigma=3.0):
    v = np.stack([gaussian_filter(rng.normal(size=dims), sigma, mode="nearest")
                  for _ in range(3)], axis=-1)
    return v / (np.linalg.norm(v, axis=-1, keepdims=True) + 1e-12)


def _blob_cluster_phantom(dims, seed, spacing, n_blobs=10, blob_sigma_mm=4.0,
                          texture_modes=((0.8, 1.2), (2.0, 0.8), (4.0, 0.8))):
    """Separated anisotropic Gaussian blobs with internal multi-scale texture.

    The anisotropy (hence FA) has compact support, which keeps feature mass
    centers tracking the content, and the fine texture modes make degenerate
    warps decorrelate instead of forming spurious similarity minima.
    """
    meta = GridMeta(tuple(dims), spacing)
    rng = np.random.default_rng(seed)
    pts = meta.grid_points()
    center = grid_center(meta)
    extent = np.asarray(spacing) * (np.asarray(dims) - 1)
    # blob centers inside ~55% of the half-extent so the full augmentation
    # ranges keep every blob in bounds
    centers = center + rng.uniform(-0.5, 0.5, size=(n_blobs, 3)) * extent * 0.55
    support = np.zeros(meta.dims)
    for c in centers:
        r2 = ((pts - c) ** 2).sum(axis=-1)
        support += np.exp(-r2 / (2 * blob_sigma_mm ** 2))
    support = np.clip(support, 0.0, 1.0)
    texture = np.zeros(meta.dims)
    for sig, w in texture_modes:
        texture += w * _smooth_noise(rng, meta.dims, sig)
    texture = (texture - texture.min()) / (texture.max() - texture.min() + 1e-12)
    amp = support * (0.4 + 0.6 * texture) * 0.9e-3
    v = _direction_field(rng, meta.dims)
    outer = v[..., :, None] * v[..., None, :]
    D = BACKGROUND_DIFFUSIVITY * np.eye(3) + amp[..., None, None] * outer
    tvol = TensorVolume(meta, mat33_to_tensor6(D))
    fa = fa_map(tvol)
    labels = LabelVolume(meta, (support > 0.5).astype(np.int64), {1: "bundle_1"})
    landmarks = np.vstack([centers[:8], center[None]])
    return Phantom(fa, tvol, labels, landmarks)


def _textured_phantom(dims, seed, spacing, sigma=4.0):
    """Smoothly varying anisotropic tensor field with nonzero FA everywhere."""
    meta = GridMeta(tuple(dims), spacing)
    rng = np.random.default_rng(seed)

    def smooth(lo, hi):
        f = _smooth_noise(rng, meta.dims, sigma)
        f = (f - f.min()) / (f.max() - f.min() + 1e-12)
        return lo + (hi - lo) * f

    iso = smooth(0.5e-3, 0.9e-3)
    amp = smooth(0.1e-3, 0.9e-3)
    v = _direction_field(rng, meta.dims, sigma=6.0)
    outer = v[..., :, None] * v[..., None, :]
    D = iso[..., None, None] * np.eye(3) + amp[..., None, None] * outer
    tvol = TensorVolume(meta, mat33_to_tensor6(D))
    fa = fa_map(tvol)
    labels = LabelVolume(meta, (fa.data > np.median(fa.data)).astype(np.int64),
                         {1: "bundle_1"})
    center = grid_center(meta)
    extent = np.asarray(spacing) * (np.asarray(dims) - 1)
    landmarks = np.vstack([_box_landmarks(center, extent * 0.3), center[None]])
    return Phantom(fa, tvol, labels, landmarks)


# ---------------------------------------------------------------------------
# pair synthesis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroundTruth:
    """Exact transform used to synthesize a moving image from a phantom."""

    affine: AffineTransform
    smooth: DeformationField | None = None
    _modes: tuple = dc_field(default=())

    def apply(self, pts):
        """Evaluate the total synthesis map phi_gt at arbitrary points."""
        pts = np.asarray(pts, dtype=np.float64)
        if self._modes:
            disp = np.zeros_like(pts)
            for amp_vec, k_vec, wavelength, phase in self._modes:
                arg = 2 * np.pi * (pts @ np.asarray(k_vec)) / wavelength + phase
                disp += np.outer(np.sin(arg), amp_vec).reshape(pts.shape)
            pts = pts + disp
        return self.affine.apply(pts)


def make_pair(phantom, affine, smooth_field=None):
    """Warp a phantom by an exact transform; return (moving, ground truth).

    The moving volumes sample the phantom through the pull-back map
    phi_gt = affine o smooth; registering moving back onto the phantom should
    produce a field phi_hat with phi_gt(phi_hat(x)) = x.
    """
    if smooth_field is None:
        total = affine_to_field(affine, phantom.meta)
        gt = GroundTruth(affine)
    else:
        total = compose(affine, smooth_field)
        gt = GroundTruth(affine, smooth_field,
                         getattr(smooth_field, "_modes", ()))
    rots = rotation_field(total)
    moving = Phantom(
        warp_scalar(phantom.fa, total),
        warp_tensor(phantom.tensors, total, rots=rots),
        warp_labels(phantom.masks, total),
        phantom.landmarks,
    )
    return moving, gt


def smooth_random_field(meta, amplitude, wavelength, seed=0, n_modes=3):
    """Band-limited sinusoidal displacement with det(J) > 0 by construction.

    Built from rank-one sinusoidal modes whose gradient norms sum to
    2*pi*amplitude/wavelength < 1, which keeps the Jacobian positive.
    Units: amplitude and wavelength in mm.
    """
    if amplitude < 0 or wavelength <= 0:
        raise ValidationError("amplitude >= 0 and wavelength > 0 required")
    if amplitude >= wavelength / (2 * np.pi):
        raise ValidationError(
            "amplitude must be < wavelength / (2*pi) to guarantee det(J) > 0"
        )
    rng = np.random.default_rng(seed)
    pts = meta.grid_points()
    disp = np.zeros(meta.dims + (3,), dtype=np.float64)
    modes = []
    for _ in range(n_modes):
        a_dir = rng.normal(size=3)
        a_dir /= np.linalg.norm(a_dir)
        amp_vec = a_dir * (amplitude / n_modes)
        k = rng.normal(size=3)
        k /= np.linalg.norm(k)
        phase = rng.uniform(0, 2 * np.pi)
        arg = 2 * np.pi * (pts @ k) / wavelength + phase
        disp += np.sin(arg)[..., None] * amp_vec
        modes.append((tuple(amp_vec), tuple(k), wavelength, phase))
    f = DeformationField(meta, disp)
    object.__setattr__(f, "_modes", tuple(modes))
    return f
