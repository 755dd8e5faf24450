"""Transforms, Jacobians, rotation extraction, tensor reorientation, warping.

Conventions:
  * AffineTransform maps a physical point x to A x + t.
  * DeformationField stores per-voxel displacements u (mm); the total map is
    phi(x) = x + u(x), and warping samples the moving volume at phi(x)
    (pull-back / backward warping).
  * Tensor reorientation applies D'(x) = R(x) D(phi(x)) R(x)^T with R the
    rotation factor of the polar decomposition of J phi(x) (finite strain).
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DegenerateMatrixError, ValidationError
from .volgrid import (
    GridMeta,
    LabelVolume,
    ScalarVolume,
    TensorVolume,
    mat33_to_tensor6,
    tensor6_to_mat33,
)
from . import nifti

DEGENERATE_DET = 1e-8


@dataclass(frozen=True)
class AffineTransform:
    A: np.ndarray  # (3, 3)
    t: np.ndarray  # (3,)

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if np.linalg.det(A) <= 0:
            raise ValidationError("affine linear part must have det > 0")
        A.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.A.T + self.t

    def compose_with(self, other):
        """(self o other)(x) = self(other(x))."""
        return AffineTransform(self.A @ other.A, self.A @ other.t + self.t)

    def inverse(self):
        Ainv = np.linalg.inv(self.A)
        return AffineTransform(Ainv, -Ainv @ self.t)


@dataclass(frozen=True)
class DeformationField:
    meta: GridMeta
    disp: np.ndarray  # (nx, ny, nz, 3) mm

    def __post_init__(self):
        disp = np.array(self.disp, dtype=np.float64)
        if disp.shape != self.meta.dims + (3,):
            raise ValidationError(
                f"disp shape {disp.shape} does not match dims {self.meta.dims}"
            )
        if not np.all(np.isfinite(disp)):
            raise ValidationError("displacements must be finite")
        disp.setflags(write=False)
        object.__setattr__(self, "disp", disp)

    @classmethod
    def zero(cls, meta):
        return cls(meta, np.zeros(meta.dims + (3,)))

    def target_points(self):
        """phi(x) = x + u(x) at every voxel center, shape (nx, ny, nz, 3)."""
        return self.meta.grid_points() + self.disp


@dataclass(frozen=True)
class RotationField:
    meta: GridMeta
    R: np.ndarray  # (nx, ny, nz, 3, 3)
    n_degenerate: int = 0

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        if R.shape != self.meta.dims + (3, 3):
            raise ValidationError("rotation field shape mismatch")
        object.__setattr__(self, "R", R)


# ---------------------------------------------------------------------------
# polar decomposition
# ---------------------------------------------------------------------------

def polar_rotation(A):
    """Rotation factor of the polar decomposition via SVD.

    For A = W S V^T returns R = W V^T with the sign corrected so that
    det(R) = +1 (the column of W paired with the smallest singular value is
    negated when W V^T is a reflection).
    """
    A = np.asarray(A, dtype=np.float64).reshape(3, 3)
    scale = max(np.abs(A).max(), 1.0)
    if abs(np.linalg.det(A)) < 1e-15 * scale ** 3:
        raise DegenerateMatrixError("matrix is numerically singular")
    return polar_rotation_many(A[None])[0]


def polar_rotation_many(mats):
    """Vectorized polar rotation for a stack of 3x3 matrices, shape (..., 3, 3)."""
    mats = np.asarray(mats, dtype=np.float64)
    W, _, Vt = np.linalg.svd(mats)
    R = W @ Vt
    flip = np.linalg.det(R) < 0
    if np.any(flip):
        W = W.copy()
        W[flip, :, 2] = -W[flip, :, 2]
        R = W @ Vt
    return R


def polar_stretch(A):
    """Stretch factor P = V S V^T so that A = R P."""
    A = np.asarray(A, dtype=np.float64).reshape(3, 3)
    _, s, Vt = np.linalg.svd(A)
    return Vt.T @ np.diag(s) @ Vt


# ---------------------------------------------------------------------------
# Jacobians and rotation fields
# ---------------------------------------------------------------------------

def jacobian_field(field):
    """Per-voxel Jacobian of phi(x) = x + u(x), shape (nx, ny, nz, 3, 3).

    Central differences on interior voxels, one-sided at faces, in physical
    units (mm per mm).
    """
    J = np.zeros(field.meta.dims + (3, 3), dtype=np.float64)
    for i in range(3):
        grads = np.gradient(
            field.disp[..., i],
            field.meta.spacing[0],
            field.meta.spacing[1],
            field.meta.spacing[2],
            axis=(0, 1, 2),
        )
        for j in range(3):
            J[..., i, j] = grads[j]
        J[..., i, i] += 1.0
    return J


def jacobian_determinant(field):
    """Per-voxel det(J phi), shape (nx, ny, nz)."""
    return np.linalg.det(jacobian_field(field))


def rotation_field(field):
    """Per-voxel polar rotation of the Jacobian of the deformation.

    Voxels whose Jacobian determinant is <= 1e-8 receive the identity and
    are counted in the field's degeneracy statistic.
    """
    J = jacobian_field(field)
    flat = J.reshape(-1, 3, 3)
    dets = np.linalg.det(flat)
    degenerate = dets <= DEGENERATE_DET
    R = np.empty_like(flat)
    good = ~degenerate
    if np.any(good):
        R[good] = polar_rotation_many(flat[good])
    R[degenerate] = np.eye(3)
    return RotationField(
        field.meta, R.reshape(field.meta.dims + (3, 3)),
        n_degenerate=int(degenerate.sum()),
    )


def reorient_tensors(vol, rots):
    """Apply D' = R D R^T per voxel."""
    if rots.meta != vol.meta:
        raise ValidationError("tensor volume and rotation field grids differ")
    D = vol.matrices()
    Dp = rots.R @ D @ np.swapaxes(rots.R, -1, -2)
    return TensorVolume(vol.meta, mat33_to_tensor6(Dp))


# ---------------------------------------------------------------------------
# warping
# ---------------------------------------------------------------------------

def _sample_coords(vol_meta, field):
    pts = field.target_points().reshape(-1, 3)
    return kernels.snap_lattice(vol_meta.phys_to_voxel(pts))


def warp_scalar(vol, field):
    """output(x) = vol(phi(x)) via trilinear interpolation; zero outside."""
    coords = _sample_coords(vol.meta, field)
    vals = kernels.trilinear_gather(vol.data[..., None], coords)
    return ScalarVolume(field.meta, vals.reshape(field.meta.dims))


def project_psd(t6, eps=1e-12):
    """Clamp negative tensor eigenvalues to zero (numerical safety net).

    Componentwise linear interpolation of PSD tensors is itself PSD, so this
    only ever repairs rounding noise.
    """
    from .dtensor import eigenvalues_sym3

    mats = tensor6_to_mat33(t6)
    lam = eigenvalues_sym3(mats)
    bad = lam[..., 2] < -eps
    if np.any(bad):
        idx = np.argwhere(bad)
        for ind in idx:
            m = mats[tuple(ind)]
            vals, vecs = np.linalg.eigh(m)
            vals = np.maximum(vals, 0.0)
            mats[tuple(ind)] = vecs @ np.diag(vals) @ vecs.T
        return mat33_to_tensor6(mats)
    return t6


def warp_tensor(vol, field, rots=None):
    """Componentwise trilinear warp followed by finite-strain reorientation.

    The rotation field defaults to rotation_field(field); pass a precomputed
    one to amortize it across volumes warped by the same field.
    """
    coords = _sample_coords(vol.meta, field)
    vals = kernels.trilinear_gather(vol.data, coords)
    t6 = project_psd(vals.reshape(field.meta.dims + (6,)))
    warped = TensorVolume(field.meta, t6)
    if rots is None:
        rots = rotation_field(field)
    return reorient_tensors(warped, rots)


def warp_labels(vol, field):
    """Nearest-neighbor warp; out-of-bounds samples take label 0."""
    coords = _sample_coords(vol.meta, field)
    vals = kernels.nearest_gather(vol.data, coords)
    return LabelVolume(field.meta, vals.reshape(field.meta.dims), vol.label_names)


def warp_volume(vol, field, rots=None):
    """Warp any supported volume kind with the appropriate sampling rule."""
    if isinstance(vol, TensorVolume):
        return warp_tensor(vol, field, rots=rots)
    if isinstance(vol, LabelVolume):
        return warp_labels(vol, field)
    if isinstance(vol, ScalarVolume):
        return warp_scalar(vol, field)
    raise ValidationError(f"unsupported volume type {type(vol)!r}")


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------

def affine_to_field(affine, meta):
    """Dense field with disp(x) = A x + t - x on the given grid."""
    pts = meta.grid_points()
    return DeformationField(meta, affine.apply(pts) - pts)


def compose(affine, deform):
    """Single field realizing phi(x) = phi_A(phi_D(x)).

    Warping the original volume once through the composition avoids the
    second interpolation pass of sequential warping.
    """
    pts = deform.target_points()
    return DeformationField(deform.meta, affine.apply(pts) - deform.meta.grid_points())


def compose_fields(outer, inner):
    """phi(x) = phi_outer(phi_inner(x)); outer displacements are interpolated."""
    pts = inner.target_points().reshape(-1, 3)
    coords = outer.meta.phys_to_voxel(pts)
    u_outer = kernels.trilinear_gather(outer.disp, coords)
    disp = pts + u_outer - inner.meta.grid_points().reshape(-1, 3)
    return DeformationField(inner.meta, disp.reshape(inner.meta.dims + (3,)))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_affine(affine, path):
    """12 whitespace-separated reals: row-major A, then t."""
    vals = np.concatenate([affine.A.reshape(9), affine.t])
    with open(path, "w") as f:
        f.write(" ".join(repr(float(v)) for v in vals) + "\n")


def load_affine(path):
    with open(path) as f:
        vals = [float(tok) for tok in f.read().split()]
    if len(vals) != 12:
        raise ValidationError(f"{path}: expected 12 reals, got {len(vals)}")
    return AffineTransform(np.array(vals[:9]).reshape(3, 3), np.array(vals[9:]))


def write_field(field, path):
    nifti.write_field_data(field.meta, field.disp, path)


def read_field(path):
    meta, disp = nifti.read_field_data(path, channels=3)
    return DeformationField(meta, disp)
