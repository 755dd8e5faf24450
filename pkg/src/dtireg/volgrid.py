"""Volumetric data model: grid metadata and scalar/label/tensor volumes.

Tensors are stored as 6 components per voxel in lower-triangular row order
(Dxx, Dxy, Dyy, Dxz, Dyz, Dzz). Voxel index i maps to the physical point
origin + spacing * i; volumes are immutable after construction.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from . import kernels

TENSOR_COMPONENTS = ("xx", "xy", "yy", "xz", "yz", "zz")

# row/col index of each stored component in the 3x3 matrix
_COMP_IJ = ((0, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 2))

PSD_EPS = 1e-12


@dataclass(frozen=True)
class GridMeta:
    dims: tuple
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValidationError("dims, spacing, origin must each have 3 entries")
        if any(d < 2 for d in dims):
            raise ValidationError(f"dims must be >= 2 per axis, got {dims}")
        if any(s <= 0 for s in spacing):
            raise ValidationError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self):
        return self.dims

    @property
    def n_voxels(self):
        return self.dims[0] * self.dims[1] * self.dims[2]

    def voxel_to_phys(self, idx):
        """Continuous voxel indices (..., 3) -> physical mm coordinates."""
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def phys_to_voxel(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - np.asarray(self.origin)) / np.asarray(self.spacing)

    def grid_points(self):
        """Physical coordinates of every voxel center, shape (nx, ny, nz, 3)."""
        nx, ny, nz = self.dims
        ii, jj, kk = np.meshgrid(
            np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
        )
        idx = np.stack([ii, jj, kk], axis=-1).astype(np.float64)
        return self.voxel_to_phys(idx)


def _check_meta(meta, data, expected_ndim, channels=None):
    if not isinstance(meta, GridMeta):
        raise ValidationError("meta must be a GridMeta")
    if data.ndim != expected_ndim or data.shape[:3] != meta.dims:
        raise ValidationError(
            f"data shape {data.shape} does not match dims {meta.dims}"
        )
    if channels is not None and data.shape[3] != channels:
        raise ValidationError(f"expected {channels} channels, got {data.shape[3]}")
    if not np.all(np.isfinite(data)):
        raise ValidationError("data contains non-finite values")


@dataclass(frozen=True)
class ScalarVolume:
    meta: GridMeta
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        _check_meta(self.meta, data, 3)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class LabelVolume:
    meta: GridMeta
    data: np.ndarray
    label_names: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.integer):
            if not np.allclose(data, np.round(data)):
                raise ValidationError("label data must be integer-valued")
            data = np.round(data).astype(np.int64)
        else:
            data = data.astype(np.int64)
        if data.ndim != 3 or data.shape != self.meta.dims:
            raise ValidationError(
                f"label shape {data.shape} does not match dims {self.meta.dims}"
            )
        if data.min() < 0:
            raise ValidationError("labels must be non-negative")
        names = dict(self.label_names)
        for lab in np.unique(data):
            if lab != 0 and int(lab) not in names:
                names[int(lab)] = f"label_{int(lab)}"
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "label_names", names)

    def labels(self):
        return sorted(int(v) for v in np.unique(self.data) if v != 0)


@dataclass(frozen=True)
class TensorVolume:
    meta: GridMeta
    data: np.ndarray  # (nx, ny, nz, 6) in TENSOR_COMPONENTS order

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        _check_meta(self.meta, data, 4, channels=6)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def matrices(self):
        """Per-voxel 3x3 matrices, shape (nx, ny, nz, 3, 3)."""
        return tensor6_to_mat33(self.data)


def tensor6_to_mat33(t6):
    """(..., 6) lower-triangular components -> (..., 3, 3) symmetric matrices."""
    t6 = np.asarray(t6, dtype=np.float64)
    out = np.zeros(t6.shape[:-1] + (3, 3), dtype=np.float64)
    for c, (i, j) in enumerate(_COMP_IJ):
        out[..., i, j] = t6[..., c]
        out[..., j, i] = t6[..., c]
    return out


def mat33_to_tensor6(m):
    """(..., 3, 3) symmetric matrices -> (..., 6) components."""
    m = np.asarray(m, dtype=np.float64)
    out = np.empty(m.shape[:-2] + (6,), dtype=np.float64)
    for c, (i, j) in enumerate(_COMP_IJ):
        out[..., c] = m[..., i, j]
    return out


def resample_to(vol, target_meta):
    """Resample a volume onto a new grid.

    Scalars and tensors are interpolated trilinearly, labels by nearest
    neighbor; samples outside the source grid are zero-filled. Resampling to
    the volume's own meta returns the data unchanged.
    """
    if not isinstance(target_meta, GridMeta):
        raise ValidationError("target_meta must be a GridMeta")
    if target_meta == vol.meta:
        return type(vol)(vol.meta, vol.data) if not isinstance(vol, LabelVolume) \
            else LabelVolume(vol.meta, vol.data, vol.label_names)

    pts = target_meta.grid_points().reshape(-1, 3)
    coords = kernels.snap_lattice(vol.meta.phys_to_voxel(pts))
    nx, ny, nz = target_meta.dims
    if isinstance(vol, ScalarVolume):
        vals = kernels.trilinear_gather(vol.data[..., None], coords)
        return ScalarVolume(target_meta, vals.reshape(nx, ny, nz))
    if isinstance(vol, TensorVolume):
        vals = kernels.trilinear_gather(vol.data, coords)
        return TensorVolume(target_meta, vals.reshape(nx, ny, nz, 6))
    if isinstance(vol, LabelVolume):
        vals = kernels.nearest_gather(vol.data, coords)
        return LabelVolume(
            target_meta, vals.reshape(nx, ny, nz), vol.label_names
        )
    raise ValidationError(f"unsupported volume type {type(vol)!r}")


def pad_or_crop(vol, target_dims):
    """Center-aligned zero-fill padding / cropping to a target matrix size."""
    target_dims = tuple(int(d) for d in target_dims)
    src = vol.data
    extra = src.shape[3:] if src.ndim > 3 else ()
    out = np.zeros(target_dims + extra, dtype=src.dtype)
    src_sl, dst_sl = [], []
    new_origin = list(vol.meta.origin)
    for ax in range(3):
        n_src, n_dst = src.shape[ax], target_dims[ax]
        off = (n_src - n_dst) // 2
        if off >= 0:
            src_sl.append(slice(off, off + n_dst))
            dst_sl.append(slice(0, n_dst))
        else:
            src_sl.append(slice(0, n_src))
            dst_sl.append(slice(-off, -off + n_src))
        new_origin[ax] += off * vol.meta.spacing[ax]
    out[tuple(dst_sl)] = src[tuple(src_sl)]
    meta = GridMeta(target_dims, vol.meta.spacing, tuple(new_origin))
    if isinstance(vol, LabelVolume):
        return LabelVolume(meta, out, vol.label_names)
    return type(vol)(meta, out)
