"""Interpolation gather kernels: the hot inner loops of warping and resampling.

All kernels take voxel-space coordinates (continuous indices into the array)
and implement a zero-fill boundary policy: lattice nodes outside the array
contribute zero to the interpolated value.

Each kernel has a numba-compiled path and a vectorized NumPy fallback; the
active path is chosen by dtireg.backend (env var DTIREG_NO_NUMBA).
"""

import numpy as np

from .backend import USE_NUMBA, maybe_njit

if USE_NUMBA:
    from numba import prange
else:  # pragma: no cover
    prange = range


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

@maybe_njit(parallel=True)
def _trilinear_nb(data, coords, out):  # pragma: no cover - exercised via dispatch
    nx, ny, nz, nc = data.shape
    n = coords.shape[0]
    for i in prange(n):
        x, y, z = coords[i, 0], coords[i, 1], coords[i, 2]
        x0 = int(np.floor(x))
        y0 = int(np.floor(y))
        z0 = int(np.floor(z))
        fx = x - x0
        fy = y - y0
        fz = z - z0
        for c in range(nc):
            acc = 0.0
            for dx in range(2):
                ix = x0 + dx
                if ix < 0 or ix >= nx:
                    continue
                wx = fx if dx == 1 else 1.0 - fx
                for dy in range(2):
                    iy = y0 + dy
                    if iy < 0 or iy >= ny:
                        continue
                    wy = fy if dy == 1 else 1.0 - fy
                    for dz in range(2):
                        iz = z0 + dz
                        if iz < 0 or iz >= nz:
                            continue
                        wz = fz if dz == 1 else 1.0 - fz
                        acc += wx * wy * wz * data[ix, iy, iz, c]
            out[i, c] = acc


@maybe_njit(parallel=True)
def _trilinear_grad_nb(data, coords, out, grad):  # pragma: no cover
    nx, ny, nz, nc = data.shape
    n = coords.shape[0]
    for i in prange(n):
        x, y, z = coords[i, 0], coords[i, 1], coords[i, 2]
        x0 = int(np.floor(x))
        y0 = int(np.floor(y))
        z0 = int(np.floor(z))
        fx = x - x0
        fy = y - y0
        fz = z - z0
        for c in range(nc):
            acc = 0.0
            gx = 0.0
            gy = 0.0
            gz = 0.0
            for dx in range(2):
                ix = x0 + dx
                if ix < 0 or ix >= nx:
                    continue
                wx = fx if dx == 1 else 1.0 - fx
                dwx = 1.0 if dx == 1 else -1.0
                for dy in range(2):
                    iy = y0 + dy
                    if iy < 0 or iy >= ny:
                        continue
                    wy = fy if dy == 1 else 1.0 - fy
                    dwy = 1.0 if dy == 1 else -1.0
                    for dz in range(2):
                        iz = z0 + dz
                        if iz < 0 or iz >= nz:
                            continue
                        wz = fz if dz == 1 else 1.0 - fz
                        dwz = 1.0 if dz == 1 else -1.0
                        v = data[ix, iy, iz, c]
                        acc += wx * wy * wz * v
                        gx += dwx * wy * wz * v
                        gy += wx * dwy * wz * v
                        gz += wx * wy * dwz * v
            out[i, c] = acc
            grad[i, c, 0] = gx
            grad[i, c, 1] = gy
            grad[i, c, 2] = gz


@maybe_njit(parallel=True)
def _nearest_nb(data, coords, out):  # pragma: no cover
    nx, ny, nz = data.shape
    n = coords.shape[0]
    for i in prange(n):
        ix = int(np.floor(coords[i, 0] + 0.5))
        iy = int(np.floor(coords[i, 1] + 0.5))
        iz = int(np.floor(coords[i, 2] + 0.5))
        if 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz:
            out[i] = data[ix, iy, iz]
        else:
            out[i] = 0


# ---------------------------------------------------------------------------
# NumPy fallback path
# ---------------------------------------------------------------------------

def _trilinear_np(data, coords):
    nx, ny, nz, nc = data.shape
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    out = np.zeros((coords.shape[0], nc), dtype=np.float64)
    for dx in range(2):
        for dy in range(2):
            for dz in range(2):
                ix = base[:, 0] + dx
                iy = base[:, 1] + dy
                iz = base[:, 2] + dz
                ok = (
                    (ix >= 0) & (ix < nx)
                    & (iy >= 0) & (iy < ny)
                    & (iz >= 0) & (iz < nz)
                )
                wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
                wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                w = (wx * wy * wz)[ok]
                out[ok] += w[:, None] * data[ix[ok], iy[ok], iz[ok]]
    return out


def _trilinear_grad_np(data, coords):
    nx, ny, nz, nc = data.shape
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    n = coords.shape[0]
    out = np.zeros((n, nc), dtype=np.float64)
    grad = np.zeros((n, nc, 3), dtype=np.float64)
    for dx in range(2):
        for dy in range(2):
            for dz in range(2):
                ix = base[:, 0] + dx
                iy = base[:, 1] + dy
                iz = base[:, 2] + dz
                ok = (
                    (ix >= 0) & (ix < nx)
                    & (iy >= 0) & (iy < ny)
                    & (iz >= 0) & (iz < nz)
                )
                wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
                wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                sx = 1.0 if dx else -1.0
                sy = 1.0 if dy else -1.0
                sz = 1.0 if dz else -1.0
                v = data[ix[ok], iy[ok], iz[ok]]
                out[ok] += (wx * wy * wz)[ok, None] * v
                grad[ok, :, 0] += (sx * wy * wz)[ok, None] * v
                grad[ok, :, 1] += (wx * sy * wz)[ok, None] * v
                grad[ok, :, 2] += (wx * wy * sz)[ok, None] * v
    return out, grad


def _nearest_np(data, coords):
    nx, ny, nz = data.shape
    idx = np.floor(coords + 0.5).astype(np.int64)
    ok = (
        (idx[:, 0] >= 0) & (idx[:, 0] < nx)
        & (idx[:, 1] >= 0) & (idx[:, 1] < ny)
        & (idx[:, 2] >= 0) & (idx[:, 2] < nz)
    )
    out = np.zeros(coords.shape[0], dtype=data.dtype)
    out[ok] = data[idx[ok, 0], idx[ok, 1], idx[ok, 2]]
    return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def snap_lattice(coords, tol=1e-9):
    """Snap coordinates within tol of a lattice node onto it.

    Physical->voxel conversions carry O(1e-16) rounding noise; snapping keeps
    lattice-aligned warps (identity, integer translations) bit-exact.
    """
    coords = np.asarray(coords, dtype=np.float64)
    rounded = np.round(coords)
    return np.where(np.abs(coords - rounded) < tol, rounded, coords)


#: number of interpolation passes executed; audits single-interpolation claims
interp_calls = 0


def reset_interp_counter():
    global interp_calls
    interp_calls = 0


def _count_interp():
    global interp_calls
    interp_calls += 1


def trilinear_gather(data, coords):
    """Sample a (nx, ny, nz, C) array at continuous voxel coords, shape (N, 3).

    Returns (N, C) float64. Out-of-range lattice nodes contribute zero.
    """
    _count_interp()
    data = np.ascontiguousarray(data, dtype=np.float64)
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    if USE_NUMBA:
        out = np.empty((coords.shape[0], data.shape[3]), dtype=np.float64)
        _trilinear_nb(data, coords, out)
        return out
    return _trilinear_np(data, coords)


def trilinear_gather_grad(data, coords):
    """Like trilinear_gather but also returns d(value)/d(coord), shape (N, C, 3)."""
    _count_interp()
    data = np.ascontiguousarray(data, dtype=np.float64)
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    if USE_NUMBA:
        n, nc = coords.shape[0], data.shape[3]
        out = np.empty((n, nc), dtype=np.float64)
        grad = np.empty((n, nc, 3), dtype=np.float64)
        _trilinear_grad_nb(data, coords, out, grad)
        return out, grad
    return _trilinear_grad_np(data, coords)


def nearest_gather(data, coords):
    """Nearest-neighbor sample of a (nx, ny, nz) array; out-of-range -> 0."""
    _count_interp()
    data = np.ascontiguousarray(data)
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    if USE_NUMBA and data.dtype in (np.float64, np.int64):
        out = np.empty(coords.shape[0], dtype=data.dtype)
        _nearest_nb(data, coords, out)
        return out
    return _nearest_np(data, coords)
