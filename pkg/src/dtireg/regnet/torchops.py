"""Differentiable torch counterparts of the warping and loss operations.

Volumes are laid out as (1, C, nx, ny, nz). Displacements passed to
``warp_vox`` are in voxel units of the grid being warped; losses mirror the
numpy implementations in objectives.py so both backends minimize the same
quantities.
"""

import numpy as np
import torch
import torch.nn.functional as F

VAR_EPS = 1e-10
EIG_EPS = 1e-12

_COMP_IJ = ((0, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 2))


def to_torch(arr, dtype=torch.float32):
    """(nx,ny,nz) or (nx,ny,nz,C) numpy array -> (1,C,nx,ny,nz) tensor."""
    a = np.array(arr, dtype=np.float64)
    if a.ndim == 3:
        a = a[..., None]
    t = torch.from_numpy(np.ascontiguousarray(np.moveaxis(a, -1, 0)))
    return t.unsqueeze(0).to(dtype)


def from_torch(t):
    """(1,C,nx,ny,nz) tensor -> (nx,ny,nz,C) float64 array."""
    a = t.detach().cpu().double().numpy()[0]
    return np.moveaxis(a, 0, -1)


def base_grid(dims, dtype=torch.float32):
    """Voxel-index grid, shape (1, nx, ny, nz, 3) ordered (i, j, k)."""
    axes = [torch.arange(n, dtype=dtype) for n in dims]
    ii, jj, kk = torch.meshgrid(*axes, indexing="ij")
    return torch.stack([ii, jj, kk], dim=-1).unsqueeze(0)


def _normalize(coords, dims):
    """Voxel coords (1,nx,ny,nz,3) -> grid_sample grid in (z,y,x) order."""
    norm = []
    for ax in range(3):
        n = dims[ax]
        if n > 1:
            norm.append(2.0 * coords[..., ax] / (n - 1) - 1.0)
        else:
            norm.append(torch.zeros_like(coords[..., ax]))
    # grid_sample indexes the last spatial dim with channel 0
    return torch.stack([norm[2], norm[1], norm[0]], dim=-1)


def warp_vox(vol, disp_vox):
    """Pull-back warp of (1,C,nx,ny,nz) by a voxel-unit displacement.

    disp_vox: (1,3,nx,ny,nz) on the same grid; samples outside are zero.
    """
    dims = vol.shape[2:]
    coords = base_grid(dims, vol.dtype).to(vol.device) \
        + disp_vox.permute(0, 2, 3, 4, 1)
    grid = _normalize(coords, dims)
    return F.grid_sample(vol, grid, mode="bilinear", padding_mode="zeros",
                         align_corners=True)


def affine_disp_vox(A, t, meta, dims=None, dtype=torch.float32):
    """Voxel-unit displacement field of an affine map on a grid.

    A: (3,3) tensor, t: (3,) tensor acting on physical mm coordinates.
    ``dims`` defaults to the full grid; pass pyramid dims with matching
    effective spacing through a scaled meta when needed.
    """
    dims = tuple(dims or meta.dims)
    spacing = torch.tensor(meta.spacing, dtype=dtype)
    origin = torch.tensor(meta.origin, dtype=dtype)
    idx = base_grid(dims, dtype)[0]
    phys = origin + idx * spacing
    mapped = phys @ A.T + t
    disp_vox = (mapped - origin) / spacing - idx
    return disp_vox.permute(3, 0, 1, 2).unsqueeze(0)


def box_sum(x, k):
    """Centered k^3 window sums with zero padding, per channel."""
    c = x.shape[1]
    w = torch.ones(c, 1, k, k, k, dtype=x.dtype, device=x.device)
    return F.conv3d(x, w, padding=k // 2, groups=c)


def local_ncc_t(a, b, kernel):
    """Windowed squared-NCC loss 1 - mean(cc^2); matches local_ncc_arrays."""
    n = float(kernel) ** 3
    sa = box_sum(a, kernel)
    sb = box_sum(b, kernel)
    saa = box_sum(a * a, kernel)
    sbb = box_sum(b * b, kernel)
    sab = box_sum(a * b, kernel)
    cross = sab - sa * sb / n
    va = saa - sa * sa / n
    vb = sbb - sb * sb / n
    valid = (va > VAR_EPS) & (vb > VAR_EPS)
    safe = torch.where(valid, va * vb, torch.ones_like(va))
    cc2 = torch.where(valid, cross * cross / safe, torch.zeros_like(cross))
    return 1.0 - cc2.mean()


def tensor_loss_t(atlas6, moved6, mask=None):
    """ED + DD tensor distance, mean over the region; matches tensor_loss."""
    delta = moved6 - atlas6
    if mask is not None:
        delta = delta * mask
        denom = mask.sum() * 1.0
    else:
        denom = float(np.prod(delta.shape[2:]))
    return 2.0 * (delta ** 2).sum() / denom


def soft_dice_t(warped, target):
    """Soft multi-class Dice loss on (1,L,nx,ny,nz) channel stacks."""
    inter = (warped * target).sum(dim=(0, 2, 3, 4))
    denom = (warped ** 2).sum(dim=(0, 2, 3, 4)) + (target ** 2).sum(dim=(0, 2, 3, 4))
    active = denom > 0
    dice = 2.0 * inter[active] / denom[active]
    return 1.0 - dice.mean()


def smoothness_t(disp_mm, spacing):
    """Mean squared forward differences of voxel-unit displacement.

    disp_mm: (1,3,nx,ny,nz) in mm; mean over interior voxels, matching
    smoothness_loss.
    """
    sp = torch.tensor(spacing, dtype=disp_mm.dtype, device=disp_mm.device)
    u = disp_mm / sp.view(1, 3, 1, 1, 1)
    dims = disp_mm.shape[2:]
    n = (dims[0] - 1) * (dims[1] - 1) * (dims[2] - 1)
    total = 0.0
    inter = (slice(None), slice(None),
             slice(0, dims[0] - 1), slice(0, dims[1] - 1), slice(0, dims[2] - 1))
    for ax in range(3):
        d = torch.diff(u, dim=2 + ax)
        total = total + (d[inter] ** 2).sum()
    return total / n


def matrix_invsqrt_spd(S, iters=15):
    """(..., 3, 3) SPD matrices -> S^(-1/2) by Newton-Schulz iteration.

    An eigensystem route would be shorter, but the eigh backward divides by
    eigenvalue gaps and returns NaN gradients at repeated eigenvalues; an
    identity Jacobian (zero displacement field) hits that case at every
    voxel. The coupled iteration is pure matrix products, so its gradient
    is smooth everywhere.
    """
    eye = torch.eye(3, dtype=S.dtype, device=S.device).expand_as(S)
    S = S + EIG_EPS * eye
    # Frobenius normalization puts every eigenvalue in (0, 1], inside the
    # convergence region |1 - lambda| < 1
    c = S.norm(dim=(-2, -1), keepdim=True)
    Y = S / c
    Z = eye
    for _ in range(iters):
        T = 0.5 * (3.0 * eye - Z @ Y)
        Y = Y @ T
        Z = T @ Z
    return Z / c.squeeze(-1).squeeze(-1).sqrt()[..., None, None]


def polar_rotation_t(A):
    """Rotation factor of (..., 3, 3) matrices with positive determinant.

    Uses R = A (A^T A)^(-1/2), which is differentiable where the SVD-based
    route has degenerate gradients at repeated singular values.
    """
    S = A.transpose(-1, -2) @ A
    return A @ matrix_invsqrt_spd(S)


def jacobian_t(disp_mm, spacing):
    """Jacobian of phi(x) = x + disp, shape (nx,ny,nz,3,3).

    Central differences in the interior, one-sided on the faces, mirroring
    numpy.gradient.
    """
    dims = disp_mm.shape[2:]
    sp = spacing
    rows = []
    for i in range(3):
        u = disp_mm[0, i]
        comps = []
        for ax in range(3):
            n = dims[ax]
            g = torch.empty_like(u)
            sl = [slice(None)] * 3

            def at(s):
                out = sl.copy()
                out[ax] = s
                return tuple(out)

            g[at(slice(1, n - 1))] = (
                u[at(slice(2, n))] - u[at(slice(0, n - 2))]) / (2.0 * sp[ax])
            g[at(slice(0, 1))] = (u[at(slice(1, 2))] - u[at(slice(0, 1))]) / sp[ax]
            g[at(slice(n - 1, n))] = (
                u[at(slice(n - 1, n))] - u[at(slice(n - 2, n - 1))]) / sp[ax]
            comps.append(g)
        rows.append(torch.stack(comps, dim=-1))
    J = torch.stack(rows, dim=-2)
    eye = torch.eye(3, dtype=disp_mm.dtype, device=disp_mm.device)
    return J + eye


def tensor6_to_mat33_t(t6):
    """(1,6,nx,ny,nz) components -> (nx,ny,nz,3,3) symmetric matrices."""
    shape = t6.shape[2:]
    out = t6.new_zeros(shape + (3, 3))
    for c, (i, j) in enumerate(_COMP_IJ):
        out[..., i, j] = t6[0, c]
        if i != j:
            out[..., j, i] = t6[0, c]
    return out


def mat33_to_tensor6_t(m):
    """(nx,ny,nz,3,3) -> (1,6,nx,ny,nz)."""
    comps = [m[..., i, j] for (i, j) in _COMP_IJ]
    return torch.stack(comps, dim=0).unsqueeze(0)


def reorient_t(warped6, R):
    """Finite-strain conjugation D' = R D R^T on 6-component channels.

    warped6: (1,6,nx,ny,nz); R: (nx,ny,nz,3,3).
    """
    D = tensor6_to_mat33_t(warped6)
    Dp = R @ D @ R.transpose(-1, -2)
    return mat33_to_tensor6_t(Dp)
