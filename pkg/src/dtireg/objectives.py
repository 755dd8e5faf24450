"""Loss terms and evaluation metrics.

Losses: windowed squared-NCC on FA maps, combined full-tensor/diagonal
squared distance, soft multi-class Dice on warped tract masks, and a
forward-difference smoothness penalty on the displacement field. Each
differentiable term has a hand-derived gradient with respect to the dense
displacement field (chained through the trilinear warp); these back the
instance-optimization engine and are audited against finite differences.

Metrics: multi-class hard Dice, global Pearson correlation, percentage of
negative Jacobian determinants over the active region, and Tenengrad
sharpness.
"""

from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import UndefinedMetricError, ValidationError
from .volgrid import LabelVolume, ScalarVolume, TensorVolume, tensor6_to_mat33
from .xform import jacobian_determinant

VAR_EPS = 1e-10


@dataclass(frozen=True)
class LossWeights:
    lambda_fa: float = 10.0
    gamma_def: float = 100.0

    def __post_init__(self):
        for name in ("lambda_fa", "gamma_def"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"{name} must be finite and >= 0")
            object.__setattr__(self, name, v)


@dataclass
class ObjectiveReport:
    l_fa: float = 0.0
    l_dti: float = 0.0
    l_tract: float = 0.0
    l_def: float = 0.0
    dice: float = 1.0
    cc: float = 1.0
    njd_pct: float = 0.0
    tenengrad: float = 0.0

    CSV_FIELDS = ("dice", "cc", "njd_pct", "tenengrad")

    def to_dict(self):
        return asdict(self)

    def csv_row(self):
        return ",".join(f"{getattr(self, k):.10g}" for k in self.CSV_FIELDS)


# ---------------------------------------------------------------------------
# windowed NCC
# ---------------------------------------------------------------------------

def _box_sum(arr, k):
    """Sum over the centered k^3 window at each voxel, zero padding outside."""
    return ndimage.uniform_filter(arr, size=k, mode="constant") * float(k) ** 3


def _ncc_terms(a, b, k):
    n = float(k) ** 3
    sa = _box_sum(a, k)
    sb = _box_sum(b, k)
    saa = _box_sum(a * a, k)
    sbb = _box_sum(b * b, k)
    sab = _box_sum(a * b, k)
    cross = sab - sa * sb / n
    va = saa - sa * sa / n
    vb = sbb - sb * sb / n
    valid = (va > VAR_EPS) & (vb > VAR_EPS)
    return sa, sb, cross, va, vb, valid


def local_ncc_arrays(a, b, kernel):
    """Loss 1 - mean(cc^2) over all voxels; low-variance windows count as 0."""
    _, _, cross, va, vb, valid = _ncc_terms(a, b, kernel)
    cc2 = np.zeros_like(a)
    cc2[valid] = cross[valid] ** 2 / (va[valid] * vb[valid])
    return float(1.0 - cc2.mean())


def local_ncc(a, b, kernel=9):
    """Local squared-NCC loss between two scalar volumes."""
    if not isinstance(a, ScalarVolume) or not isinstance(b, ScalarVolume):
        raise ValidationError("local_ncc expects ScalarVolume inputs")
    if a.meta != b.meta:
        raise ValidationError("volumes must share a grid")
    if kernel < 3 or kernel % 2 == 0:
        raise ValidationError("kernel must be odd and >= 3")
    return local_ncc_arrays(a.data, b.data, kernel)


def local_ncc_grad_b(a, b, kernel):
    """(loss, dloss/db) for the windowed squared-NCC loss.

    Each voxel y appears in every window centered within the kernel radius;
    the sum over those windows is itself a box sum, so the gradient costs
    four additional box filters.
    """
    sa, sb, cross, va, vb, valid = _ncc_terms(a, b, kernel)
    n = float(kernel) ** 3
    cc2 = np.zeros_like(a)
    cc2[valid] = cross[valid] ** 2 / (va[valid] * vb[valid])
    loss = float(1.0 - cc2.mean())

    alpha = np.zeros_like(a)
    beta = np.zeros_like(a)
    alpha[valid] = 2.0 * cross[valid] / (va[valid] * vb[valid])
    beta[valid] = -2.0 * cross[valid] ** 2 / (va[valid] * vb[valid] ** 2)
    abar = sa / n
    bbar = sb / n
    grad = -(
        a * _box_sum(alpha, kernel)
        - _box_sum(alpha * abar, kernel)
        + b * _box_sum(beta, kernel)
        - _box_sum(beta * bbar, kernel)
    ) / a.size
    return loss, grad


# ---------------------------------------------------------------------------
# tensor distance
# ---------------------------------------------------------------------------

def _region_mask(region, meta):
    if region is None:
        return np.ones(meta.dims, dtype=bool)
    if isinstance(region, LabelVolume):
        if region.meta != meta:
            raise ValidationError("region grid does not match volumes")
        return region.data > 0
    mask = np.asarray(region, dtype=bool)
    if mask.shape != meta.dims:
        raise ValidationError("region mask shape mismatch")
    return mask


def tensor_loss(atlas, moved, region=None):
    """Mean over the region of ED + DD between tensor pairs.

    ED is the squared Frobenius distance over all 9 matrix entries, DD the
    squared distance of the diagonal; in stored components both collapse to
    2 * sum of squared component differences.
    """
    if atlas.meta != moved.meta:
        raise ValidationError("tensor volumes must share a grid")
    mask = _region_mask(region, atlas.meta)
    if not mask.any():
        raise ValidationError("region is empty")
    delta = moved.data[mask] - atlas.data[mask]
    return float(2.0 * (delta ** 2).sum() / mask.sum())


def tensor_loss_grad_moved(atlas6, moved6, mask):
    """(loss, dloss/dmoved6) for the ED + DD tensor distance."""
    n = mask.sum()
    if n == 0:
        raise ValidationError("region is empty")
    delta = (moved6 - atlas6) * mask[..., None]
    loss = float(2.0 * (delta ** 2).sum() / n)
    grad = 4.0 * delta / n
    return loss, grad


# ---------------------------------------------------------------------------
# Dice
# ---------------------------------------------------------------------------

def dice_multiclass(a, b):
    """Average hard Dice over labels nonempty in at least one input."""
    if a.meta != b.meta:
        raise ValidationError("label volumes must share a grid")
    labels = sorted(set(a.labels()) | set(b.labels()))
    if not labels:
        raise UndefinedMetricError("both label volumes are empty")
    scores = []
    for lab in labels:
        ma = a.data == lab
        mb = b.data == lab
        denom = ma.sum() + mb.sum()
        scores.append(2.0 * np.logical_and(ma, mb).sum() / denom)
    return float(np.mean(scores))


def one_hot(labels_data, labels):
    """Label array -> float channels (nx, ny, nz, L) in the given label order."""
    out = np.zeros(labels_data.shape + (len(labels),), dtype=np.float64)
    for c, lab in enumerate(labels):
        out[..., c] = labels_data == lab
    return out


def soft_dice_loss_grad(warped, target):
    """Soft multi-class Dice loss and gradient wrt the warped channels.

    warped, target: (nx, ny, nz, L) float channels. Per label:
    dice = 2 sum(p q) / (sum(p^2) + sum(q^2)); loss = 1 - mean(dice).
    Labels empty in both inputs are skipped.
    """
    axes = (0, 1, 2)
    inter = (warped * target).sum(axis=axes)
    pp = (warped ** 2).sum(axis=axes)
    qq = (target ** 2).sum(axis=axes)
    denom = pp + qq
    active = denom > 0
    if not active.any():
        raise UndefinedMetricError("all labels empty in both inputs")
    n_active = int(active.sum())
    dice = np.zeros(warped.shape[3])
    dice[active] = 2.0 * inter[active] / denom[active]
    loss = float(1.0 - dice[active].mean())
    grad = np.zeros_like(warped)
    for c in np.nonzero(active)[0]:
        grad[..., c] = -(
            2.0 * target[..., c] * denom[c] - 2.0 * inter[c] * 2.0 * warped[..., c]
        ) / denom[c] ** 2 / n_active
    return loss, grad


# ---------------------------------------------------------------------------
# smoothness
# ---------------------------------------------------------------------------

def _voxel_disp(field):
    return field.disp / np.asarray(field.meta.spacing)


def smoothness_loss(field):
    """Mean squared forward-difference gradient of the displacement.

    Displacement is taken in voxel units and differenced per voxel; the mean
    runs over voxels where all three forward neighbors exist.
    """
    u = _voxel_disp(field)
    interior = tuple(slice(0, n - 1) for n in field.meta.dims)
    total = 0.0
    for ax in range(3):
        d = np.diff(u, axis=ax)
        total += (d[interior] ** 2).sum()
    n = (field.meta.dims[0] - 1) * (field.meta.dims[1] - 1) * (field.meta.dims[2] - 1)
    return float(total / n)


def smoothness_loss_grad(field):
    """(loss, dloss/ddisp) for the smoothness penalty, gradient in mm units."""
    u = _voxel_disp(field)
    dims = field.meta.dims
    interior = tuple(slice(0, n - 1) for n in dims)
    n = (dims[0] - 1) * (dims[1] - 1) * (dims[2] - 1)
    total = 0.0
    grad_u = np.zeros_like(u)
    for ax in range(3):
        d = np.diff(u, axis=ax)
        dint = np.zeros_like(d)
        dint[interior] = d[interior]
        total += (dint ** 2).sum()
        fwd = [slice(None)] * 4
        fwd[ax] = slice(1, dims[ax])
        back = [slice(None)] * 4
        back[ax] = slice(0, dims[ax] - 1)
        grad_u[tuple(fwd)] += 2.0 * dint / n
        grad_u[tuple(back)] -= 2.0 * dint / n
    return float(total / n), grad_u / np.asarray(field.meta.spacing)


# ---------------------------------------------------------------------------
# chaining loss gradients through the trilinear warp
# ---------------------------------------------------------------------------

def warp_channels_with_grad(data, vol_meta, field):
    """Warp (nx,ny,nz,C) channels; also return spatial derivative at samples.

    Returns (warped, dwarp_dcoord) with dwarp_dcoord shaped (*out_dims, C, 3)
    in units of value per voxel index of the source grid.
    """
    pts = field.target_points().reshape(-1, 3)
    coords = kernels.snap_lattice(vol_meta.phys_to_voxel(pts))
    vals, grads = kernels.trilinear_gather_grad(data, coords)
    out_dims = field.meta.dims
    nc = data.shape[3]
    return (vals.reshape(out_dims + (nc,)),
            grads.reshape(out_dims + (nc, 3)))


def chain_to_disp(dL_dwarped, dwarp_dcoord, vol_meta):
    """dL/ddisp (mm) from dL/dwarped values and sample-point derivatives."""
    g = np.einsum("...c,...ck->...k", dL_dwarped, dwarp_dcoord)
    return g / np.asarray(vol_meta.spacing)


# ---------------------------------------------------------------------------
# displacement-gradient wrappers used by the instance optimizer / audits
# ---------------------------------------------------------------------------

def ncc_loss_disp_grad(target, moving, field, kernel):
    """lambda-free L_FA and its gradient wrt the displacement field."""
    warped, dwdc = warp_channels_with_grad(moving.data[..., None], moving.meta, field)
    loss, dL_db = local_ncc_grad_b(target.data, warped[..., 0], kernel)
    return loss, chain_to_disp(dL_db[..., None], dwdc, moving.meta)


def tensor_loss_disp_grad(atlas, moving, field, rots, region=None):
    """L_DTI of warp-then-reorient tensors and its displacement gradient.

    The rotation field is held fixed (no gradient through the polar factor);
    the gradient is exact for the warp-and-conjugate map at fixed R.
    """
    mask = _region_mask(region, field.meta)
    warped6, dwdc = warp_channels_with_grad(moving.data, moving.meta, field)
    W = tensor6_to_mat33(warped6)
    Rt = np.swapaxes(rots.R, -1, -2)
    Dp = rots.R @ W @ Rt
    n = mask.sum()
    if n == 0:
        raise ValidationError("region is empty")
    atlas_m = tensor6_to_mat33(atlas.data)
    M = (Dp - atlas_m) * mask[..., None, None]
    loss = float(
        ((M ** 2).sum() + (M[..., 0, 0] ** 2 + M[..., 1, 1] ** 2
                           + M[..., 2, 2] ** 2).sum()) / n
    )
    # dL/dD' = (2M + 2 diag(M)) / n, then pull back through D' = R W R^T
    G = 2.0 * M
    for i in range(3):
        G[..., i, i] += 2.0 * M[..., i, i]
    G /= n
    GW = Rt @ G @ rots.R
    # symmetric components: off-diagonals of W feed two matrix entries
    dL_dw6 = np.stack([
        GW[..., 0, 0],
        GW[..., 0, 1] + GW[..., 1, 0],
        GW[..., 1, 1],
        GW[..., 0, 2] + GW[..., 2, 0],
        GW[..., 1, 2] + GW[..., 2, 1],
        GW[..., 2, 2],
    ], axis=-1)
    return loss, chain_to_disp(dL_dw6, dwdc, moving.meta)


def tract_loss_disp_grad(moving_labels, target_labels, field):
    """Soft-Dice tract loss on warped one-hot channels, with disp gradient."""
    labels = sorted(set(moving_labels.labels()) | set(target_labels.labels()))
    if not labels:
        raise UndefinedMetricError("no nonzero labels present")
    mv = one_hot(moving_labels.data, labels)
    tg = one_hot(target_labels.data, labels)
    warped, dwdc = warp_channels_with_grad(mv, moving_labels.meta, field)
    loss, dL_dwarped = soft_dice_loss_grad(warped, tg)
    return loss, chain_to_disp(dL_dwarped, dwdc, moving_labels.meta)


# ---------------------------------------------------------------------------
# composite losses
# ---------------------------------------------------------------------------

def composite_affine_loss(atlas_fa, atlas_tensor, warped_fa, moved_tensor,
                          region=None, lambda_fa=10.0):
    """lambda * L_FA (9^3 kernel) + L_DTI on reoriented warped tensors."""
    l_fa = local_ncc(atlas_fa, warped_fa, kernel=9)
    l_dti = tensor_loss(atlas_tensor, moved_tensor, region)
    return lambda_fa * l_fa + l_dti, l_fa, l_dti


def composite_deform_loss(atlas_fa, atlas_tensor, warped_fa, moved_tensor,
                          field, warped_labels=None, atlas_labels=None,
                          region=None, weights=None):
    """lambda * L_FA (5^3) + L_DTI + L_tract + gamma * L_def.

    The tract term is included only when both label inputs are supplied.
    Returns (total, l_fa, l_dti, l_tract, l_def).
    """
    w = weights or LossWeights(lambda_fa=100.0, gamma_def=100.0)
    l_fa = local_ncc(atlas_fa, warped_fa, kernel=5)
    l_dti = tensor_loss(atlas_tensor, moved_tensor, region)
    l_tract = 0.0
    if warped_labels is not None and atlas_labels is not None:
        labels = sorted(set(warped_labels.labels()) | set(atlas_labels.labels()))
        if labels:
            loss, _ = soft_dice_loss_grad(
                one_hot(warped_labels.data, labels),
                one_hot(atlas_labels.data, labels),
            )
            l_tract = loss
    l_def = smoothness_loss(field)
    total = w.lambda_fa * l_fa + l_dti + l_tract + w.gamma_def * l_def
    return total, l_fa, l_dti, l_tract, l_def


# ---------------------------------------------------------------------------
# evaluation metrics
# ---------------------------------------------------------------------------

def image_cc(a, b, region=None):
    """Global Pearson correlation between two scalar volumes over a region."""
    if a.meta != b.meta:
        raise ValidationError("volumes must share a grid")
    mask = _region_mask(region, a.meta)
    if not mask.any():
        raise ValidationError("region is empty")
    x = a.data[mask]
    y = b.data[mask]
    xc = x - x.mean()
    yc = y - y.mean()
    sx = (xc ** 2).sum()
    sy = (yc ** 2).sum()
    if sx == 0 and sy == 0:
        raise UndefinedMetricError("both images constant on the region")
    if sx == 0 or sy == 0:
        return 0.0
    return float(np.clip((xc * yc).sum() / np.sqrt(sx * sy), -1.0, 1.0))


def njd_percent(field, active_tol=1e-9):
    """Percentage of negative-Jacobian voxels over the active-displacement set."""
    active = np.abs(field.disp).max(axis=-1) > active_tol
    n_active = int(active.sum())
    if n_active == 0:
        return 0.0
    dets = jacobian_determinant(field)
    return float(100.0 * (dets[active] < 0).sum() / n_active)


def tenengrad(a):
    """Sum over voxels of the squared Sobel gradient magnitude."""
    data = a.data if isinstance(a, ScalarVolume) else np.asarray(a, dtype=np.float64)
    total = np.zeros_like(data)
    for ax in range(3):
        g = ndimage.sobel(data, axis=ax, mode="reflect")
        total += g ** 2
    return float(total.sum())


def evaluation_report(field, warped_fa=None, target_fa=None,
                      warped_labels=None, target_labels=None, region=None,
                      losses=None):
    """Assemble an ObjectiveReport from a registration state."""
    rep = ObjectiveReport()
    if losses is not None:
        rep.l_fa, rep.l_dti, rep.l_tract, rep.l_def = losses
    rep.njd_pct = njd_percent(field)
    if warped_fa is not None and target_fa is not None:
        rep.cc = image_cc(target_fa, warped_fa, region)
        rep.tenengrad = tenengrad(warped_fa)
    if warped_labels is not None and target_labels is not None:
        rep.dice = dice_multiclass(target_labels, warped_labels)
    return rep
