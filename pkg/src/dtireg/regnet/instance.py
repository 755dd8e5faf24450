"""Direct per-pair optimization backend.

Minimizes the same composite objectives as the learned engine by plain
gradient descent with analytic gradients: first the 12 affine parameters,
then a multi-resolution dense displacement field. No training data is
involved, which makes this the deterministic verification path for the
objectives.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from .. import kernels
from ..objectives import (
    chain_to_disp,
    evaluation_report,
    ncc_loss_disp_grad,
    one_hot,
    smoothness_loss_grad,
    soft_dice_loss_grad,
    tensor_loss_disp_grad,
    warp_channels_with_grad,
)
from ..volgrid import GridMeta, resample_to
from ..xform import (
    AffineTransform,
    DeformationField,
    compose,
    polar_rotation,
    rotation_field,
    warp_labels,
    warp_scalar,
)
from .result import RegistrationResult

STEP_GROW = 1.1
STEP_SHRINK = 0.5
MOMENTUM = 0.95

# diffusivities are ~1e-3 mm^2/s; optimizing on rescaled tensor channels
# keeps the DTI term commensurate with the FA term
TENSOR_SCALE = 1e3


@dataclass
class InstanceConfig:
    lambda_affine: float = 10.0
    lambda_deform: float = 100.0
    gamma: float = 100.0
    affine_kernel: int = 9
    deform_kernel: int = 5
    levels: tuple = (4, 2, 1)
    affine_iters: tuple = (200, 100, 50)
    deform_iters: tuple = (200, 100, 50)
    initial_move: float = 0.05
    rots_every: int = 10
    stages: str = "both"  # affine | both
    use_masks: bool = True

    def __post_init__(self):
        from ..errors import ValidationError

        if len(self.affine_iters) != len(self.levels) \
                or len(self.deform_iters) != len(self.levels):
            raise ValidationError(
                "affine_iters and deform_iters must have one entry per level, "
                f"got levels={self.levels}, affine_iters={self.affine_iters}, "
                f"deform_iters={self.deform_iters}"
            )
        if self.stages not in ("affine", "both"):
            raise ValidationError(f"stages must be affine or both, got "
                                  f"{self.stages!r}")
        if self.stages == "both" and self.levels[-1] != 1:
            raise ValidationError(
                "the deformable stage needs a final full-resolution level "
                f"(levels[-1] == 1), got levels={self.levels}"
            )


def _coarse_meta(meta, factor):
    """Downsampled grid whose lattice is a subset of the fine lattice."""
    if factor == 1:
        return meta
    dims = tuple((n - 1) // factor + 1 for n in meta.dims)
    spacing = tuple(s * factor for s in meta.spacing)
    return GridMeta(dims, spacing, meta.origin)


def _upsample_disp(disp, src_meta, dst_meta):
    pts = dst_meta.grid_points().reshape(-1, 3)
    coords = kernels.snap_lattice(src_meta.phys_to_voxel(pts))
    vals = kernels.trilinear_gather(np.ascontiguousarray(disp), coords)
    return vals.reshape(dst_meta.dims + (3,))


class _HalvingDescent:
    """Gradient descent with momentum; step halves on loss increase.

    Successful steps grow the step size slightly and feed a heavy-ball
    velocity term, which accelerates progress along the shallow axes of
    ill-conditioned objectives. A loss increase rejects the trial point,
    halves the step, clears the velocity, and retries from the best state.
    """

    def __init__(self, params, initial_move, momentum=MOMENTUM):
        self.params = params
        self.initial_move = initial_move
        self.momentum = momentum
        self.step = None
        self.best = None
        self.best_params = params.copy()
        self.best_grad = None
        self.velocity = None

    def update(self, loss, grad):
        if self.step is None:
            gmax = np.abs(grad).max()
            self.step = self.initial_move / gmax if gmax > 0 else 0.0
            self.velocity = np.zeros_like(grad)
        if self.best is None or loss < self.best:
            self.best = loss
            self.best_params = self.params.copy()
            self.best_grad = grad.copy()
            self.velocity = self.momentum * self.velocity + grad
            self.step *= STEP_GROW
        else:
            # reject the trial point, retry from the best state
            self.velocity = self.best_grad.copy()
            self.step *= STEP_SHRINK
        self.params = self.best_params - self.step * self.velocity
        return self.params


def _affine_from_params(p, center, t_scale):
    """12 parameters -> (A, t). The map is x -> (I+B)(x-c) + c + L*d.

    B is dimensionless and d is expressed in units of the half-extent L, so
    all twelve parameters see gradients of comparable magnitude.
    """
    B = p[:9].reshape(3, 3)
    d = p[9:] * t_scale
    A = np.eye(3) + B
    return A, A @ (-center) + center + d


def _affine_stage(moving, target, config, meta, trace):
    """Gradient descent on the affine parameters over the level pyramid."""
    center = np.asarray(meta.origin) + np.asarray(meta.spacing) * (
        np.asarray(meta.dims, dtype=np.float64) - 1.0) / 2.0
    t_scale = float(np.mean(np.asarray(meta.spacing)
                            * (np.asarray(meta.dims) - 1.0) / 2.0))
    params = np.zeros(12)
    for factor, iters in zip(config.levels, config.affine_iters):
        lmeta = _coarse_meta(meta, factor)
        t_fa = resample_to(target.fa, lmeta)
        t_tens = resample_to(target.tensors, lmeta)
        pts = lmeta.grid_points()
        rel = pts - center
        kernel = min(config.affine_kernel, min(lmeta.dims) | 1)
        opt = _HalvingDescent(params, config.initial_move)
        for _ in range(iters):
            A, t = _affine_from_params(params, center, t_scale)
            if np.linalg.det(A) <= 0:
                params = opt.best_params.copy()
                opt.step *= STEP_SHRINK
                A, t = _affine_from_params(params, center, t_scale)
            disp = pts @ A.T + t - pts
            field = DeformationField(lmeta, disp)
            R = polar_rotation(A)
            rots = _ConstRots(np.broadcast_to(R, lmeta.dims + (3, 3)))
            l_fa, g_fa = ncc_loss_disp_grad(t_fa, moving.fa, field, kernel)
            l_dti, g_dti = tensor_loss_disp_grad(t_tens, moving.tensors,
                                                 field, rots)
            loss = config.lambda_affine * l_fa + l_dti
            G = config.lambda_affine * g_fa + g_dti
            grad = np.empty(12)
            grad[:9] = np.einsum("xyzi,xyzj->ij", G, rel).ravel()
            grad[9:] = t_scale * G.sum(axis=(0, 1, 2))
            trace.append(float(loss))
            params = opt.update(loss, grad)
        params = opt.best_params.copy()
    A, t = _affine_from_params(params, center, t_scale)
    return AffineTransform(A, t)


@dataclass
class _ConstRots:
    R: np.ndarray
    n_degenerate: int = 0


class _ScaledPair:
    """View of a registration input with rescaled tensor channels."""

    def __init__(self, pair, scale):
        from ..volgrid import TensorVolume

        self.fa = pair.fa
        self.tensors = TensorVolume(pair.tensors.meta,
                                    pair.tensors.data * scale)
        self.masks = getattr(pair, "masks", None)
        self.meta = pair.fa.meta


def _deform_stage(moving, target, affine, config, meta, trace, masks):
    """Multi-resolution descent on the residual displacement field."""
    A = affine.A
    u = None
    u_meta = None
    mv_onehot = None
    labels = None
    if masks is not None and config.use_masks:
        labels = sorted(set(moving.masks.labels()) | set(masks.labels()))
        if labels:
            mv_onehot = one_hot(moving.masks.data, labels)
    for factor, iters in zip(config.levels, config.deform_iters):
        lmeta = _coarse_meta(meta, factor)
        t_fa = resample_to(target.fa, lmeta)
        t_tens = resample_to(target.tensors, lmeta)
        t_onehot = None
        if labels:
            t_onehot = one_hot(resample_to(masks, lmeta).data, labels)
        if u is None:
            u = np.zeros(lmeta.dims + (3,))
        else:
            u = _upsample_disp(u, u_meta, lmeta)
        u_meta = lmeta
        kernel = min(config.deform_kernel, min(lmeta.dims) | 1)
        opt = _HalvingDescent(u.ravel(), config.initial_move)
        rots = None
        for it in range(iters):
            u = opt.params.reshape(lmeta.dims + (3,))
            ufield = DeformationField(lmeta, u)
            composed = compose(affine, ufield)
            if rots is None or it % config.rots_every == 0:
                rots = rotation_field(composed)
            l_fa, g_fa = ncc_loss_disp_grad(t_fa, moving.fa, composed, kernel)
            l_dti, g_dti = tensor_loss_disp_grad(t_tens, moving.tensors,
                                                 composed, rots)
            l_def, g_def = smoothness_loss_grad(ufield)
            loss = (config.lambda_deform * l_fa + l_dti
                    + config.gamma * l_def)
            G = config.lambda_deform * g_fa + g_dti
            if t_onehot is not None:
                warped, dwdc = warp_channels_with_grad(
                    mv_onehot, moving.meta, composed)
                l_tr, dL_dw = soft_dice_loss_grad(warped, t_onehot)
                G = G + chain_to_disp(dL_dw, dwdc, moving.meta)
                loss += l_tr
            # composed displacement depends on u through the linear part
            grad = np.einsum("ji,...j->...i", A, G) + config.gamma * g_def
            trace.append(float(loss))
            opt.update(loss, grad.ravel())
        u = opt.best_params.reshape(lmeta.dims + (3,))
    return DeformationField(meta, u)


def register_instance(moving, target, masks=None, config=None):
    """Affine then deformable registration by direct gradient descent.

    moving, target: Phantom-like objects with fa, tensors, masks, meta
    attributes. Returns a RegistrationResult whose composed field applies to
    the original moving volumes in a single interpolation.
    """
    config = config or InstanceConfig()
    meta = target.meta
    trace = []
    moving_s = _ScaledPair(moving, TENSOR_SCALE)
    target_s = _ScaledPair(target, TENSOR_SCALE)
    affine = _affine_stage(moving_s, target_s, config, meta, trace)
    if config.stages == "affine":
        deform = DeformationField.zero(meta)
    else:
        deform = _deform_stage(moving_s, target_s, affine, config, meta,
                               trace, masks)
    composed = compose(affine, deform)
    warped_fa = warp_scalar(moving.fa, composed)
    warped_labels = None
    if getattr(moving, "masks", None) is not None and masks is not None:
        warped_labels = warp_labels(moving.masks, composed)
    report = evaluation_report(
        deform, warped_fa=warped_fa, target_fa=target.fa,
        warped_labels=warped_labels, target_labels=masks,
    )
    return RegistrationResult(affine, deform, composed, report, trace)
