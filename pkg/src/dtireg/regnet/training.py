"""Training loops for the learned backend and its inference entry point."""

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import TrainingError, ValidationError
from ..objectives import evaluation_report, one_hot
from ..xform import compose, rotation_field, warp_labels, warp_scalar
from .model import (
    AffineRegModel,
    DeformRegModel,
    EncoderParams,
    FeaturePyramid,
    affine_head,
    decoder_forward,
    deform_decoder,
    encode_deform,
    level_meta,
    recurrent_affine,
    _pack7,
    _warp_phantom_affine,
)
from .result import RegistrationResult
from . import torchops as ops


@dataclass
class TrainConfig:
    lambda_affine: float = 10.0
    lambda_deform: float = 100.0
    gamma: float = 100.0
    lr: float = 1e-4
    affine_steps: int = 100
    deform_steps: int = 100
    seed: int = 0
    log_every: int = 0


@dataclass
class TrainedModels:
    affine: AffineRegModel
    deform: DeformRegModel
    affine_losses: list
    deform_losses: list

    def encoder_params(self):
        cfg = self.affine.config
        return (
            EncoderParams.from_module(self.affine, cfg.slope),
            EncoderParams.from_module(self.deform, cfg.slope),
        )


def _check_finite(loss, step):
    if not torch.isfinite(loss):
        raise TrainingError("loss diverged to a non-finite value", step=step)


def affine_forward_loss(model, moving, target, config):
    """Differentiable composite affine loss for one pair."""
    dtype = model.config.dtype
    meta = target.fa.meta
    x_m = _pack7(moving.fa, moving.tensors, dtype)
    x_t = _pack7(target.fa, target.tensors, dtype)
    pm = FeaturePyramid(model.enc_moving(x_m), "moving")
    pt = FeaturePyramid(model.enc_target(x_t), "target")
    lmeta = level_meta(meta, len(pm.levels) - 1)
    A, t = affine_head(pm, pt, lmeta)

    disp_vox = ops.affine_disp_vox(A, t, meta, dtype=dtype)
    fa_m = x_m[:, :1]
    t6_m = x_m[:, 1:]
    warped_fa = ops.warp_vox(fa_m, disp_vox)
    warped_t6 = ops.warp_vox(t6_m, disp_vox)
    R = ops.polar_rotation_t(A)
    Rfield = R.expand(meta.dims + (3, 3))
    moved_t6 = ops.reorient_t(warped_t6, Rfield)
    l_fa = ops.local_ncc_t(x_t[:, :1], warped_fa, 9)
    l_dti = ops.tensor_loss_t(x_t[:, 1:], moved_t6)
    return config.lambda_affine * l_fa + l_dti


def train_affine(pairs, config=None, model=None):
    """Minimize the composite affine loss with Adam, batch size 1."""
    config = config or TrainConfig()
    if not pairs:
        raise ValidationError("need at least one training pair")
    model = model or AffineRegModel()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    losses = []
    for step in range(config.affine_steps):
        moving, target = pairs[step % len(pairs)][:2]
        opt.zero_grad()
        loss = affine_forward_loss(model, moving, target, config)
        _check_finite(loss, step)
        loss.backward()
        opt.step()
        losses.append(float(loss))
    return model, losses


def deform_forward_loss(model, moving, target, config, masks=None,
                        moving_masks=None):
    """Differentiable composite deformable loss for one pair.

    Gradients flow through warping, the reorientation layer (polar factor of
    the field Jacobian), and the correlation decoder.
    """
    dtype = model.config.dtype
    meta = target.fa.meta
    m_fa = ops.to_torch(moving.fa.data, dtype)
    t_fa = ops.to_torch(target.fa.data, dtype)
    m_t6 = ops.to_torch(moving.tensors.data * 1e3, dtype)
    t_t6 = ops.to_torch(target.tensors.data * 1e3, dtype)
    pyr = (
        FeaturePyramid(model.enc_fa(m_fa), "moving"),
        FeaturePyramid(model.enc_tensor(m_t6), "moving"),
        FeaturePyramid(model.enc_fa(t_fa), "target"),
        FeaturePyramid(model.enc_tensor(t_t6), "target"),
    )
    field_half = decoder_forward(pyr, model)
    disp_vox = 2.0 * torch.nn.functional.interpolate(
        field_half, size=meta.dims, mode="trilinear", align_corners=True)
    spacing = torch.tensor(meta.spacing, dtype=dtype)
    disp_mm = disp_vox * spacing.view(1, 3, 1, 1, 1)

    warped_fa = ops.warp_vox(m_fa, disp_vox)
    warped_t6 = ops.warp_vox(m_t6, disp_vox)
    J = ops.jacobian_t(disp_mm, meta.spacing)
    R = ops.polar_rotation_t(J)
    moved_t6 = ops.reorient_t(warped_t6, R)

    loss = (config.lambda_deform * ops.local_ncc_t(t_fa, warped_fa, 5)
            + ops.tensor_loss_t(t_t6, moved_t6)
            + config.gamma * ops.smoothness_t(disp_mm, meta.spacing))
    if masks is not None and moving_masks is not None:
        labels = sorted(set(moving_masks.labels()) | set(masks.labels()))
        if labels:
            mv = ops.to_torch(one_hot(moving_masks.data, labels), dtype)
            tg = ops.to_torch(one_hot(masks.data, labels), dtype)
            loss = loss + ops.soft_dice_t(ops.warp_vox(mv, disp_vox), tg)
    return loss


def train_deform(pairs, config=None, model=None):
    """Minimize the composite deformable loss with Adam, batch size 1.

    Pairs should already be affine-aligned (or synthesized deformation-only).
    """
    config = config or TrainConfig()
    if not pairs:
        raise ValidationError("need at least one training pair")
    model = model or DeformRegModel()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    losses = []
    for step in range(config.deform_steps):
        pair = pairs[step % len(pairs)]
        moving, target = pair[:2]
        masks = pair[2] if len(pair) > 2 else None
        moving_masks = getattr(moving, "masks", None) if masks is not None else None
        opt.zero_grad()
        loss = deform_forward_loss(model, moving, target, config,
                                   masks=masks, moving_masks=moving_masks)
        _check_finite(loss, step)
        loss.backward()
        opt.step()
        losses.append(float(loss))
    return model, losses


def train(pairs, config=None, affine_model=None, deform_model=None):
    """Train the affine stage, then the deformable stage, on the same pairs."""
    config = config or TrainConfig()
    torch.manual_seed(config.seed)
    affine_model, a_losses = train_affine(pairs, config, affine_model)
    deform_model, d_losses = train_deform(pairs, config, deform_model)
    return TrainedModels(affine_model, deform_model, a_losses, d_losses)


def register_learned(moving, target, models, masks=None, stages="both",
                     max_iters=None):
    """Run the learned pipeline on one pair; single-interpolation output."""
    meta = target.fa.meta
    affine, trace = recurrent_affine(moving, target, models.affine, max_iters)
    if stages == "affine":
        from ..xform import DeformationField
        deform = DeformationField.zero(meta)
    else:
        warped = _warp_phantom_affine(moving, affine, meta)
        pyr = encode_deform(warped.fa, warped.tensors, target.fa,
                            target.tensors, models.deform)
        deform = deform_decoder(pyr, models.deform, meta)
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
