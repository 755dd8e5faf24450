"""Learned registration engine.

Affine stage: two independently parameterized convolutional encoders over
the 7-channel FA + tensor concatenation; the 12 affine parameters come from
a least-squares fit between per-channel feature mass centers at the deepest
level. Inference is recurrent: each step re-estimates a residual affine from
the accumulated warp of the original moving image.

Deformable stage: Siamese FA and tensor encoders at 4 scales feed a
coarse-to-fine decoder that warps feature embeddings by the running field,
builds multi-window local correlation volumes, and emits per-voxel residual
displacements through a shared pointwise MLP.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import RankDeficiencyError, ValidationError
from ..volgrid import GridMeta
from ..xform import AffineTransform, DeformationField, polar_rotation
from . import torchops as ops

MASS_EPS = 1e-8
RANK_TOL = 1e-10


@dataclass
class ModelConfig:
    affine_widths: tuple = (8, 16, 32, 32)
    fa_widths: tuple = (4, 8, 16, 16)
    tensor_widths: tuple = (4, 8, 16, 16)
    slope: float = 0.1
    windows: tuple = (3, 5, 7)
    mlp_hidden: tuple = (64, 32)
    max_iters: int = 5
    seed: int = 0
    dtype: torch.dtype = torch.float32


@dataclass
class FeaturePyramid:
    """Per-scale feature grids; level j is downsampled by 2^(j+1)."""

    levels: list
    tag: str  # moving | target

    def __post_init__(self):
        prev = None
        for lv in self.levels:
            if not torch.isfinite(lv).all():
                raise ValidationError("non-finite feature values")
            if prev is not None:
                for a, b in zip(prev.shape[2:], lv.shape[2:]):
                    if b != (a + 1) // 2:
                        raise ValidationError("pyramid dims must halve per level")
            prev = lv


@dataclass
class EncoderParams:
    """Flat view of an encoder's convolution weights for inspection/IO."""

    weights: dict
    slope: float

    @classmethod
    def from_module(cls, module, slope):
        return cls({k: v.detach().clone() for k, v in module.state_dict().items()},
                   slope)


def level_meta(meta, level):
    """GridMeta of pyramid level ``level`` (downsampling factor 2^(level+1)).

    Pooled cell i covers fine voxels [i*f, i*f + f); its center sits at the
    mean of the covered voxel centers for full cells.
    """
    f = 2 ** (level + 1)
    dims = tuple((n + f - 1) // f for n in meta.dims)
    spacing = tuple(s * f for s in meta.spacing)
    origin = tuple(o + s * (f - 1) / 2.0 for o, s in zip(meta.origin, meta.spacing))
    return GridMeta(dims, spacing, origin)


class _ConvStage(nn.Module):
    def __init__(self, c_in, c_out, slope, n_convs, pool):
        super().__init__()
        layers = []
        for i in range(n_convs):
            layers.append(nn.Conv3d(c_in if i == 0 else c_out, c_out, 3, padding=1))
            layers.append(nn.LeakyReLU(slope))
        self.convs = nn.Sequential(*layers)
        self.pool = pool

    def forward(self, x):
        x = self.convs(x)
        if self.pool == "max":
            return F.max_pool3d(x, 2, ceil_mode=True)
        return F.avg_pool3d(x, 2, ceil_mode=True)


class _Encoder(nn.Module):
    """Stack of conv stages; returns the post-pool feature list."""

    def __init__(self, c_in, widths, slope, n_convs, pool):
        super().__init__()
        stages = []
        prev = c_in
        for w in widths:
            stages.append(_ConvStage(prev, w, slope, n_convs, pool))
            prev = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out


class AffineRegModel(nn.Module):
    """Dual single-conv-per-stage encoders with max pooling.

    Both encoders start from identical weights so that an aligned pair maps
    to identical pyramids before any training.
    """

    def __init__(self, config=None):
        super().__init__()
        self.config = config or ModelConfig()
        torch.manual_seed(self.config.seed)
        self.enc_moving = _Encoder(7, self.config.affine_widths,
                                   self.config.slope, 1, "max")
        self.enc_target = _Encoder(7, self.config.affine_widths,
                                   self.config.slope, 1, "max")
        self.enc_target.load_state_dict(self.enc_moving.state_dict())
        self.to(self.config.dtype)


class DeformRegModel(nn.Module):
    """Siamese FA/tensor encoders (2 convs + average pooling per scale) and
    the shared correlation-MLP decoder head."""

    def __init__(self, config=None):
        super().__init__()
        self.config = config or ModelConfig()
        torch.manual_seed(self.config.seed + 1)
        cfg = self.config
        self.enc_fa = _Encoder(1, cfg.fa_widths, cfg.slope, 2, "avg")
        self.enc_tensor = _Encoder(6, cfg.tensor_widths, cfg.slope, 2, "avg")
        n_corr = sum(w ** 3 for w in cfg.windows)
        layers = []
        prev = n_corr
        for h in cfg.mlp_hidden:
            layers.append(nn.Conv3d(prev, h, 1))
            layers.append(nn.LeakyReLU(cfg.slope))
            prev = h
        out = nn.Conv3d(prev, 3, 1)
        nn.init.zeros_(out.weight)
        nn.init.zeros_(out.bias)
        layers.append(out)
        self.mlp = nn.Sequential(*layers)
        self.to(cfg.dtype)


def _pack7(fa, tensors, dtype):
    fa_t = ops.to_torch(fa.data, dtype)
    # tensor channels carry diffusivities ~1e-3; rescale to unit order so
    # both modalities drive the shared convolutions
    tens_t = ops.to_torch(tensors.data * 1e3, dtype)
    return torch.cat([fa_t, tens_t], dim=1)


def encode_affine(moving, target, model):
    """Encode both inputs with the dual affine encoders.

    moving, target: objects with .fa (ScalarVolume) and .tensors
    (TensorVolume) on a shared grid. Returns (pyramid_moving, pyramid_target).
    """
    if moving.fa.meta != target.fa.meta:
        raise ValidationError("moving and target must share a grid")
    dtype = model.config.dtype
    with torch.no_grad():
        pm = model.enc_moving(_pack7(moving.fa, moving.tensors, dtype))
        pt = model.enc_target(_pack7(target.fa, target.tensors, dtype))
    return FeaturePyramid(pm, "moving"), FeaturePyramid(pt, "target")


def _mass_centers(feat, lmeta):
    """Rectified-intensity mass centers per channel: (C, 3) physical, (C,) mass."""
    w = torch.clamp(feat[0], min=0.0)
    grid = ops.base_grid(feat.shape[2:], feat.dtype)[0].to(feat.device)
    spacing = torch.tensor(lmeta.spacing, dtype=feat.dtype, device=feat.device)
    origin = torch.tensor(lmeta.origin, dtype=feat.dtype, device=feat.device)
    phys = origin + grid * spacing
    mass = w.sum(dim=(1, 2, 3))
    centers = (w.unsqueeze(-1) * phys).sum(dim=(1, 2, 3)) / \
        torch.clamp(mass, min=MASS_EPS).unsqueeze(-1)
    return centers, mass


def affine_head(pyr_moving, pyr_target, lmeta):
    """Least-squares affine from deepest-level feature mass centers.

    Fits the pull-back map sending target-side centers to moving-side
    centers, so the result warps the moving image onto the target. Channels
    whose rectified mass vanishes on either side are dropped; a coplanar
    center set raises RankDeficiencyError.
    """
    fm = pyr_moving.levels[-1]
    ft = pyr_target.levels[-1]
    if fm.shape[1] != ft.shape[1]:
        raise ValidationError("deepest levels must have equal channel counts")
    cm, mass_m = _mass_centers(fm, lmeta)
    ct, mass_t = _mass_centers(ft, lmeta)
    mass_floor = MASS_EPS * max(float(mass_m.detach().max()),
                                float(mass_t.detach().max()), 1.0)
    keep = (mass_m > mass_floor) & (mass_t > mass_floor)
    if int(keep.sum()) < 4:
        raise RankDeficiencyError("fewer than 4 usable feature channels")
    cm = cm[keep]
    ct = ct[keep]

    centered = ct - ct.mean(dim=0)
    cov = centered.T @ centered
    evals = torch.linalg.eigvalsh(cov)
    if float(evals[0]) <= RANK_TOL * max(float(evals[-1]), 1.0):
        raise RankDeficiencyError("mass centers are degenerate (coplanar)")

    ones = torch.ones(ct.shape[0], 1, dtype=ct.dtype, device=ct.device)
    M = torch.cat([ct, ones], dim=1)
    X = torch.linalg.solve(M.T @ M, M.T @ cm)
    A = X[:3].T
    t = X[3]
    if torch.linalg.det(A) <= 0:
        # orientation-flipping fit: project back to det > 0 by negating the
        # weakest singular direction (rare; handled outside the graph)
        with torch.no_grad():
            W, S, Vh = torch.linalg.svd(A)
            W = W.clone()
            W[:, 2] = -W[:, 2]
            A = W @ torch.diag(S) @ Vh
    return A, t


def head_transform(moving, target, model):
    """One encode + head application, as an AffineTransform."""
    pm, pt = encode_affine(moving, target, model)
    lmeta = level_meta(moving.fa.meta, len(pm.levels) - 1)
    A, t = affine_head(pm, pt, lmeta)
    return AffineTransform(A.detach().cpu().double().numpy(),
                           t.detach().cpu().double().numpy())


def recurrent_affine(moving, target, model, max_iters=None):
    """Iterated affine estimation with minimum-MSE selection.

    Each step encodes the original moving volumes warped by the accumulated
    affine (never re-warping warped data), estimates a residual transform,
    and records the FA + tensor MSE of the updated warp against the target.
    Returns (AffineTransform, trace); the transform is the accumulated
    composition at the step with the smallest MSE sum. Stops early when the
    MSE increases on two consecutive steps.
    """
    if max_iters is None:
        max_iters = model.config.max_iters
    if max_iters < 1:
        raise ValidationError("max_iters must be >= 1")
    meta = target.fa.meta
    acc = AffineTransform.identity()
    states = []
    trace = []
    n_up = 0
    warped = moving
    for _ in range(max_iters):
        step = head_transform(warped, target, model)
        acc = AffineTransform(acc.A @ step.A, acc.A @ step.t + acc.t)
        warped = _warp_phantom_affine(moving, acc, meta)
        mse_fa = float(np.mean((warped.fa.data - target.fa.data) ** 2))
        mse_dti = float(np.mean(
            ((warped.tensors.data - target.tensors.data) * 1e3) ** 2))
        mse = mse_fa + mse_dti
        trace.append(mse)
        states.append((mse, acc))
        if len(trace) >= 2 and trace[-1] > trace[-2]:
            n_up += 1
            if n_up >= 2:
                break
        else:
            n_up = 0
    best = min(states, key=lambda s: s[0])
    return best[1], trace


class _AffinePair:
    def __init__(self, fa, tensors):
        self.fa = fa
        self.tensors = tensors


def _warp_phantom_affine(moving, affine, meta):
    from ..xform import RotationField, affine_to_field, warp_scalar, warp_tensor

    field = affine_to_field(affine, meta)
    R = polar_rotation(affine.A)
    rots = RotationField(meta, np.broadcast_to(R, meta.dims + (3, 3)))
    return _AffinePair(
        warp_scalar(moving.fa, field),
        warp_tensor(moving.tensors, field, rots=rots),
    )


# ---------------------------------------------------------------------------
# deformable stage
# ---------------------------------------------------------------------------

def encode_deform(moving_fa, moving_tensor, target_fa, target_tensor, model):
    """Siamese encoding; returns 4 pyramids (m_fa, m_tensor, t_fa, t_tensor)."""
    if moving_fa.meta != target_fa.meta:
        raise ValidationError("moving and target must share a grid")
    dtype = model.config.dtype
    with torch.no_grad():
        m_fa = model.enc_fa(ops.to_torch(moving_fa.data, dtype))
        t_fa = model.enc_fa(ops.to_torch(target_fa.data, dtype))
        m_tn = model.enc_tensor(ops.to_torch(moving_tensor.data * 1e3, dtype))
        t_tn = model.enc_tensor(ops.to_torch(target_tensor.data * 1e3, dtype))
    return (FeaturePyramid(m_fa, "moving"), FeaturePyramid(m_tn, "moving"),
            FeaturePyramid(t_fa, "target"), FeaturePyramid(t_tn, "target"))


def correlation_volume(a, b, window):
    """Local correlation of unit-normalized features over a window.

    a, b: (1,C,nx,ny,nz). Output channel per offset d in the window:
    mean_c a(x) * b(x + d), zero padded.
    """
    r = window // 2
    dims = a.shape[2:]
    pad = F.pad(b, (r, r, r, r, r, r))
    outs = []
    for dx in range(window):
        for dy in range(window):
            for dz in range(window):
                shifted = pad[:, :, dx:dx + dims[0], dy:dy + dims[1],
                              dz:dz + dims[2]]
                outs.append((a * shifted).mean(dim=1))
    return torch.stack(outs, dim=1)


def _unit_features(f):
    norm = torch.linalg.vector_norm(f, dim=1, keepdim=True)
    return f / torch.clamp(norm, min=1e-8)


def decoder_forward(pyramids, model):
    """Coarse-to-fine residual estimation; returns voxel-unit field at the
    finest pyramid scale (torch, differentiable)."""
    m_fa, m_tn, t_fa, t_tn = pyramids
    feats_m = [torch.cat([a, b], dim=1)
               for a, b in zip(m_fa.levels, m_tn.levels)]
    feats_t = [torch.cat([a, b], dim=1)
               for a, b in zip(t_fa.levels, t_tn.levels)]
    field = None
    for j in reversed(range(len(feats_m))):
        fm = _unit_features(feats_m[j])
        ft = _unit_features(feats_t[j])
        if field is None:
            field = torch.zeros((1, 3) + fm.shape[2:], dtype=fm.dtype)
        else:
            field = 2.0 * F.interpolate(field, size=fm.shape[2:],
                                        mode="trilinear", align_corners=True)
        warped = ops.warp_vox(fm, field)
        corr = torch.cat([
            correlation_volume(warped, ft, w) for w in model.config.windows
        ], dim=1)
        field = field + model.mlp(corr)
    return field


def deform_decoder(pyramids, model, meta):
    """Decoder output as a DeformationField on the image grid (mm units)."""
    with torch.no_grad():
        field = decoder_forward(pyramids, model)
        field = 2.0 * F.interpolate(field, size=meta.dims, mode="trilinear",
                                    align_corners=True)
    disp_vox = np.moveaxis(field.double().numpy()[0], 0, -1)
    return DeformationField(meta, disp_vox * np.asarray(meta.spacing))
