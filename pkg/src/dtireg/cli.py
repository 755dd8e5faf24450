"""Command-line entry point.

One subcommand per pipeline stage: fit-tensor, fa, register, warp,
reorient-check, metrics, skeleton, augment, train. Every run that produces
files also writes a JSON manifest listing each artifact with a content hash;
fixed seeds give byte-identical manifests across runs.

Exit codes: 0 success, 2 configuration error, 3 IO error, 4 numerical
failure.
"""

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import dtensor, nifti, objectives, tbss, xform
from .augment import AffineSampleSpec, make_pair, make_phantom, sample_affine, \
    smooth_random_field
from .errors import (
    DegenerateMatrixError,
    DegenerateSchemeError,
    DtiregError,
    FormatError,
    RankDeficiencyError,
    TrainingError,
    UndefinedMetricError,
    ValidationError,
)
from .volgrid import GridMeta, LabelVolume, ScalarVolume, TensorVolume

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

CONFIG_DEFAULTS = {
    "lambda_affine": 10.0,
    "lambda_deform": 100.0,
    "gamma": 100.0,
    "lr": 1e-4,
    "backend": "instance",
    "seed": 0,
    "max_iters": 5,
    "levels": (4, 2, 1),
    "affine_iters": (200, 100, 50),
    "deform_iters": (200, 100, 50),
    "affine_steps": 100,
    "deform_steps": 100,
    "n_pairs": 8,
    "phantom": "blob",
    "dims": 48,
    "stages": "both",
}

_NONNEG = ("lambda_affine", "lambda_deform", "gamma", "lr")


@dataclass
class PipelineConfig:
    """Validated configuration for the end-to-end registration pipeline."""

    moving_fa: str = ""
    moving_tensors: str = ""
    target_fa: str = ""
    target_tensors: str = ""
    moving_masks: str = ""
    target_masks: str = ""
    model: str = ""
    out_dir: str = "."
    backend: str = "instance"
    seed: int = 0
    threads: int = 0
    options: dict = dc_field(default_factory=dict)


def _parse_value(key, raw):
    default = CONFIG_DEFAULTS[key]
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.split(","))
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def validate_config(path):
    """Parse a flat key=value config file.

    Returns (options dict with defaults applied, error list); an empty file
    yields pure defaults. Errors accumulate rather than aborting on the
    first problem.
    """
    options = dict(CONFIG_DEFAULTS)
    errors = []
    if path:
        if not os.path.exists(path):
            return options, [f"config file not found: {path}"]
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    errors.append(f"line {lineno}: expected key=value")
                    continue
                key, raw = (s.strip() for s in line.split("=", 1))
                if key not in CONFIG_DEFAULTS:
                    errors.append(f"line {lineno}: unknown key {key!r}")
                    continue
                try:
                    options[key] = _parse_value(key, raw)
                except ValueError:
                    errors.append(f"line {lineno}: cannot parse value for {key!r}")
    for key in _NONNEG:
        v = options[key]
        if not np.isfinite(v) or v < 0:
            errors.append(f"{key} must be finite and >= 0, got {v}")
    if options["backend"] not in ("instance", "learned"):
        errors.append(f"backend must be instance or learned")
    return options, errors


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, artifacts, extra=None):
    """artifacts: list of (path, kind). Returns the manifest path."""
    entries = [
        {"path": os.path.relpath(p, out_dir), "kind": kind, "sha256": _sha256(p)}
        for p, kind in artifacts
    ]
    manifest = {"artifacts": entries}
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _load(path, expect=None):
    vol = nifti.read_volume(path)
    if expect is not None and not isinstance(vol, expect):
        raise ValidationError(
            f"{path}: expected {expect.__name__}, got {type(vol).__name__}"
        )
    return vol


def _read_btable(path):
    rows = np.loadtxt(path, ndmin=2)
    if rows.shape[1] != 4:
        raise FormatError("b-table rows must be: bval gx gy gz")
    return dtensor.DiffusionGradientScheme(rows[:, 0], rows[:, 1:])


@dataclass
class _Pair:
    fa: ScalarVolume
    tensors: TensorVolume
    masks: LabelVolume = None

    @property
    def meta(self):
        return self.fa.meta


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_fit_tensor(args):
    meta, signals = nifti.read_field_data(args.signals)
    scheme = _read_btable(args.btable)
    tensors, s0 = dtensor.fit_tensor_map(signals, scheme, meta)
    os.makedirs(args.out, exist_ok=True)
    t_path = os.path.join(args.out, "tensors.nii")
    s_path = os.path.join(args.out, "s0.nii")
    nifti.write_volume(tensors, t_path)
    nifti.write_volume(s0, s_path)
    write_manifest(args.out, [(t_path, "tensors"), (s_path, "scalar")])
    return EXIT_OK


def cmd_fa(args):
    tensors = _load(args.tensors, TensorVolume)
    os.makedirs(args.out, exist_ok=True)
    artifacts = []
    fa_path = os.path.join(args.out, "fa.nii")
    nifti.write_volume(dtensor.fa_map(tensors), fa_path)
    artifacts.append((fa_path, "scalar"))
    if args.md:
        md_path = os.path.join(args.out, "md.nii")
        nifti.write_volume(dtensor.md_map(tensors), md_path)
        artifacts.append((md_path, "scalar"))
    write_manifest(args.out, artifacts)
    return EXIT_OK


def run_pipeline(config):
    """Full registration pipeline; returns (exit_code, manifest path or None).

    The warped outputs are produced by applying the composed field to the
    original moving volumes in a single interpolation pass.
    """
    from . import regnet

    moving = _Pair(
        _load(config.moving_fa, ScalarVolume),
        _load(config.moving_tensors, TensorVolume),
        _load(config.moving_masks, LabelVolume) if config.moving_masks else None,
    )
    target = _Pair(
        _load(config.target_fa, ScalarVolume),
        _load(config.target_tensors, TensorVolume),
        _load(config.target_masks, LabelVolume) if config.target_masks else None,
    )
    opt = config.options
    np.random.seed(config.seed)
    if config.backend == "learned":
        import torch

        torch.manual_seed(config.seed)
        if not config.model:
            raise ValidationError("learned backend requires --model")
        models = load_models(config.model)
        result = regnet.register_learned(
            moving, target, models, masks=target.masks,
            stages=opt["stages"], max_iters=opt["max_iters"],
        )
    else:
        icfg = regnet.InstanceConfig(
            lambda_affine=opt["lambda_affine"],
            lambda_deform=opt["lambda_deform"],
            gamma=opt["gamma"],
            levels=tuple(opt["levels"]),
            affine_iters=tuple(opt["affine_iters"]),
            deform_iters=tuple(opt["deform_iters"]),
            stages=opt["stages"],
        )
        result = regnet.register_instance(moving, target, masks=target.masks,
                                          config=icfg)

    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    artifacts = []

    def emit(name, kind, writer):
        path = os.path.join(out, name)
        writer(path)
        artifacts.append((path, kind))

    emit("affine.txt", "affine", lambda p: xform.save_affine(result.affine, p))
    emit("deform.nii", "field", lambda p: xform.write_field(result.deform, p))
    emit("composed.nii", "field", lambda p: xform.write_field(result.composed, p))
    rots = xform.rotation_field(result.composed)
    emit("warped_fa.nii", "scalar", lambda p: nifti.write_volume(
        xform.warp_scalar(moving.fa, result.composed), p))
    emit("warped_tensors.nii", "tensors", lambda p: nifti.write_volume(
        xform.warp_tensor(moving.tensors, result.composed, rots=rots), p))
    if moving.masks is not None:
        emit("warped_masks.nii", "labels", lambda p: nifti.write_volume(
            xform.warp_labels(moving.masks, result.composed), p))

    metrics = result.report.to_dict()
    metrics["inference_trace"] = result.inference_trace
    m_path = os.path.join(out, "metrics.json")
    with open(m_path, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    artifacts.append((m_path, "metrics"))
    manifest = write_manifest(out, artifacts, {"backend": config.backend,
                                               "seed": config.seed})
    return EXIT_OK, manifest


def cmd_register(args):
    options, errors = validate_config(args.config)
    if errors:
        for err in errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.backend:
        options["backend"] = args.backend
    config = PipelineConfig(
        moving_fa=args.moving_fa, moving_tensors=args.moving_tensors,
        target_fa=args.target_fa, target_tensors=args.target_tensors,
        moving_masks=args.moving_masks or "", target_masks=args.target_masks or "",
        model=args.model or "", out_dir=args.out,
        backend=options["backend"], seed=args.seed, options=options,
    )
    code, _ = run_pipeline(config)
    return code


def cmd_warp(args):
    vol = _load(args.volume)
    affine = xform.load_affine(args.affine) if args.affine else None
    deform = xform.read_field(args.field) if args.field else None
    if affine is None and deform is None:
        raise ValidationError("need --affine and/or --field")
    if affine is not None and deform is not None:
        total = xform.compose(affine, deform)
    elif affine is not None:
        total = xform.affine_to_field(affine, vol.meta)
    else:
        total = deform
    warped = xform.warp_volume(vol, total)
    nifti.write_volume(warped, args.out)
    return EXIT_OK


def cmd_reorient_check(args):
    tensors = _load(args.tensors, TensorVolume)
    theta = np.deg2rad(args.angle)
    axis = {"x": 0, "y": 1, "z": 2}[args.axis]
    c, s = np.cos(theta), np.sin(theta)
    R = np.eye(3)
    i, j = [k for k in range(3) if k != axis]
    R[i, i] = c
    R[j, j] = c
    R[i, j] = -s
    R[j, i] = s
    center = np.asarray(tensors.meta.origin) + np.asarray(tensors.meta.spacing) \
        * (np.asarray(tensors.meta.dims, dtype=np.float64) - 1) / 2
    affine = xform.AffineTransform(R, center - R @ center)
    field = xform.affine_to_field(affine, tensors.meta)
    rots = xform.rotation_field(field)
    warped = xform.warp_tensor(tensors, field, rots=rots)

    fa_before = dtensor.fa_map(tensors)
    fa_after = dtensor.fa_map(warped).data
    # rotation invariance of FA: the warped FA map should match the warped
    # scalar FA image; edge voxels mix materials under interpolation, so the
    # median and 90th percentile are the meaningful statistics
    fa_nominal = xform.warp_scalar(fa_before, field).data
    drift = np.abs(fa_after - fa_nominal)
    report = {
        "angle_deg": args.angle,
        "axis": args.axis,
        "fa_drift_median": float(np.median(drift)),
        "fa_drift_p90": float(np.percentile(drift, 90.0)),
        "fa_drift_max": float(drift.max()),
        "rotation_degenerate_voxels": rots.n_degenerate,
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_metrics(args):
    a = _load(args.a, ScalarVolume)
    b = _load(args.b, ScalarVolume)
    out = {
        "cc": objectives.image_cc(a, b),
        "tenengrad_a": objectives.tenengrad(a),
        "tenengrad_b": objectives.tenengrad(b),
    }
    if args.field:
        out["njd_pct"] = objectives.njd_percent(xform.read_field(args.field))
    if args.labels_a and args.labels_b:
        out["dice"] = objectives.dice_multiclass(
            _load(args.labels_a, LabelVolume), _load(args.labels_b, LabelVolume))
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_skeleton(args):
    group = [_load(p, ScalarVolume) for p in args.inputs]
    stack, skel = tbss.skeletonize_group(group, args.threshold, args.radius)
    os.makedirs(args.out, exist_ok=True)
    artifacts = []
    mean_path = os.path.join(args.out, "mean_fa.nii")
    nifti.write_volume(tbss.mean_fa(group), mean_path)
    artifacts.append((mean_path, "scalar"))
    mask_path = os.path.join(args.out, "skeleton.nii")
    nifti.write_volume(skel.mask, mask_path)
    artifacts.append((mask_path, "labels"))
    perp_path = os.path.join(args.out, "perp_dirs.nii")
    nifti.write_field_data(skel.meta, skel.perp_dirs, perp_path)
    artifacts.append((perp_path, "field"))
    for i in range(stack.shape[0]):
        p = os.path.join(args.out, f"projected_{i:03d}.nii")
        nifti.write_volume(ScalarVolume(skel.meta, stack[i]), p)
        artifacts.append((p, "scalar"))
    write_manifest(args.out, artifacts)
    return EXIT_OK


def cmd_augment(args):
    phantom = make_phantom(args.kind, (args.dims,) * 3, args.seed)
    rng = np.random.default_rng(args.seed)
    affine = sample_affine(AffineSampleSpec(), rng, phantom.meta)
    smooth = None
    if args.amplitude > 0:
        smooth = smooth_random_field(phantom.meta, args.amplitude,
                                     args.wavelength, seed=args.seed)
    moving, gt = make_pair(phantom, affine, smooth)
    os.makedirs(args.out, exist_ok=True)
    artifacts = []

    def emit(name, kind, writer):
        path = os.path.join(args.out, name)
        writer(path)
        artifacts.append((path, kind))

    emit("target_fa.nii", "scalar", lambda p: nifti.write_volume(phantom.fa, p))
    emit("target_tensors.nii", "tensors",
         lambda p: nifti.write_volume(phantom.tensors, p))
    emit("target_masks.nii", "labels",
         lambda p: nifti.write_volume(phantom.masks, p))
    emit("moving_fa.nii", "scalar", lambda p: nifti.write_volume(moving.fa, p))
    emit("moving_tensors.nii", "tensors",
         lambda p: nifti.write_volume(moving.tensors, p))
    emit("moving_masks.nii", "labels",
         lambda p: nifti.write_volume(moving.masks, p))
    emit("gt_affine.txt", "affine", lambda p: xform.save_affine(gt.affine, p))
    if smooth is not None:
        emit("gt_smooth.nii", "field", lambda p: xform.write_field(smooth, p))
    emit("landmarks.txt", "landmarks",
         lambda p: np.savetxt(p, phantom.landmarks, fmt="%.17g"))
    sidecar = {
        "seed": args.seed,
        "kind": args.kind,
        "affine_matrix": gt.affine.A.tolist(),
        "affine_translation": gt.affine.t.tolist(),
        "has_smooth_field": smooth is not None,
        "landmarks": phantom.landmarks.tolist(),
    }

    def write_sidecar(p):
        with open(p, "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")

    emit("ground_truth.json", "sidecar", write_sidecar)
    write_manifest(args.out, artifacts, {"seed": args.seed, "kind": args.kind})
    return EXIT_OK


def save_models(models, path):
    import torch

    torch.save({
        "affine": models.affine.state_dict(),
        "deform": models.deform.state_dict(),
        "affine_losses": models.affine_losses,
        "deform_losses": models.deform_losses,
    }, path)


def load_models(path):
    import torch

    from .regnet import AffineRegModel, DeformRegModel, TrainedModels

    blob = torch.load(path, weights_only=False)
    affine = AffineRegModel()
    affine.load_state_dict(blob["affine"])
    deform = DeformRegModel()
    deform.load_state_dict(blob["deform"])
    return TrainedModels(affine, deform, blob.get("affine_losses", []),
                         blob.get("deform_losses", []))


def cmd_train(args):
    import torch

    from . import regnet

    options, errors = validate_config(args.config)
    if errors:
        for err in errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    torch.manual_seed(args.seed)
    phantom = make_phantom(options["phantom"], (options["dims"],) * 3, args.seed)
    rng = np.random.default_rng(args.seed)
    spec = AffineSampleSpec()
    pairs = []
    for _ in range(options["n_pairs"]):
        affine = sample_affine(spec, rng, phantom.meta)
        moving, _ = make_pair(phantom, affine)
        pairs.append((moving, phantom, phantom.masks))
    cfg = regnet.TrainConfig(
        lambda_affine=options["lambda_affine"],
        lambda_deform=options["lambda_deform"],
        gamma=options["gamma"], lr=options["lr"],
        affine_steps=options["affine_steps"],
        deform_steps=options["deform_steps"], seed=args.seed,
    )
    models = regnet.train(pairs, cfg)
    save_models(models, args.out)
    print(json.dumps({
        "affine_loss_first": models.affine_losses[0],
        "affine_loss_last": models.affine_losses[-1],
        "deform_loss_first": models.deform_losses[0],
        "deform_loss_last": models.deform_losses[-1],
    }, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="dtireg",
        description="Diffusion tensor registration and skeleton analysis.",
    )
    parser.add_argument("--threads", type=int, default=0,
                        help="worker thread cap (0 = library default)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-tensor", help="WLLS tensor fit from DWI signals")
    p.add_argument("--signals", required=True)
    p.add_argument("--btable", required=True,
                   help="text file, one 'bval gx gy gz' row per measurement")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_tensor)

    p = sub.add_parser("fa", help="FA (and optional MD) maps from tensors")
    p.add_argument("--tensors", required=True)
    p.add_argument("--md", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fa)

    p = sub.add_parser("register", help="affine + deformable registration")
    p.add_argument("--moving-fa", required=True)
    p.add_argument("--moving-tensors", required=True)
    p.add_argument("--target-fa", required=True)
    p.add_argument("--target-tensors", required=True)
    p.add_argument("--moving-masks")
    p.add_argument("--target-masks")
    p.add_argument("--backend", choices=("instance", "learned"))
    p.add_argument("--model", help="trained model file (learned backend)")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("warp", help="apply a transform in one interpolation")
    p.add_argument("--volume", required=True)
    p.add_argument("--affine")
    p.add_argument("--field")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("reorient-check",
                       help="rotation sanity check for tensor reorientation")
    p.add_argument("--tensors", required=True)
    p.add_argument("--angle", type=float, default=30.0)
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.set_defaults(func=cmd_reorient_check)

    p = sub.add_parser("metrics", help="similarity and regularity metrics")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--field")
    p.add_argument("--labels-a")
    p.add_argument("--labels-b")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("skeleton", help="group mean FA skeleton + projection")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--radius", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_skeleton)

    p = sub.add_parser("augment", help="synthetic phantom pair with ground truth")
    p.add_argument("--kind",
                   choices=("blob", "crossing-tubes", "layered",
                            "blob-cluster", "textured"),
                   default="blob")
    p.add_argument("--dims", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--amplitude", type=float, default=0.0,
                   help="smooth deformation amplitude in mm (0 = affine only)")
    p.add_argument("--wavelength", type=float, default=24.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train the learned backend on phantoms")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model output file")
    p.set_defaults(func=cmd_train)

    return parser


def _set_threads(n):
    if n and n > 0:
        os.environ["OMP_NUM_THREADS"] = str(n)
        try:
            import numba

            numba.set_num_threads(n)
        except (ImportError, ValueError):
            pass
        try:
            import torch

            torch.set_num_threads(n)
        except ImportError:
            pass


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _set_threads(args.threads)
    try:
        return args.func(args)
    except (ValidationError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, FileNotFoundError, IsADirectoryError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DegenerateMatrixError, DegenerateSchemeError, RankDeficiencyError,
            TrainingError, UndefinedMetricError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DtiregError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
