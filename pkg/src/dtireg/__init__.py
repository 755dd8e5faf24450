"""Diffusion tensor volume registration toolkit."""

__version__ = "0.1.0"

from .volgrid import (  # noqa: F401
    GridMeta,
    LabelVolume,
    ScalarVolume,
    TensorVolume,
    resample_to,
)
from .nifti import read_volume, write_volume  # noqa: F401
from .xform import AffineTransform, DeformationField  # noqa: F401
