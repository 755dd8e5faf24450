"""Registration engines.

Two backends minimize the same composite objectives:

* ``learned`` — convolutional encoders with a mass-center least-squares
  affine head and a coarse-to-fine correlation decoder (torch).
* ``instance`` — direct per-pair gradient descent on the affine parameters
  and a multi-resolution displacement field (numpy, analytic gradients).
"""

from .result import RegistrationResult  # noqa: F401
from .instance import register_instance, InstanceConfig  # noqa: F401
from .model import (  # noqa: F401
    AffineRegModel,
    DeformRegModel,
    encode_affine,
    affine_head,
    recurrent_affine,
    encode_deform,
    deform_decoder,
)
from .training import (  # noqa: F401
    TrainConfig,
    TrainedModels,
    register_learned,
    train,
    train_affine,
    train_deform,
)
