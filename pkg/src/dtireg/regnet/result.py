"""Result container shared by both registration backends."""

from dataclasses import dataclass, field

from ..objectives import ObjectiveReport
from ..xform import AffineTransform, DeformationField


@dataclass
class RegistrationResult:
    """Output of a full affine + deformable registration.

    ``composed`` is the single field equal to the affine composed with the
    deformable refinement; warping the original moving image through it uses
    exactly one interpolation.
    """

    affine: AffineTransform
    deform: DeformationField
    composed: DeformationField
    report: ObjectiveReport
    inference_trace: list = field(default_factory=list)
