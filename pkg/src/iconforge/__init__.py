"""iconforge: deformable 3D image registration with inverse-consistency
training, usable as a library, a CLI, or an HTTP service."""

__version__ = "0.1.0"

from .loss import LossBreakdown, LossConfig
from .network import RegistrationModel, UNetConfig
from .transform import TransformMap
from .volume import LabelVolume, Volume

__all__ = [
    "LabelVolume",
    "LossBreakdown",
    "LossConfig",
    "RegistrationModel",
    "TransformMap",
    "UNetConfig",
    "Volume",
    "__version__",
]
