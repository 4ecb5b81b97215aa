"""octproj: en-face projection maps from OCT B-scans via a differentiable
projection module, validated on synthetic retina phantoms."""

__version__ = "0.1.0"

from . import autodiff, dpm, objective, optim, phantom, predictors, tensorio  # noqa: F401
from .errors import OctprojError  # noqa: F401
