"""Motion-compensated ML-EM for gated emission tomography.

Submodules
----------
grid          pixel grids, images, vector fields, sampling and metrics
synthesis     Derenzo and random-ellipse phantoms, random velocity fields, Poisson data
diffeo        diffeomorphisms from stationary velocity fields and their image actions
projector     matched line-integral projector and its adjoint
recon         ML-EM and the motion-aware MMLEM over compound operators
registration  direct registration over stationary velocity fields
pipeline      the full gated reconstruction and its reference baselines
cli           command-line experiments
"""

__version__ = "0.1.0"

from .errors import (ConfigurationError, InvalidInputError, MagnitudeError, MotionEMError,
                     ShapeError, UndefinedMetricError)
from .grid import GridSpec, Image, VectorField, bilinear_sample, l2_distance, psnr
from .projector import ProjGeometry, Sinogram

__all__ = [
    "__version__",
    "ConfigurationError", "InvalidInputError", "MagnitudeError", "MotionEMError", "ShapeError",
    "UndefinedMetricError",
    "GridSpec", "Image", "VectorField", "bilinear_sample", "l2_distance", "psnr",
    "ProjGeometry", "Sinogram",
]
