"""Anchor-structured Gaussian splatting for instance-level scene understanding."""

from .errors import (
    AnchorSplatError,
    InvalidInput,
    LanguageFeaturesMissing,
    NoGeometryAtPixel,
    OptimizationDiverged,
    SpecViolation,
    WholeSceneRemoval,
)
from .scene import (
    Anchor,
    ChildGaussian,
    Hyperparams,
    MultiResGrid,
    Scene,
    covariance_from,
    densify,
    gaussian_params,
    voxelize_points,
)

__version__ = "0.1.0"
