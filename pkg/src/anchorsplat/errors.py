"""Exception types shared across the package."""


class AnchorSplatError(Exception):
    """Base class for all package-specific errors."""


class InvalidInput(AnchorSplatError):
    """Caller passed data that violates a precondition."""


class NoGeometryAtPixel(AnchorSplatError):
    """Click unprojection hit a pixel with zero rendered depth."""


class LanguageFeaturesMissing(AnchorSplatError):
    """Text query issued against a scene with no attached language features."""


class WholeSceneRemoval(AnchorSplatError):
    """Removal request covers every anchor in the scene."""


class SpecViolation(AnchorSplatError):
    """Synthetic scene specification is inconsistent (overlaps, zero instances, ...)."""


class OptimizationDiverged(AnchorSplatError):
    """A loss turned non-finite during training."""
