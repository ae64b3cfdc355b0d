"""Exception types raised by sdmreg."""


class SdmregError(Exception):
    """Base class for data and numerical errors."""
    pass


class GridMismatchError(SdmregError):
    """Raised when two arrays or volumes do not share the required grid."""
    pass


class NonFiniteError(SdmregError):
    """Raised when a point or displacement has NaN or infinite components."""
    pass


class EmptyMaskError(SdmregError):
    """Raised when a mask has no foreground mass."""
    pass


class DegenerateMaskError(SdmregError):
    """Raised when a mask lacks either foreground or background voxels."""
    pass


class NumericalError(SdmregError):
    """Raised when the objective becomes non-finite during optimization."""

    def __init__(self, message: str, stage: int = -1, iteration: int = -1):
        super().__init__(message)
        self.stage = stage
        self.iteration = iteration


class PhantomGenerationError(SdmregError):
    """Raised when a phantom cannot be generated without folding."""
    pass


class ManifestError(SdmregError):
    """Raised for malformed or inconsistent case manifests."""
    pass


class MetaImageError(SdmregError):
    """Base class for MetaImage header and payload problems."""
    pass


class MissingHeaderKeyError(MetaImageError):
    pass


class UnknownHeaderKeyError(MetaImageError):
    pass


class HeaderValueError(MetaImageError):
    pass


class UnsupportedElementTypeError(MetaImageError):
    pass


class PayloadSizeError(MetaImageError):
    pass
