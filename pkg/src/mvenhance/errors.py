"""Exception types shared across the package."""


class MvEnhanceError(Exception):
    """Base class for all package-specific errors."""


class InvalidPose(MvEnhanceError):
    """Camera pose fails its validity checks (orthonormality, intrinsics)."""


class DegenerateCameraPair(MvEnhanceError):
    """Two cameras share (almost) the same center; epipolar geometry is undefined."""


class EpipoleAtInfinityDegenerate(MvEnhanceError):
    """Epipolar line has a vanishing (a, b) part and cannot be normalized."""


class ShapeMismatch(MvEnhanceError):
    """Array arguments have incompatible shapes."""


class InvalidChannelCount(MvEnhanceError):
    """Channel count does not satisfy the operation's divisibility constraint."""


class InvalidConfig(MvEnhanceError):
    """Degradation configuration violates its invariants."""


class InvalidKernel(MvEnhanceError):
    """Blur kernel size is out of range or not odd."""


class InvalidNoiseLevel(MvEnhanceError):
    """Noise level is outside the schedule range."""


class InvalidSteps(MvEnhanceError):
    """Sampler step count is not a positive integer."""


class MissingForwardRecord(MvEnhanceError):
    """Straight-through backward was called without a usable forward record."""


class DataError(MvEnhanceError):
    """Base class for dataset / file-format errors (CLI exit code 2)."""


class MissingCameras(DataError):
    """Dataset directory has no cameras.json."""


class CountMismatch(DataError):
    """Number of images, masks, and camera entries disagree."""


class MalformedJson(DataError):
    """A JSON file could not be parsed or fails schema validation."""
