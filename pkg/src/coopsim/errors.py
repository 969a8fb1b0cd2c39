"""Exception types shared across the package."""


class CoopsimError(Exception):
    """Base class for all package-specific errors."""


class EmptyCloudError(CoopsimError):
    """An operation received a point cloud with zero points."""


class SizeMismatchError(CoopsimError):
    """Two point sets that must have equal cardinality do not."""


class InvalidViewpointError(CoopsimError):
    """A viewpoint lies inside the box it is supposed to observe."""


class DecodeError(CoopsimError):
    """A latent payload is malformed and cannot be reconstructed."""


class ProfileIncompleteError(CoopsimError):
    """A measurement dataset is missing required (rf, bucket) keys."""

    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"measurement dataset incomplete, missing keys: {self.missing}")


class CalibrationError(CoopsimError):
    """A calibration table is unusable (bad shapes or non-positive spreads)."""


class DatasetMissError(CoopsimError):
    """A lookup hit an (rf, bucket) key with no recorded samples."""


class FrameError(CoopsimError):
    """A trace frame is inconsistent (bad timestamps, unknown ids, ...)."""


class ConfigError(CoopsimError):
    """A run configuration file is invalid."""
