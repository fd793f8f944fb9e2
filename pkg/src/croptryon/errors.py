"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`TryOnError`,
so callers (and the command line front end) can separate contract violations
from programming bugs.
"""


class TryOnError(Exception):
    """Base class for all contract errors."""


class LayoutError(TryOnError):
    """Dataset directory is missing a required path."""


class DatasetIndexError(TryOnError):
    """A pairs file references an id with no files on disk."""


class ModeViolationError(TryOnError):
    """A pairs file contradicts its declared paired/unpaired mode."""


class ConsistencyError(TryOnError):
    """Modalities of one record disagree (size, value range, keypoints)."""


class PaletteError(TryOnError):
    """Label map and palette do not agree."""


class ConfigError(TryOnError):
    """Invalid configuration value or unknown key."""


class GeometryError(TryOnError):
    """A crop window does not fit the raster it is applied to."""


class SingularityError(TryOnError):
    """The thin-plate-spline system cannot be solved."""


class ShapeError(TryOnError):
    """Tensor channel count or spatial size does not match the network."""


class ContractError(TryOnError):
    """Outputs handed to a loss do not belong to the requested stage."""


class DependencyError(TryOnError):
    """A required checkpoint is missing or incompatible."""


class NonFiniteLossError(TryOnError):
    """Training produced NaN/Inf; carries the offending batch description."""

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}


class InsufficientDataError(TryOnError):
    """Fewer than two feature vectors were accumulated."""


class ComparabilityError(TryOnError):
    """Statistics from different feature extractors were compared."""


class DataError(TryOnError):
    """An image directory needed for evaluation is empty."""


class OutputExistsError(TryOnError):
    """Refusing to write into a non-empty output directory."""


class SampleIOError(TryOnError, OSError):
    """A file exists but could not be decoded."""
