"""Exception types raised across the package."""


class SonetError(Exception):
    """Base class for all package errors."""


class DegenerateCloudError(SonetError, ValueError):
    """The point cloud has zero spatial spread."""


class EmptySourceError(SonetError, ValueError):
    """Nothing to sample from (all-zero image, empty cloud, empty library)."""


class ZeroAreaError(SonetError, ValueError):
    """A mesh has no triangle with positive area."""


class UnknownShapeError(SonetError, ValueError):
    pass


class ShapeMismatchError(SonetError, ValueError):
    """Array shapes or dimensions disagree."""


class FormatError(SonetError, ValueError):
    """Malformed file contents."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class ConfigError(SonetError, ValueError):
    """Invalid run configuration."""
