"""Exception types shared across the engine."""


class VisaffError(Exception):
    """Base class for all engine-specific errors."""


class FormatError(VisaffError):
    """A binary or CSV artifact violates its documented layout."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class PaddingError(FormatError):
    """The densenet feature row must end in its fixed run of zeros."""


class MissingDataError(VisaffError):
    """A referenced image id has no annotation, feature or label record."""


class ConfigError(VisaffError):
    """Inconsistent or incomplete run configuration."""


class StateError(VisaffError):
    """A backward pass was requested without a matching forward cache."""


class NumericError(VisaffError):
    """Non-finite values appeared where finite math is required."""


class UndefinedMetricError(VisaffError):
    """The requested metric is mathematically undefined for these inputs."""
