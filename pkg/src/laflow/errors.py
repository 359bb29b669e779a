"""Exception hierarchy.

Every error raised by the library derives from :class:`LaflowError`. The CLI
maps the three families below onto process exit codes:

* :class:`ConfigError` -> 2
* :class:`SolverError` -> 4
* everything else (bad data, geometry, statistics) -> 3
"""


class LaflowError(Exception):
    """Base class for all library errors."""

    exit_code = 3


class ConfigError(LaflowError):
    exit_code = 2


class IoError(LaflowError, OSError):
    """A required file is missing or unreadable."""


class FormatError(LaflowError):
    """A container on disk does not match its header."""


class UnsupportedOrientation(LaflowError):
    pass


class LabelError(LaflowError):
    """A requested mask label is absent or empty."""


class ParamError(LaflowError):
    pass


class GeometryError(LaflowError):
    pass


class AmbiguousDirection(GeometryError):
    pass


class TopologyError(GeometryError):
    pass


class ProbeError(LaflowError):
    pass


class WindowError(LaflowError):
    pass


class PeakError(LaflowError):
    pass


class RatioError(LaflowError):
    pass


class SolverError(LaflowError):
    exit_code = 4

    def __init__(self, message, stats=None):
        super().__init__(message)
        self.stats = stats or {}


class DesignError(LaflowError):
    """Statistical design matrix is singular or under-specified."""


class DegenerateError(LaflowError):
    """Input has no variance / no extent where one is required."""


class SpecError(LaflowError):
    """A synthetic-field description is invalid or under-resolved."""


class OpenSectionWarning(UserWarning):
    """A cross-section patch reached the raster or grid bound."""


class PipelineError(LaflowError):
    """Wraps a module error with the pipeline stage that raised it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 3)
