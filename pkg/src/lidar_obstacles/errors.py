"""Exception hierarchy shared by every pipeline stage."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class FrameMismatch(PipelineError):
    pass


class NonFinitePoint(PipelineError, ValueError):
    pass


class MalformedHeader(PipelineError, ValueError):
    pass


class TruncatedBody(PipelineError, ValueError):
    pass


class UnsupportedDataMode(PipelineError, ValueError):
    pass


class BadMagic(PipelineError, ValueError):
    pass


class DimensionMismatch(PipelineError, ValueError):
    pass


class MaxvalUnsupported(PipelineError, ValueError):
    pass


class DegenerateInput(PipelineError, ValueError):
    pass


class NoFloorFound(PipelineError):
    pass


class EmptyCluster(PipelineError, ValueError):
    pass


class GeometryMismatch(PipelineError, ValueError):
    pass


class ConfigError(PipelineError, ValueError):
    pass


class InvalidSpec(PipelineError, ValueError):
    pass


class UnwritablePath(PipelineError, OSError):
    pass
