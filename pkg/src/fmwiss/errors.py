"""Exception types shared across the package."""


class FmwissError(Exception):
    """Base class for every error raised by this package."""


class DuplicateClass(FmwissError):
    pass


class EmptyStep(FmwissError):
    pass


class StepOutOfRange(FmwissError):
    pass


class ZeroVector(FmwissError):
    pass


class EmptyClassSet(FmwissError):
    pass


class DimMismatch(FmwissError):
    pass


class ShapeMismatch(FmwissError):
    pass


class BadPercentage(FmwissError):
    pass


class UnknownClass(FmwissError):
    pass


class EmptyForeground(FmwissError):
    pass


class BadTemperature(FmwissError):
    pass


class NoForeground(FmwissError):
    pass


class NotOldClass(FmwissError):
    pass


class EmptyBank(FmwissError):
    pass


class NonFinite(FmwissError):
    pass


class IdOutOfRange(FmwissError):
    pass


class FormatError(FmwissError):
    """Bad magic, version, or truncated payload in a binary artifact."""


class BackendFailure(FmwissError):
    """A foundation-model backend could not serve a request."""

    def __init__(self, message, endpoint=None):
        super().__init__(message)
        self.endpoint = endpoint


class ConfigError(FmwissError):
    """Invalid run configuration (wrong type, bad range, missing path)."""


class MissingPrerequisite(FmwissError):
    """A required artifact from an earlier pipeline stage is absent."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class MissingPseudoLabels(MissingPrerequisite):
    pass
