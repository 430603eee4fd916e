"""Exception types shared across the package."""


class MoepackError(Exception):
    """Base class for all errors raised by moepack."""


class ShapeMismatch(MoepackError, ValueError):
    pass


class DimensionMismatch(MoepackError, ValueError):
    pass


class InvalidThreshold(MoepackError, ValueError):
    pass


class RatioOutOfRange(MoepackError, ValueError):
    pass


class DegenerateVariance(MoepackError, ValueError):
    pass


class DomainError(MoepackError, ValueError):
    pass


class InvalidBits(MoepackError, ValueError):
    pass


class ConfigMismatch(MoepackError, ValueError):
    pass


class ContainerError(MoepackError):
    """Base class for checkpoint container failures."""


class BadMagic(ContainerError):
    pass


class CorruptHeader(ContainerError):
    pass


class TruncatedPayload(ContainerError):
    pass


class DuplicateName(ContainerError):
    pass
