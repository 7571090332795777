"""Exception hierarchy shared by every subpackage."""


class LSLUError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(LSLUError, ValueError):
    pass


class DTypeMismatch(LSLUError, TypeError):
    pass


class DomainError(LSLUError, ValueError):
    """Raised for ln of non-positive values, division by zero, sqrt of negatives."""


class InvalidAxis(LSLUError, ValueError):
    pass


class NotScalar(LSLUError, ValueError):
    pass


class TapeConsumed(LSLUError, RuntimeError):
    pass


class DegenerateBatch(LSLUError, ValueError):
    pass


class InvalidRate(LSLUError, ValueError):
    pass


class LabelOutOfRange(LSLUError, ValueError):
    pass


class ChannelMismatch(LSLUError, ValueError):
    pass


class UnpopulatedStats(LSLUError, ValueError):
    pass


class GeometryUnsupported(LSLUError, ValueError):
    pass


class ModeError(LSLUError, RuntimeError):
    pass


class MissingGrad(LSLUError, ValueError):
    pass


class FileMissing(LSLUError, FileNotFoundError):
    pass


class CorruptRecord(LSLUError, ValueError):
    pass


class BadMagic(LSLUError, ValueError):
    pass


class DimensionMismatch(LSLUError, ValueError):
    pass


class VersionMismatch(LSLUError, ValueError):
    pass


class CorruptCheckpoint(LSLUError, ValueError):
    pass


class InvalidDepth(LSLUError, ValueError):
    pass


class InvalidConfig(LSLUError, ValueError):
    pass


class UnresolvedShape(LSLUError, ValueError):
    pass


class NoLSLULayers(LSLUError, ValueError):
    pass


class InsufficientHistory(LSLUError, ValueError):
    pass


class SingleClass(LSLUError, ValueError):
    pass


class InsufficientIters(LSLUError, ValueError):
    pass


class EmptyDataset(LSLUError, ValueError):
    pass
