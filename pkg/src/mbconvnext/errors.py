"""Exception types raised across the package."""


class MBError(Exception):
    """Base class for all package errors."""


# dataio
class BadMagic(MBError):
    pass


class UnsupportedDatatype(MBError):
    pass


class TruncatedPayload(MBError):
    pass


class DimensionMismatch(MBError):
    pass


class MissingManifest(MBError):
    pass


class CorruptEntry(MBError):
    pass


class ConfigMismatch(MBError):
    pass


# imaging / augment
class EmptySelection(MBError):
    pass


class EmptyClass(MBError):
    pass


class ClassTooSmall(MBError):
    pass


# tensor / model
class ShapeMismatch(MBError):
    pass


class NonScalarLoss(MBError):
    pass


class NonFiniteError(MBError, FloatingPointError):
    """An op produced NaN or Inf."""


class InvalidConfig(MBError, ValueError):
    pass


# metrics
class OneClassOnly(MBError, ValueError):
    pass


class LengthMismatch(MBError, ValueError):
    pass
