"""Exception hierarchy shared by every stage of the pipeline."""


class HiResError(Exception):
    """Base class for all package errors."""


class ParseError(HiResError):
    pass


class UnsupportedFormat(HiResError):
    pass


class EmptyInput(HiResError):
    pass


class InsufficientSamples(HiResError):
    pass


class InvalidPartition(HiResError):
    pass


class ShapeMismatch(HiResError, ValueError):
    pass


class NumericError(HiResError, FloatingPointError):
    pass


class MissingGradient(HiResError):
    pass


class InvalidStep(HiResError, ValueError):
    pass


class ConfigError(HiResError, ValueError):
    pass


class BandMismatch(HiResError):
    pass


class DegenerateDataset(HiResError):
    pass


class DuplicateId(HiResError, ValueError):
    pass


class EmptyPool(HiResError):
    pass


class PoolMismatch(HiResError):
    pass


class NotTrainable(HiResError):
    pass


class ContractViolation(HiResError):
    pass


class DegenerateLabels(HiResError):
    pass


class UnsupportedArchitecture(HiResError):
    pass


class IoError(HiResError, OSError):
    pass
