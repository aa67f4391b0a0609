"""Exception hierarchy. Each family maps to one CLI exit code."""


class PibError(Exception):
    exit_code = 1


class UsageError(PibError):
    exit_code = 1


class ConfigError(UsageError):
    pass


class DataError(PibError, ValueError):
    exit_code = 2


class ShapeMismatch(DataError):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class EmptyBatch(DataError):
    pass


class IndexOutOfRange(DataError, IndexError):
    pass


class BadMagic(DataError):
    pass


class DimMismatch(DataError):
    pass


class TruncatedFile(DataError):
    pass


class EmptyHoldout(DataError):
    pass


class AllClassesHeldOut(DataError):
    pass


class DegenerateSplit(DataError):
    pass


class CheckpointVersionError(DataError):
    pass


class NumericError(PibError, ArithmeticError):
    exit_code = 3


class NonFiniteInput(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass


class EigDecompositionFailure(NumericError):
    pass


class DegenerateJoint(NumericError):
    pass


class NetworkError(PibError):
    exit_code = 4


class ProtocolError(NetworkError):
    """Malformed or out-of-order wire traffic."""


class WireBadMagic(ProtocolError):
    pass


class UnknownType(ProtocolError):
    pass


class LengthMismatch(ProtocolError):
    pass


class Truncated(ProtocolError):
    pass


class ProtocolViolation(ProtocolError):
    pass


class WorkerUnreachable(NetworkError):
    pass


class WorkerError(NetworkError):
    def __init__(self, message, payload=b""):
        super().__init__(message)
        self.payload = payload


class Timeout(NetworkError):
    pass
