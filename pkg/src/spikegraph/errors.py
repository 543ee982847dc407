"""Exception types shared across the package."""


class SpikeGraphError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(SpikeGraphError):
    pass


class IndexOutOfRange(SpikeGraphError):
    pass


class SelfLoopRejected(SpikeGraphError):
    pass


class IsolatedNode(SpikeGraphError):
    pass


class NotABijection(SpikeGraphError):
    pass


class NonBinaryInput(SpikeGraphError):
    pass


class InvalidRate(SpikeGraphError):
    pass


class OutOfRange(SpikeGraphError):
    pass


class InvalidPenalty(SpikeGraphError):
    pass


class EmptyGraph(SpikeGraphError):
    pass


class EmptyMask(SpikeGraphError):
    pass


class NonFiniteLoss(SpikeGraphError):
    pass


class MissingFile(SpikeGraphError):
    pass


class SchemaViolation(SpikeGraphError):
    pass


class LabelOutOfRange(SpikeGraphError):
    pass


class InsufficientNodes(SpikeGraphError):
    pass


class VersionMismatch(SpikeGraphError):
    pass


class CorruptFile(SpikeGraphError):
    pass


class MissingCheckpoint(SpikeGraphError):
    pass
