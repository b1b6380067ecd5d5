"""Shared exception types."""


class PrismError(Exception):
    pass


class DegenerateRotation(PrismError, ValueError):
    """6D rotation input cannot be orthogonalized (zero or parallel columns)."""


class SkeletonMismatch(PrismError, ValueError):
    """Pose/grid joint count disagrees with the skeleton."""


class ShapeMismatch(PrismError, ValueError):
    pass


class InvalidRotation(PrismError, ValueError):
    pass


class EmptyDataset(PrismError, ValueError):
    pass


class OutOfRange(PrismError, ValueError):
    pass


class NonFinite(PrismError, FloatingPointError):
    pass


class IncompatibleCheckpoint(PrismError, ValueError):
    pass


class CheckpointCorrupt(PrismError, ValueError):
    pass


class UnknownFamily(PrismError, KeyError):
    pass


class TooFewSamples(PrismError, ValueError):
    pass


class DegenerateConfiguration(PrismError, ValueError):
    pass


class WindowOutOfRange(PrismError, ValueError):
    pass


class ScriptInvalid(PrismError, ValueError):
    pass
