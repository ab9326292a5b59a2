"""Exception hierarchy shared by every module of the package."""


class InterlaceError(Exception):
    """Base class for all package errors."""


# numkernel
class ZeroNormVector(InterlaceError, ValueError):
    pass


class GraphDetached(InterlaceError, RuntimeError):
    pass


class NonFiniteValue(InterlaceError, FloatingPointError):
    pass


# model
class InvalidConfig(InterlaceError, ValueError):
    pass


class SequenceTooLong(InterlaceError, ValueError):
    pass


class TokenOutOfRange(InterlaceError, ValueError):
    pass


class ChecksumMismatch(InterlaceError):
    pass


class VersionMismatch(InterlaceError):
    pass


# similarity
class EmptyCalibration(InterlaceError, ValueError):
    pass


class EmptyResult(InterlaceError, ValueError):
    pass


# planner
class InvalidRatio(InterlaceError, ValueError):
    pass


class InsufficientTriplets(InterlaceError):
    pass


class InsufficientLayers(InterlaceError, ValueError):
    pass


class WindowOutOfRange(InterlaceError, ValueError):
    pass


# surgery
class PlanModelMismatch(InterlaceError, ValueError):
    pass


# trainer
class AllMasked(InterlaceError, ValueError):
    pass


class NonFiniteLoss(InterlaceError, FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at optimizer step {step}")
        self.step = step
        self.loss = loss


# taskgen
class SpecTooSmall(InterlaceError, ValueError):
    pass


# bench
class ZeroBaseline(InterlaceError, ZeroDivisionError):
    pass


class ClockResolutionTooCoarse(InterlaceError):
    pass
