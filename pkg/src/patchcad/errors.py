"""Exception types raised across the pipeline."""


class CadError(Exception):
    """Base class for all pipeline errors."""


class ShapeMismatch(CadError, ValueError):
    pass


class StaleState(CadError, RuntimeError):
    pass


class LengthMismatch(CadError, ValueError):
    pass


class EmptySplit(CadError, ValueError):
    pass


class NonFiniteLoss(CadError, ArithmeticError):
    pass


class BadDimensions(CadError, ValueError):
    pass


class InsufficientData(CadError, ValueError):
    pass


class OutOfRange(CadError, ValueError):
    pass


class MismatchedReport(CadError, ValueError):
    pass


class UndefinedMetric(CadError, ZeroDivisionError):
    def __init__(self, metric: str, denominator: str):
        super().__init__(f"{metric} is undefined: {denominator} is zero")
        self.metric = metric
        self.denominator = denominator


class BadLayerIndex(CadError, IndexError):
    pass


class CorruptModel(CadError, ValueError):
    pass


class BadOrigin(CadError, ValueError):
    pass
