"""Exception hierarchy shared by every module."""


class InvLearnError(Exception):
    """Base class for all errors raised by invlearn."""


class ConfigError(InvLearnError, ValueError):
    pass


class DataError(InvLearnError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyDatasetError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class ExhaustionError(DataError):
    """Fewer unlabeled pairs remain than were requested."""


class EmptyInputError(InvLearnError, ValueError):
    pass


class NumericError(InvLearnError, FloatingPointError):
    pass


class ShapeError(InvLearnError, ValueError):
    pass


class UndefinedMetricError(InvLearnError, ValueError):
    """A metric is undefined for the given labels (e.g. AUC with one class)."""
