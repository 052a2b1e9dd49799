"""Exception hierarchy shared across the package."""


class TpadError(Exception):
    """Base class for all package errors."""


class ShapeError(TpadError, ValueError):
    pass


class DegenerateInputError(TpadError, ValueError):
    pass


class TrainingError(TpadError, RuntimeError):
    """Non-finite loss or gradient during optimisation."""


class GradCheckError(TpadError, RuntimeError):
    pass


class CorpusParseError(TpadError, ValueError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class ReferentialError(TpadError, ValueError):
    pass


class SplitError(TpadError, ValueError):
    pass


class ConfigError(TpadError, ValueError):
    pass


class OrderError(TpadError, ValueError):
    pass


class BatchError(TpadError, ValueError):
    pass


class EstimatorError(TpadError, RuntimeError):
    pass


class StateError(TpadError, RuntimeError):
    """A stage ran before the artifacts it depends on exist."""
