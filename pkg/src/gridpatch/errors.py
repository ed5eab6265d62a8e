"""Exception hierarchy shared across the package."""


class GridPatchError(Exception):
    """Base class for all library errors."""


class ParseError(GridPatchError):
    """Malformed input file; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DuplicatePlotError(ParseError):
    pass


class EmptyTrialError(ParseError):
    pass


class InvalidCoordError(GridPatchError):
    pass


class InvalidVertexError(GridPatchError):
    pass


class ParamError(GridPatchError):
    pass


class NumericalError(GridPatchError):
    pass


class InsufficientDataError(GridPatchError):
    pass


class DegenerateDataError(GridPatchError):
    pass


class ShapeMismatchError(GridPatchError):
    pass


class DesignError(GridPatchError):
    pass


class ConvergenceError(GridPatchError):
    pass


class SimulationError(GridPatchError):
    pass


class ConfigError(GridPatchError):
    pass
