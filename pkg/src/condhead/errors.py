"""Exception types shared across the package."""


class CondHeadError(Exception):
    """Base class for all package errors."""


class DimensionError(CondHeadError, ValueError):
    pass


class DomainError(CondHeadError, ValueError):
    pass


class ConfigurationError(CondHeadError, ValueError):
    pass


class ContractViolation(CondHeadError):
    pass


class MatchError(CondHeadError, ValueError):
    pass


class GenerationError(CondHeadError, RuntimeError):
    pass


class ParseError(CondHeadError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TrainingError(CondHeadError, RuntimeError):
    """Raised when optimization hits a non-finite value.

    ``iteration`` and ``param`` are filled in when known so the caller can
    report exactly where training diverged.
    """

    def __init__(self, message, iteration=None, param=None):
        parts = [message]
        if iteration is not None:
            parts.append(f"iteration={iteration}")
        if param is not None:
            parts.append(f"param={param}")
        super().__init__(" ".join(parts))
        self.iteration = iteration
        self.param = param
