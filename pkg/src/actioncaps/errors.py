"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when array shapes are incompatible with an operation."""


class ContractError(ValueError):
    """Raised when a caller violates a documented precondition."""


class SkeletonParseError(ValueError):
    """Raised on malformed skeleton input; carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(ValueError):
    """Raised on malformed data files (caches, checkpoints, configs)."""
