"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


class NumericError(ArithmeticError):
    """A computation produced or encountered non-finite values."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class CorpusError(ValueError):
    """A corpus file failed to parse or validate."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(ValueError):
    """A checkpoint file is malformed or inconsistent with its config."""
