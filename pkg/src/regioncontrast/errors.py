"""Exception taxonomy shared by all modules."""


class Error(Exception):
    """Base class for domain errors raised by this package."""


class InvalidInput(Error):
    """A value violates an operation's precondition."""


class ShapeError(Error):
    """Tensor or grid shapes are inconsistent."""


class NumericalError(Error):
    """A numerical guard tripped (NaN, near-zero norm, diverged loss)."""


class ParseError(Error):
    """A serialized artifact could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class CorruptCheckpoint(Error):
    """Checkpoint header and payload disagree."""
