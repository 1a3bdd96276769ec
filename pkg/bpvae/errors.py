from typing import Optional


class BpvaeError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(BpvaeError, ValueError):
    pass


class TapeError(BpvaeError, RuntimeError):
    pass


class ConfigError(BpvaeError, ValueError):
    pass


class CheckpointError(BpvaeError, ValueError):
    pass


class DataFormatError(BpvaeError, ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class DivergenceError(BpvaeError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, value: float, label: str = "training"):
        self.epoch = epoch
        self.value = value
        super().__init__(f"{label} diverged at epoch {epoch}: loss={value}")
