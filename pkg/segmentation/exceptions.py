## segmentation/exceptions.py

from typing import Any, List, Optional, Sequence


class SegmentationError(Exception):
    """Base class for every error raised by the segmentation stack."""


class ShapeError(SegmentationError, ValueError):
    """A tensor, map or mask has the wrong size along one dimension."""

    def __init__(self, dimension: str, expected: Any, actual: Any, context: str = ""):
        self.dimension = dimension
        self.expected = expected
        self.actual = actual
        prefix = f"{context}: " if context else ""
        super().__init__(
            f"{prefix}{dimension} mismatch, expected {expected}, got {actual}"
        )


class PreconditionError(SegmentationError, ValueError):
    pass


class GradientCheckError(SegmentationError, RuntimeError):
    def __init__(self, message: str, coordinate: Optional[str] = None):
        self.coordinate = coordinate
        super().__init__(message)


class DivergenceError(SegmentationError, RuntimeError):
    def __init__(self, iteration: int, loss: float):
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"Training diverged at iteration {iteration}: loss={loss}")


class CheckpointError(SegmentationError, ValueError):
    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class DatasetError(SegmentationError, ValueError):
    def __init__(self, message: str, stems: Sequence[str] = ()):
        self.stems: List[str] = list(stems)
        if self.stems:
            message = f"{message}: {', '.join(self.stems)}"
        super().__init__(message)


class ImageDecodeError(DatasetError):
    def __init__(self, path: str, reason: str):
        self.path = str(path)
        super().__init__(f"Cannot decode {path}: {reason}")


class ConfigError(SegmentationError, ValueError):
    def __init__(self, issues: Sequence[str]):
        self.issues: List[str] = list(issues)
        super().__init__(f"Invalid configuration: {self.issues}")
