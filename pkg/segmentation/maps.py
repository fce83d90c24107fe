## segmentation/maps.py

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from segmentation.exceptions import PreconditionError, ShapeError


@dataclass(eq=False)
class ProbabilityMap:
    """Per-pixel foreground probability with the source image size attached.

    Args:
        values: (height, width) array of probabilities in [0, 1].
        source_size: (height, width) of the image the map was computed from.
            Defaults to the map's own size.
    """

    values: np.ndarray
    source_size: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError("rank", 2, self.values.ndim, "ProbabilityMap")
        if self.values.size == 0:
            raise ShapeError("size", "> 0", self.values.shape, "ProbabilityMap")
        if self.source_size is None:
            self.source_size = self.values.shape
        self.source_size = (int(self.source_size[0]), int(self.source_size[1]))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def clamped(self, eps: float) -> np.ndarray:
        return np.clip(self.values, eps, 1.0 - eps)


@dataclass(eq=False)
class BinaryMask:
    """Strictly binary per-pixel labeling (True = lesion)."""

    bits: np.ndarray
    _components: Optional[list] = field(default=None, repr=False)

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.ndim != 2:
            raise ShapeError("rank", 2, arr.ndim, "BinaryMask")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError("size", "positive", arr.shape, "BinaryMask")
        if arr.dtype != np.bool_:
            if not np.isin(arr, (0, 1)).all():
                raise PreconditionError("BinaryMask values must be 0 or 1")
            arr = arr.astype(bool)
        self.bits = arr

    @classmethod
    def empty(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bits.shape

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    @property
    def components(self) -> list:
        """8-connected component statistics, computed on first access."""
        if self._components is None:
            from segmentation.postprocess.regions import connected_components

            self._components = connected_components(self)
        return self._components

    def to_uint8(self) -> np.ndarray:
        return np.where(self.bits, 255, 0).astype(np.uint8)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(
            np.array_equal(self.bits, other.bits)
        )
