## segmentation/postprocess/morphology.py

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from segmentation.exceptions import PreconditionError
from segmentation.maps import BinaryMask

OPERATIONS = ("dilate", "erode", "close")


@dataclass(frozen=True)
class StructuringElement:
    """Full square of side 2r + 1."""

    radius: int = 1

    def __post_init__(self):
        if self.radius < 1:
            raise PreconditionError(f"structuring element radius must be >= 1, got {self.radius}")

    @property
    def footprint(self) -> np.ndarray:
        side = 2 * self.radius + 1
        return np.ones((side, side), dtype=bool)


def dilate(mask: BinaryMask, se: StructuringElement) -> BinaryMask:
    # Pixels outside the image are background.
    return BinaryMask(ndimage.binary_dilation(mask.bits, structure=se.footprint, border_value=0))


def erode(mask: BinaryMask, se: StructuringElement) -> BinaryMask:
    # Only offsets that land inside the image are tested, which is the
    # adjoint of dilate above: close is idempotent and keeps a full mask full.
    return BinaryMask(ndimage.binary_erosion(mask.bits, structure=se.footprint, border_value=1))


def close(mask: BinaryMask, se: StructuringElement) -> BinaryMask:
    return erode(dilate(mask, se), se)


def morphology(mask: BinaryMask, se: StructuringElement, op: str) -> BinaryMask:
    if op == "dilate":
        return dilate(mask, se)
    if op == "erode":
        return erode(mask, se)
    if op == "close":
        return close(mask, se)
    raise PreconditionError(f"Unknown morphology op '{op}', expected one of {OPERATIONS}")


def fill_holes(mask: BinaryMask) -> BinaryMask:
    """Background not 4-connected to the border becomes foreground."""
    return BinaryMask(ndimage.binary_fill_holes(mask.bits))
