## segmentation/postprocess/regions.py

import logging
import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from segmentation.maps import BinaryMask

logger = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ComponentStats:
    """One 8-connected foreground component.

    ``centroid`` is (x, y) = (column mean, row mean); ``distance`` is the
    centroid's distance to the image center divided by the half-diagonal.
    """

    id: int
    area: int
    centroid: Tuple[float, float]
    distance: float

    @property
    def score(self) -> float:
        return self.area * (1.0 - self.distance)


def label_components(mask: BinaryMask) -> Tuple[np.ndarray, List[ComponentStats]]:
    """Label image (0 = background) with ids 1..n in first-raster-occurrence order."""
    raw, count = ndimage.label(mask.bits, structure=EIGHT_CONNECTED)
    if count == 0:
        return raw, []

    flat = raw.ravel()
    found, first = np.unique(flat, return_index=True)
    keep = found > 0
    order = found[keep][np.argsort(first[keep], kind="stable")]
    remap = np.zeros(count + 1, dtype=raw.dtype)
    remap[order] = np.arange(1, count + 1)
    labels = remap[raw]

    h, w = mask.shape
    rows, cols = np.mgrid[:h, :w]
    flat_labels = labels.ravel()
    areas = np.bincount(flat_labels, minlength=count + 1)
    sum_x = np.bincount(flat_labels, weights=cols.ravel(), minlength=count + 1)
    sum_y = np.bincount(flat_labels, weights=rows.ravel(), minlength=count + 1)

    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    half_diagonal = math.hypot(cx, cy)

    stats = []
    for i in range(1, count + 1):
        x, y = sum_x[i] / areas[i], sum_y[i] / areas[i]
        distance = math.hypot(x - cx, y - cy) / half_diagonal if half_diagonal else 0.0
        stats.append(ComponentStats(i, int(areas[i]), (float(x), float(y)), min(distance, 1.0)))
    return labels, stats


def connected_components(mask: BinaryMask) -> List[ComponentStats]:
    return label_components(mask)[1]


def select_primary_region(mask: BinaryMask) -> BinaryMask:
    """Keep the component with the largest area * (1 - distance); smaller id wins ties."""
    labels, stats = label_components(mask)
    if not stats:
        return BinaryMask.empty(*mask.shape)

    best = stats[0]
    for component in stats[1:]:
        if component.score > best.score:
            best = component

    if len(stats) > 1:
        logger.debug(
            f"Kept component {best.id} (area {best.area}, distance {best.distance:.3f}) "
            f"of {len(stats)}"
        )
    return BinaryMask(labels == best.id)
