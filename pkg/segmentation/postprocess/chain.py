## segmentation/postprocess/chain.py

import logging

from segmentation.maps import BinaryMask, ProbabilityMap
from segmentation.postprocess.morphology import StructuringElement, close, fill_holes
from segmentation.postprocess.regions import select_primary_region
from segmentation.postprocess.threshold import otsu_threshold

logger = logging.getLogger(__name__)


def postprocess_pipeline(prob: ProbabilityMap, se_radius: int = 1) -> BinaryMask:
    """Otsu threshold, closing, hole filling, then the single primary region."""
    se = StructuringElement(se_radius)
    threshold, mask = otsu_threshold(prob)
    mask = close(mask, se)
    mask = fill_holes(mask)
    mask = select_primary_region(mask)
    logger.debug(f"Postprocess: threshold {threshold:.4f}, {mask.area} foreground pixels")
    return mask
