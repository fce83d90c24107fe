## segmentation/postprocess/threshold.py

import logging
from typing import Tuple

import numpy as np

from segmentation.maps import BinaryMask, ProbabilityMap

logger = logging.getLogger(__name__)

BINS = 256


def histogram_bins(values: np.ndarray) -> np.ndarray:
    """Bin index per value; bin k holds (k/256, (k+1)/256], zero goes to bin 0."""
    return np.clip(np.ceil(values * BINS).astype(np.int64) - 1, 0, BINS - 1)


def otsu_threshold(prob: ProbabilityMap) -> Tuple[float, BinaryMask]:
    """Otsu's threshold over a 256-bin histogram of [0, 1].

    Between-class variance is compared exactly as (n1*S0 - n0*S1)^2 / (n0*n1)
    with integer counts and bin-index sums; the lowest winning split k is
    kept. Foreground is p > (k + 1) / 256. When no split leaves both classes
    nonempty the threshold is the map maximum and the mask is empty.
    """
    values = prob.values
    bins = histogram_bins(values)
    hist = [int(c) for c in np.bincount(bins.ravel(), minlength=BINS)]
    total = sum(hist)
    total_sum = sum(k * c for k, c in enumerate(hist))

    best_k, best_num, best_den = None, 0, 1
    n0 = s0 = 0
    for k in range(BINS - 1):
        n0 += hist[k]
        s0 += k * hist[k]
        n1, s1 = total - n0, total_sum - s0
        if n0 == 0 or n1 == 0:
            continue
        num = (n1 * s0 - n0 * s1) ** 2
        den = n0 * n1
        if best_k is None or num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den

    if best_k is None:
        threshold = float(values.max())
        logger.debug(f"Degenerate histogram, threshold {threshold}, empty mask")
        return threshold, BinaryMask.empty(*values.shape)

    threshold = (best_k + 1) / BINS
    return threshold, BinaryMask(bins > best_k)
