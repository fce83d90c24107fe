## segmentation/trainer/loss.py

from typing import Union

import numpy as np

from segmentation.autodiff import Tensor, clamp, log, mul, sub, sum_all
from segmentation.exceptions import PreconditionError, ShapeError
from segmentation.maps import BinaryMask, ProbabilityMap

EPSILON = 1e-12


def _truth_array(truth, shape) -> np.ndarray:
    if isinstance(truth, BinaryMask):
        values = truth.bits.astype(np.float64)
    elif isinstance(truth, Tensor):
        values = truth.data
    else:
        values = np.asarray(truth, dtype=np.float64)

    if values.size != int(np.prod(shape)) or values.shape[-2:] != shape[-2:]:
        raise ShapeError("truth size", shape[-2:], values.shape[-2:], "cross_entropy_loss")
    if values.min() < 0.0 or values.max() > 1.0:
        raise PreconditionError("truth values must lie in [0, 1]")
    return values.reshape(shape)


def cross_entropy_loss(
    probability: Union[Tensor, ProbabilityMap], truth, eps: float = EPSILON
) -> Tensor:
    """Summed binary cross-entropy -sum(y log p + (1 - y) log(1 - p)).

    ``probability`` is clamped to [eps, 1 - eps] before the logs. A
    ProbabilityMap is treated as a constant.
    """
    if isinstance(probability, ProbabilityMap):
        probability = Tensor(probability.values)
    y = _truth_array(truth, probability.shape)

    p = clamp(probability, eps, 1.0 - eps)
    positive = mul(y, log(p))
    negative = mul(1.0 - y, log(sub(1.0, p)))
    return -sum_all(positive + negative)
