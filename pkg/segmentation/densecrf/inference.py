## segmentation/densecrf/inference.py

"""Mean-field inference for the fully connected two-label CRF.

Q starts as the softmax of the negated unaries. Each round computes every
message from the previous Q (synchronous update):

    m_i(l) = sum_{j != i} k(i, j) sum_l' mu(l, l') Q_j(l')
    Q_i(l) ~ exp(-unary_i(l) - m_i(l))
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import softmax

from segmentation.densecrf.potentials import (
    CrfParams,
    PixelFeatures,
    UnaryField,
    _kernel,
    kernel_matrix,
    kernel_rows,
    unary_from_probability,
)
from segmentation.exceptions import PreconditionError, ShapeError
from segmentation.maps import BinaryMask, ProbabilityMap

logger = logging.getLogger(__name__)

ROW_CHUNK = 512


@dataclass(eq=False)
class MarginalField:
    """Per-pixel label distribution, columns (background, salient)."""

    q: np.ndarray
    grid_shape: Optional[Tuple[int, int]] = None

    @property
    def salient(self) -> np.ndarray:
        values = self.q[:, 1]
        return values.reshape(self.grid_shape) if self.grid_shape else values

    def map_labeling(self) -> BinaryMask:
        if self.grid_shape is None:
            raise PreconditionError("MAP labeling needs the grid shape")
        return BinaryMask((self.q[:, 1] > self.q[:, 0]).reshape(self.grid_shape))


def _naive_messages(q: np.ndarray, features: PixelFeatures, params: CrfParams) -> np.ndarray:
    n = len(features)
    kq = np.empty_like(q)
    for start in range(0, n, ROW_CHUNK):
        rows = slice(start, min(start + ROW_CHUNK, n))
        kq[rows] = kernel_rows(features, params, rows) @ q
    return kq @ params.compatibility.T


def _window_messages(q: np.ndarray, features: PixelFeatures, params: CrfParams) -> np.ndarray:
    h, w = features.grid_shape
    radius = params.window_radius
    grid_q = q.reshape(h, w, 2)
    pos = features.positions.reshape(h, w, 2)
    col = features.colors.reshape(h, w, 3)
    kq = np.zeros((h, w, 2))

    # Half of the offsets; each weight is applied in both directions.
    for dy in range(0, min(radius, h - 1) + 1):
        for dx in range(-min(radius, w - 1), min(radius, w - 1) + 1):
            if dy == 0 and dx <= 0:
                continue
            a = (slice(0, h - dy), slice(max(0, -dx), min(w, w - dx)))
            b = (slice(dy, h), slice(max(0, dx), min(w, w + dx)))
            dp2 = ((pos[a] - pos[b]) ** 2).sum(axis=2)
            di2 = ((col[a] - col[b]) ** 2).sum(axis=2)
            weight = _kernel(dp2, di2, params)[..., None]
            kq[a] += weight * grid_q[b]
            kq[b] += weight * grid_q[a]

    return kq.reshape(-1, 2) @ params.compatibility.T


def mean_field_inference(
    unary: UnaryField, features: PixelFeatures, params: CrfParams
) -> MarginalField:
    if len(unary) != len(features):
        raise ShapeError("pixel count", len(features), len(unary), "mean_field_inference")

    windowed = params.window_radius is not None
    if windowed and features.grid_shape is None:
        raise PreconditionError("The windowed path needs features built on a pixel grid")

    q = softmax(-unary.values, axis=1)
    if params.omega1 == 0 and params.omega2 == 0:
        return MarginalField(q, features.grid_shape or unary.grid_shape)

    messages = _window_messages if windowed else _naive_messages
    for _ in range(params.iterations):
        q = softmax(-unary.values - messages(q, features, params), axis=1)

    logger.debug(
        f"Mean field: {params.iterations} iterations over {len(features)} pixels, "
        f"{'window r=' + str(params.window_radius) if windowed else 'all pairs'}"
    )
    return MarginalField(q, features.grid_shape or unary.grid_shape)


def _labels(labeling: Union[BinaryMask, np.ndarray]) -> np.ndarray:
    if isinstance(labeling, BinaryMask):
        return labeling.bits.ravel().astype(np.intp)
    return np.asarray(labeling).ravel().astype(np.intp)


def exact_energy(
    labeling: Union[BinaryMask, np.ndarray],
    unary: UnaryField,
    features: PixelFeatures,
    params: CrfParams,
) -> float:
    """E(y) = sum_i unary_i(y_i) + sum_{i<j} mu(y_i, y_j) k(i, j)."""
    y = _labels(labeling)
    if len(y) != len(unary) or len(unary) != len(features):
        raise ShapeError("pixel count", len(features), len(y), "exact_energy")

    unary_term = unary.values[np.arange(len(y)), y].sum()
    mu = params.compatibility[y[:, None], y[None, :]]
    pairwise = np.triu(kernel_matrix(features, params) * mu, k=1).sum()
    return float(unary_term + pairwise)


def crf_refine(prob: ProbabilityMap, rgb_image: np.ndarray, params: CrfParams) -> ProbabilityMap:
    """Refine ``prob`` with the (3, H, W) [0, 1] image it was computed from."""
    rgb_image = np.asarray(rgb_image, dtype=np.float64)
    if rgb_image.ndim != 3 or rgb_image.shape[0] != 3:
        raise ShapeError("image shape", "(3, H, W)", rgb_image.shape, "crf_refine")
    if rgb_image.shape[1:] != prob.shape:
        raise ShapeError("spatial size", prob.shape, rgb_image.shape[1:], "crf_refine")

    features = PixelFeatures.from_image(np.moveaxis(rgb_image, 0, -1) * 255.0)
    field = mean_field_inference(unary_from_probability(prob), features, params)
    return ProbabilityMap(field.salient.copy(), source_size=prob.source_size)
