## segmentation/densecrf/potentials.py

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import numpy as np

from segmentation.exceptions import ConfigError, PreconditionError, ShapeError
from segmentation.maps import ProbabilityMap

logger = logging.getLogger(__name__)

UNARY_CLAMP = 1e-6

POTTS = np.array([[0.0, 1.0], [1.0, 0.0]])


@dataclass(frozen=True, eq=False)
class CrfParams:
    """Weights and bandwidths of the appearance and smoothness kernels.

    Args:
        compatibility: 2x2 label compatibility matrix mu[a, b], or a callable
            mu(a, b) which is tabulated. Defaults to Potts.
        window_radius: Truncate message passing to a (2R+1) square window.
            None evaluates every pixel pair.
    """

    omega1: float = 3.0
    omega2: float = 5.0
    sigma_alpha: float = 3.0
    sigma_beta: float = 60.0
    sigma_gamma: float = 3.0
    iterations: int = 10
    compatibility: Union[np.ndarray, Callable, None] = None
    window_radius: Optional[int] = None

    def __post_init__(self):
        mu = self.compatibility
        if mu is None:
            mu = POTTS.copy()
        elif callable(mu):
            mu = np.array([[mu(a, b) for b in range(2)] for a in range(2)], dtype=np.float64)
        else:
            mu = np.array(mu, dtype=np.float64)
        object.__setattr__(self, "compatibility", mu)
        self.validate()

    def validate(self):
        issues = []
        for name in ("sigma_alpha", "sigma_beta", "sigma_gamma"):
            if not getattr(self, name) > 0:
                issues.append(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("omega1", "omega2"):
            if not getattr(self, name) >= 0:
                issues.append(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.iterations < 1:
            issues.append(f"iterations must be positive, got {self.iterations}")
        if self.compatibility.shape != (2, 2):
            issues.append(f"compatibility must be 2x2, got {self.compatibility.shape}")
        if self.window_radius is not None and self.window_radius < 1:
            issues.append(f"window_radius must be positive, got {self.window_radius}")
        if issues:
            logger.error(f"CrfParams validation failed: {issues}")
            raise ConfigError(issues)


@dataclass(eq=False)
class PixelFeatures:
    """Per-pixel positions (x, y) and colors (r, g, b) on a 0..255 scale."""

    positions: np.ndarray
    colors: np.ndarray
    grid_shape: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) != len(self.colors):
            raise ShapeError("pixel count", len(self.positions), len(self.colors), "PixelFeatures")
        if self.grid_shape is not None:
            h, w = self.grid_shape
            if h * w != len(self.positions):
                raise ShapeError("pixel count", h * w, len(self.positions), "PixelFeatures")
            xs, ys = self.positions[:, 0], self.positions[:, 1]
            if xs.min() < 0 or ys.min() < 0 or xs.max() > w - 1 or ys.max() > h - 1:
                raise PreconditionError("pixel positions fall outside the image")

    @classmethod
    def from_image(cls, rgb: np.ndarray) -> "PixelFeatures":
        """Features of an (H, W, 3) image already on the 0..255 scale."""
        rgb = np.asarray(rgb, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ShapeError("image shape", "(H, W, 3)", rgb.shape, "PixelFeatures")
        h, w = rgb.shape[:2]
        ys, xs = np.mgrid[:h, :w]
        positions = np.stack([xs.ravel(), ys.ravel()], axis=1)
        return cls(positions, rgb.reshape(-1, 3), (h, w))

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(eq=False)
class UnaryField:
    """Per-pixel label costs, columns ordered (background, salient)."""

    values: np.ndarray
    grid_shape: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.values)


def unary_from_probability(prob: ProbabilityMap, eps: float = UNARY_CLAMP) -> UnaryField:
    p = prob.clamped(eps).ravel()
    return UnaryField(np.stack([-np.log(1.0 - p), -np.log(p)], axis=1), prob.shape)


def _kernel(dp2: np.ndarray, di2: np.ndarray, params: CrfParams) -> np.ndarray:
    appearance = np.exp(
        -dp2 / (2.0 * params.sigma_alpha**2) - di2 / (2.0 * params.sigma_beta**2)
    )
    smoothness = np.exp(-dp2 / (2.0 * params.sigma_gamma**2))
    return params.omega1 * appearance + params.omega2 * smoothness


def pairwise_weight(i: int, j: int, features: PixelFeatures, params: CrfParams) -> float:
    """k(i, j) = w1 exp(-|dp|^2/2sa^2 - |dI|^2/2sb^2) + w2 exp(-|dp|^2/2sg^2)."""
    if i == j:
        raise PreconditionError(f"pairwise_weight needs two distinct pixels, got i=j={i}")
    dp2 = np.sum((features.positions[i] - features.positions[j]) ** 2)
    di2 = np.sum((features.colors[i] - features.colors[j]) ** 2)
    return float(_kernel(dp2, di2, params))


def kernel_rows(features: PixelFeatures, params: CrfParams, rows: slice) -> np.ndarray:
    """Rows of the all-pairs kernel matrix, self-pairs set to zero."""
    p, c = features.positions, features.colors
    dp2 = ((p[rows, None, :] - p[None, :, :]) ** 2).sum(axis=2)
    di2 = ((c[rows, None, :] - c[None, :, :]) ** 2).sum(axis=2)
    block = _kernel(dp2, di2, params)
    start = rows.start or 0
    idx = np.arange(block.shape[0])
    block[idx, start + idx] = 0.0
    return block


def kernel_matrix(features: PixelFeatures, params: CrfParams) -> np.ndarray:
    return kernel_rows(features, params, slice(0, len(features)))
