## analytics/imaging.py

import logging
import os
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from segmentation.autodiff import bilinear_weights
from segmentation.exceptions import ImageDecodeError, PreconditionError, ShapeError
from segmentation.maps import BinaryMask, ProbabilityMap

logger = logging.getLogger(__name__)

RESIZE_MODES = ("bilinear", "nearest")
OVERLAY_TINT = np.array([255.0, 64.0, 32.0])


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as e:
        raise ImageDecodeError(path, str(e)) from e
    return img


def load_image(path) -> np.ndarray:
    """Decode a PNG or JPEG into a (3, H, W) float64 array scaled to [0, 1]."""
    img = _open(path)
    if img.mode != "RGB":
        img = img.convert("RGB")
    rgb = np.asarray(img, dtype=np.float64) / 255.0
    return np.ascontiguousarray(rgb.transpose(2, 0, 1))


def to_rgb_bytes(image: np.ndarray) -> np.ndarray:
    """(3, H, W) [0, 1] array back to (H, W, 3) uint8."""
    return np.clip(np.rint(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, image: np.ndarray) -> str:
    Image.fromarray(to_rgb_bytes(image)).save(path, format="PNG")
    return os.fspath(path)


def save_mask(path, mask: BinaryMask) -> str:
    """8-bit single-channel PNG, values {0, 255}."""
    Image.fromarray(mask.to_uint8()).save(path, format="PNG")
    return os.fspath(path)


def load_mask(path) -> BinaryMask:
    img = _open(path)
    if img.mode not in ("L", "1"):
        img = img.convert("L")
    values = np.asarray(img)
    if values.dtype == np.bool_:
        return BinaryMask(values)

    present = np.unique(values)
    if np.isin(present, (0, 255)).all():
        return BinaryMask(values == 255)
    if np.isin(present, (0, 1)).all():
        return BinaryMask(values == 1)
    raise ImageDecodeError(path, f"mask is not binary, found values {present[:8].tolist()}")


def save_probability_map(path, prob: ProbabilityMap) -> str:
    """Grayscale PNG holding round(p * 255)."""
    values = np.clip(np.rint(prob.values * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(values).save(path, format="PNG")
    return os.fspath(path)


def load_probability_map(path) -> ProbabilityMap:
    img = _open(path)
    if img.mode != "L":
        img = img.convert("L")
    return ProbabilityMap(np.asarray(img, dtype=np.float64) / 255.0)


def nearest_indices(in_size: int, out_size: int) -> np.ndarray:
    return (np.arange(out_size) * in_size) // out_size


def _resize_array(values: np.ndarray, out_h: int, out_w: int, mode: str) -> np.ndarray:
    h, w = values.shape[-2:]
    if (h, w) == (out_h, out_w):
        return values.copy()
    if mode == "nearest":
        rows, cols = nearest_indices(h, out_h), nearest_indices(w, out_w)
        return values[..., rows[:, None], cols[None, :]]
    wy, wx = bilinear_weights(h, out_h), bilinear_weights(w, out_w)
    return np.einsum("oh,...hw,pw->...op", wy, values.astype(np.float64), wx)


def resize(
    item: Union[np.ndarray, ProbabilityMap, BinaryMask],
    out_h: int,
    out_w: int,
    mode: str = None,
):
    """Resize an image, probability map or mask to (out_h, out_w).

    Images and probability maps default to align-corners bilinear, masks to
    nearest. Arrays may be (H, W) or (C, H, W). The result has the input's type.
    """
    if out_h < 1 or out_w < 1:
        raise PreconditionError(f"target size must be positive, got {(out_h, out_w)}")
    if mode is None:
        mode = "nearest" if isinstance(item, BinaryMask) else "bilinear"
    if mode not in RESIZE_MODES:
        raise PreconditionError(f"Unknown resize mode '{mode}', expected one of {RESIZE_MODES}")

    if isinstance(item, BinaryMask):
        if mode != "nearest":
            raise PreconditionError("binary masks are resized with 'nearest' only")
        return BinaryMask(_resize_array(item.bits, out_h, out_w, mode))
    if isinstance(item, ProbabilityMap):
        values = np.clip(_resize_array(item.values, out_h, out_w, mode), 0.0, 1.0)
        return ProbabilityMap(values, source_size=item.source_size)

    values = np.asarray(item)
    if values.ndim not in (2, 3):
        raise ShapeError("rank", "2 or 3", values.ndim, "resize")
    return _resize_array(values, out_h, out_w, mode)


def overlay(image: np.ndarray, mask: BinaryMask, alpha: float = 0.45) -> np.ndarray:
    """(H, W, 3) uint8 image with the mask tinted over it."""
    if image.shape[1:] != mask.shape:
        raise ShapeError("size", image.shape[1:], mask.shape, "overlay")
    rgb = to_rgb_bytes(image).astype(np.float64)
    rgb[mask.bits] = (1.0 - alpha) * rgb[mask.bits] + alpha * OVERLAY_TINT
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def save_overlay(path, image: np.ndarray, mask: BinaryMask) -> str:
    Image.fromarray(overlay(image, mask)).save(path, format="PNG")
    return os.fspath(path)
