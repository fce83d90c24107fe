## analytics/dataset.py

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd

from analytics import imaging
from lesionseg.settings import IMAGE_EXTENSIONS
from segmentation.exceptions import DatasetError, PreconditionError
from segmentation.maps import BinaryMask
from segmentation.network.config import POOL_FACTOR

logger = logging.getLogger(__name__)

TRUTH_SUFFIX = "_segmentation"
PROB_SUFFIX = "_prob"
OVERLAY_SUFFIX = "_overlay"
DERIVED_SUFFIXES = (TRUTH_SUFFIX, PROB_SUFFIX, OVERLAY_SUFFIX)
ELLIPSES_CSV = "ellipses.csv"


def truth_name(stem: str) -> str:
    return f"{stem}{TRUTH_SUFFIX}.png"


def prob_name(stem: str) -> str:
    return f"{stem}{PROB_SUFFIX}.png"


def overlay_name(stem: str) -> str:
    return f"{stem}{OVERLAY_SUFFIX}.png"


def _is_source_image(path: Path) -> bool:
    if path.suffix.lower() not in [ext.lower() for ext in IMAGE_EXTENSIONS]:
        return False
    return not path.stem.endswith(DERIVED_SUFFIXES)


@dataclass
class DatasetIndex:
    """Images paired with optional truth masks by shared stem.

    ``frame`` has one row per image, indexed by stem and sorted, with columns
    ``image_path`` and ``truth_path`` (None when no truth exists).
    """

    frame: pd.DataFrame

    @classmethod
    def scan(cls, image_dir, truth_dir=None) -> "DatasetIndex":
        image_dir = Path(image_dir)
        truth_dir = Path(truth_dir) if truth_dir else image_dir
        if not image_dir.is_dir():
            raise DatasetError(f"Image directory {image_dir} does not exist")

        rows = []
        for path in sorted(image_dir.iterdir()):
            if not path.is_file() or not _is_source_image(path):
                continue
            truth = truth_dir / truth_name(path.stem)
            rows.append(
                {
                    "stem": path.stem,
                    "image_path": os.fspath(path),
                    "truth_path": os.fspath(truth) if truth.is_file() else None,
                }
            )

        frame = pd.DataFrame(rows, columns=["stem", "image_path", "truth_path"])
        duplicates = sorted(set(frame["stem"][frame["stem"].duplicated()]))
        if duplicates:
            raise DatasetError("Duplicate image stems", duplicates)

        logger.debug(f"Indexed {len(frame)} images in {image_dir}")
        return cls(frame.set_index("stem").sort_index())

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def stems(self) -> List[str]:
        return list(self.frame.index)

    def pairs(self) -> Iterator[Tuple[str, str, Optional[str]]]:
        for stem, row in self.frame.iterrows():
            yield stem, row["image_path"], row["truth_path"]

    def require_truth(self) -> "DatasetIndex":
        missing = [stem for stem, _, truth in self.pairs() if truth is None]
        if missing:
            raise DatasetError("Missing truth masks", missing)
        return self


def ellipse_mask(size: int, cx: float, cy: float, a: float, b: float, angle: float) -> BinaryMask:
    """Pixel centers (x, y) inside the rotated ellipse."""
    ys, xs = np.mgrid[:size, :size].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    cos, sin = math.cos(angle), math.sin(angle)
    u = (dx * cos + dy * sin) / a
    v = (-dx * sin + dy * cos) / b
    return BinaryMask(u * u + v * v <= 1.0)


def generate_synthetic_dataset(n: int, size: int, seed: int, out_dir) -> DatasetIndex:
    """Bright textured ellipses on darker textured skin, with exact masks.

    Writes ``synth_XXXX.png`` images, ``synth_XXXX_segmentation.png`` truths
    and ``ellipses.csv`` with the shape parameters. Output depends only on the
    arguments.
    """
    if n < 1:
        raise PreconditionError(f"n must be >= 1, got {n}")
    if size < POOL_FACTOR or size % POOL_FACTOR:
        raise PreconditionError(f"size must be a positive multiple of {POOL_FACTOR}, got {size}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    records = []
    for i in range(n):
        stem = f"synth_{i:04d}"
        cx, cy = size / 2 + rng.uniform(-0.12, 0.12, size=2) * size
        a, b = rng.uniform(0.14, 0.3, size=2) * size
        angle = rng.uniform(0.0, math.pi)
        mask = ellipse_mask(size, cx, cy, a, b, angle)

        skin = rng.uniform(50, 100, size=3)
        lesion = rng.uniform(170, 235, size=3)
        rgb = skin + rng.normal(0.0, 10.0, size=(size, size, 3))
        rgb[mask.bits] = lesion + rng.normal(0.0, 10.0, size=(mask.area, 3))
        image = np.clip(rgb, 0, 255).transpose(2, 0, 1) / 255.0

        imaging.save_image(out_dir / f"{stem}.png", image)
        imaging.save_mask(out_dir / truth_name(stem), mask)
        records.append({"stem": stem, "cx": cx, "cy": cy, "a": a, "b": b, "angle": angle})

    pd.DataFrame(records).to_csv(out_dir / ELLIPSES_CSV, index=False)
    logger.info(f"Wrote {n} synthetic {size}x{size} samples to {out_dir}")
    return DatasetIndex.scan(out_dir)
