## analytics/metrics.py

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd

from analytics import imaging
from analytics.dataset import TRUTH_SUFFIX, truth_name
from segmentation.exceptions import DatasetError, ShapeError
from segmentation.maps import BinaryMask

logger = logging.getLogger(__name__)

JACCARD_CUTOFF = 0.65


def _overlap(pred: BinaryMask, truth: BinaryMask):
    if pred.shape != truth.shape:
        raise ShapeError("mask size", truth.shape, pred.shape, "metrics")
    inter = int(np.count_nonzero(pred.bits & truth.bits))
    union = int(np.count_nonzero(pred.bits | truth.bits))
    return inter, union


def jaccard(pred: BinaryMask, truth: BinaryMask) -> float:
    """|pred & truth| / |pred | truth|; two empty masks agree perfectly (1.0)."""
    inter, union = _overlap(pred, truth)
    return 1.0 if union == 0 else inter / union


def dice(pred: BinaryMask, truth: BinaryMask) -> float:
    inter, _ = _overlap(pred, truth)
    total = pred.area + truth.area
    return 1.0 if total == 0 else 2.0 * inter / total


@dataclass
class MetricsReport:
    """Per-image Jaccard and Dice indexed by stem.

    The headline number is the plain mean Jaccard. The thresholded mean
    zeroes every score below ``cutoff`` before averaging.
    """

    frame: pd.DataFrame
    cutoff: float = JACCARD_CUTOFF

    @classmethod
    def from_scores(cls, scores: Dict[str, Dict[str, float]], cutoff: float = JACCARD_CUTOFF):
        frame = pd.DataFrame.from_dict(scores, orient="index", columns=["jaccard", "dice"])
        frame.index.name = "stem"
        return cls(frame.sort_index(), cutoff)

    @property
    def count(self) -> int:
        return len(self.frame)

    @property
    def mean_jaccard(self) -> float:
        return float(self.frame["jaccard"].mean())

    @property
    def mean_dice(self) -> float:
        return float(self.frame["dice"].mean())

    @property
    def thresholded_mean(self) -> float:
        scores = self.frame["jaccard"]
        return float(scores.where(scores >= self.cutoff, 0.0).mean())

    def _summary(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {"stem": "mean", "jaccard": self.mean_jaccard, "dice": self.mean_dice},
                {"stem": "thresholded_mean", "jaccard": self.thresholded_mean, "dice": None},
                {"stem": "count", "jaccard": str(self.count), "dice": None},
            ],
            dtype=object,
        )

    def to_csv(self, path=None) -> str:
        """``stem,jaccard,dice`` rows followed by the summary rows."""
        rows = self.frame.reset_index().astype(object)
        text = pd.concat([rows, self._summary()], ignore_index=True).to_csv(
            index=False, lineterminator="\n"
        )
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_table(self) -> str:
        lines = [self.frame.to_string(float_format="{:.4f}".format), ""]
        lines.append(f"mean jaccard       {self.mean_jaccard:.4f}")
        lines.append(f"mean dice          {self.mean_dice:.4f}")
        lines.append(f"thresholded mean   {self.thresholded_mean:.4f} (cutoff {self.cutoff})")
        lines.append(f"count              {self.count}")
        return "\n".join(lines)


def _score_pair(pred_path: Path, truth_path: Path) -> Dict[str, float]:
    pred, truth = imaging.load_mask(pred_path), imaging.load_mask(truth_path)
    return {"jaccard": jaccard(pred, truth), "dice": dice(pred, truth)}


def prediction_stems(pred_dir) -> List[str]:
    suffix = f"{TRUTH_SUFFIX}.png"
    return sorted(p.name[: -len(suffix)] for p in Path(pred_dir).glob(f"*{suffix}"))


def evaluate_dataset(pred_dir, truth_dir, workers: int = 1) -> MetricsReport:
    """Score every ``<stem>_segmentation.png`` in pred_dir against truth_dir."""
    pred_dir, truth_dir = Path(pred_dir), Path(truth_dir)
    stems = prediction_stems(pred_dir)
    if not stems:
        raise DatasetError(f"Nothing to score in {pred_dir}")

    missing = [s for s in stems if not (truth_dir / truth_name(s)).is_file()]
    if missing:
        raise DatasetError("Missing truth for predictions", missing)

    jobs = [(pred_dir / truth_name(s), truth_dir / truth_name(s)) for s in stems]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(lambda job: _score_pair(*job), jobs))

    report = MetricsReport.from_scores(dict(zip(stems, results)))
    logger.info(
        f"Evaluated {report.count} images: mean jaccard {report.mean_jaccard:.4f}, "
        f"thresholded {report.thresholded_mean:.4f}"
    )
    return report
