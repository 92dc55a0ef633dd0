import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, Hashable, Mapping, Sequence

import numpy as np

from .attention import iou

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)


@dataclass
class Prediction:
    image: Hashable
    mask: np.ndarray
    score: float


@dataclass
class APReport:
    """ Single-class average precision; ``ap`` is the mean over IOU_THRESHOLDS """
    ap50: float
    ap75: float
    ap: float
    per_threshold: Dict[str, float] = field(default_factory=dict)
    undefined: bool = False

    def to_dict(self) -> Dict:
        return {"ap50": self.ap50, "ap75": self.ap75, "ap": self.ap}


def _match(
    predictions: Sequence[Prediction], ground_truth: Mapping[Hashable, Sequence[np.ndarray]], threshold: float
) -> np.ndarray:
    """ Greedy matching by descending score; returns the true-positive flag of each prediction in that order """
    matched = {image: np.zeros(len(masks), dtype=bool) for image, masks in ground_truth.items()}
    hits = np.zeros(len(predictions), dtype=bool)
    for rank, prediction in enumerate(predictions):
        targets = ground_truth.get(prediction.image, [])
        best, best_iou = -1, -1.0
        for index, target in enumerate(targets):
            if matched[prediction.image][index]:
                continue
            overlap = iou(prediction.mask, target)
            if overlap >= threshold and overlap > best_iou:
                best, best_iou = index, overlap
        if best >= 0:
            matched[prediction.image][best] = True
            hits[rank] = True
    return hits


def precision_recall_area(hits: np.ndarray, num_ground_truth: int) -> float:
    """ Area under the precision-recall step curve with the monotone precision envelope """
    if hits.size == 0:
        return 0.0
    true_positives = np.cumsum(hits)
    precision = true_positives / np.arange(1, hits.size + 1)
    recall = true_positives / num_ground_truth
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    previous = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - previous) * envelope))


def average_precision(
    predictions: Sequence[Prediction],
    ground_truth: Mapping[Hashable, Sequence[np.ndarray]],
    thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> APReport:
    """
    Class-agnostic mask AP.

    Parameters
    ----------
    predictions : sequence of Prediction
        Masks with finite scores, each tagged with the image it belongs to.
    ground_truth : mapping
        Image key to the list of ground-truth masks of that image.
    thresholds : sequence of float
        IoU thresholds; 0.5 and 0.75 must be among them for ap50 / ap75.
    """
    scores = np.array([p.score for p in predictions], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("Prediction scores must be finite")
    num_ground_truth = sum(len(masks) for masks in ground_truth.values())
    if num_ground_truth == 0:
        warnings.warn("No ground-truth masks: average precision is undefined")
        nan = float("nan")
        return APReport(nan, nan, nan, undefined=True)

    order = np.argsort(-scores, kind="stable")
    ranked = [predictions[i] for i in order]
    per_threshold = {}
    for threshold in thresholds:
        hits = _match(ranked, ground_truth, threshold)
        per_threshold[f"{threshold:.2f}"] = precision_recall_area(hits, num_ground_truth)
    return APReport(
        ap50=per_threshold.get("0.50", float("nan")),
        ap75=per_threshold.get("0.75", float("nan")),
        ap=float(np.mean(list(per_threshold.values()))),
        per_threshold=per_threshold,
    )
