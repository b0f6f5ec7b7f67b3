"""
Metrics - OKS average precision/recall and PCK in the original image frame.

Ground-truth-box protocol: exactly one prediction per ground-truth instance,
so AP at a threshold is the fraction of instances whose OKS reaches it.
"""

import csv
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from kitpose.errors import EvaluationError
from kitpose.resource_manager import PathLike, SafeFileWriter, write_json

logger = logging.getLogger(__name__)

COCO_SIGMAS = np.array(
    [0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72, 0.62, 0.62, 1.07, 1.07, 0.87, 0.87, 0.89, 0.89]
) / 10.0
COCO_MEAN_SIGMA = 0.079
OKS_THRESHOLDS = np.round(np.arange(0.50, 0.951, 0.05), 2)
MEDIUM_AREA = (32.0 ** 2, 96.0 ** 2)


def default_k_constants(n_keypoints: int) -> np.ndarray:
    """k_i = 2 * sigma_i: the COCO values for 17 keypoints, their mean otherwise."""
    if n_keypoints == len(COCO_SIGMAS):
        return 2.0 * COCO_SIGMAS
    return np.full(n_keypoints, 2.0 * COCO_MEAN_SIGMA)


@dataclass
class EvalRecord:
    """One instance: predictions [N, 3] (x, y, score) against ground truth [N, 2]."""

    instance_id: str
    pred: np.ndarray
    gt: np.ndarray
    visibility: np.ndarray
    bbox: tuple
    area: float
    k_consts: np.ndarray

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.float64)
        self.gt = np.asarray(self.gt, dtype=np.float64)
        self.visibility = np.asarray(self.visibility)
        self.k_consts = np.asarray(self.k_consts, dtype=np.float64)
        if not self.area > 0:
            raise EvaluationError(f"{self.instance_id}: area must be positive, got {self.area}")
        if np.any(self.k_consts <= 0):
            raise EvaluationError(f"{self.instance_id}: OKS constants must be positive")

    @classmethod
    def from_instance(cls, inst, pred: np.ndarray, k_consts: Optional[np.ndarray] = None) -> "EvalRecord":
        """Pair predictions (already in the instance's frame) with its annotation."""
        k = default_k_constants(inst.n_keypoints) if k_consts is None else k_consts
        return cls(inst.instance_id, pred, inst.keypoints, inst.visibility, inst.bbox, inst.eval_area, k)


def oks(pred, gt, vis, area: float, k_consts) -> float:
    """
    Mean over labeled keypoints of exp(-d^2 / (2 * area * k^2)).

    Example:
        >>> oks([[0, 0]], [[0, 0]], [2], 100.0, [0.1])
        1.0
    """
    pred = np.asarray(pred, dtype=np.float64)[..., :2]
    gt = np.asarray(gt, dtype=np.float64)
    labeled = np.asarray(vis) > 0
    if not np.any(labeled):
        raise EvaluationError("OKS needs at least one labeled keypoint")
    if not area > 0:
        raise EvaluationError(f"OKS needs a positive area, got {area}")
    k = np.asarray(k_consts, dtype=np.float64)
    d2 = np.sum((pred - gt) ** 2, axis=-1)
    e = d2 / (2.0 * area * k ** 2)
    return float(np.mean(np.exp(-e[labeled])))


def record_oks(rec: EvalRecord) -> float:
    return oks(rec.pred, rec.gt, rec.visibility, rec.area, rec.k_consts)


def _precision_at(scores: np.ndarray, thresholds: Sequence[float]) -> float:
    if scores.size == 0:
        return -1.0
    return float(np.mean([np.mean(scores >= t) for t in thresholds]))


def ap_ar(records: Sequence[EvalRecord], thresholds: Optional[Sequence[float]] = None) -> dict:
    """
    AP / AP50 / AP75 / APM / APL / AR over the OKS threshold sweep.

    APM covers areas in [32^2, 96^2), APL areas >= 96^2; a size bucket without
    instances reports -1. Records without labeled keypoints are ignored.
    """
    if not records:
        raise EvaluationError("ap_ar needs at least one record")
    thresholds = OKS_THRESHOLDS if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    kept = [r for r in records if np.any(np.asarray(r.visibility) > 0)]
    if not kept:
        raise EvaluationError("no record has a labeled keypoint")
    scores = np.array([record_oks(r) for r in kept])
    areas = np.array([r.area for r in kept])
    medium = (areas >= MEDIUM_AREA[0]) & (areas < MEDIUM_AREA[1])
    large = areas >= MEDIUM_AREA[1]

    ap = _precision_at(scores, thresholds)
    return {
        "AP": ap,
        "AP50": _precision_at(scores, [0.5]),
        "AP75": _precision_at(scores, [0.75]),
        "APM": _precision_at(scores[medium], thresholds),
        "APL": _precision_at(scores[large], thresholds),
        # one prediction per ground truth: recall and precision coincide
        "AR": ap,
    }


def _hits(rec: EvalRecord, alpha: float) -> tuple:
    labeled = np.asarray(rec.visibility) > 0
    limit = alpha * max(rec.bbox[2], rec.bbox[3])
    dist = np.hypot(*(rec.pred[:, :2] - rec.gt).T)
    return labeled, labeled & (dist <= limit)


def pck(records: Sequence[EvalRecord], alpha: float = 0.05) -> float:
    """Fraction of labeled keypoints within alpha * longest box side (inclusive)."""
    if not records:
        raise EvaluationError("pck needs at least one record")
    if not alpha > 0:
        raise EvaluationError(f"alpha must be positive, got {alpha}")
    total = correct = 0
    for rec in records:
        labeled, hit = _hits(rec, alpha)
        total += int(labeled.sum())
        correct += int(hit.sum())
    if total == 0:
        raise EvaluationError("no labeled keypoints to score")
    return correct / total


def per_keypoint_pck(records: Sequence[EvalRecord], alpha: float = 0.05) -> List[Optional[float]]:
    """PCK per keypoint index; None for keypoints never labeled."""
    if not records:
        raise EvaluationError("per_keypoint_pck needs at least one record")
    n = len(records[0].gt)
    labeled_count, hit_count = np.zeros(n), np.zeros(n)
    for rec in records:
        labeled, hit = _hits(rec, alpha)
        labeled_count += labeled
        hit_count += hit
    return [float(h / c) if c else None for h, c in zip(hit_count, labeled_count)]


def summarize(records: Sequence[EvalRecord], alpha: float = 0.05) -> dict:
    """Every metric the results file carries."""
    stats = ap_ar(records)
    stats["PCK05"] = pck(records, alpha)
    stats["per_keypoint_pck"] = per_keypoint_pck(records, alpha)
    return stats


def write_results(path: PathLike, stats: dict, config_hash: str) -> None:
    payload = {"config_hash": config_hash}
    payload.update(stats)
    write_json(path, payload)


def write_per_keypoint_csv(path: PathLike, names: Sequence[str], values: Sequence[Optional[float]]) -> None:
    with SafeFileWriter(path) as f:
        writer = csv.writer(f)
        writer.writerow(["kpt_id", "name", "pck"])
        for i, (name, value) in enumerate(zip(names, values)):
            writer.writerow([i, name, "" if value is None else f"{value:.6f}"])
