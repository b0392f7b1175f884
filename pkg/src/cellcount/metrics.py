"""Three-tier assessment: segmentation F1, detection F1, counting error.

Matching is maximum-cardinality one-to-one assignment over admissible pairs
(IoU strictly above 0.4 for segmentation, center distance strictly below
40 px for detection), solved with the Hungarian algorithm on a profit matrix
where any admissible pair outweighs every possible tie-break term. Among
maximum matchings, segmentation prefers the largest total IoU and detection
the smallest total distance.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .postproc import LabeledObjects, PostprocConfig, count_mask

logger = logging.getLogger(__name__)

IOU_THRESHOLD = 0.4
DIST_THRESHOLD_PX = 40.0


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (pred_id, true_id), 1-based labels
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_pairs(cls, pairs, n_pred: int, n_true: int) -> "MatchResult":
        tp = len(pairs)
        return cls(pairs=sorted(pairs), tp=tp, fp=n_pred - tp, fn=n_true - tp)


def iou_matrix(pred: LabeledObjects, truth: LabeledObjects) -> np.ndarray:
    """Pairwise IoU between pred and truth objects via a joint label histogram."""
    if pred.label_map.shape != truth.label_map.shape:
        raise ValueError(
            f"label map dims differ: {pred.label_map.shape} vs {truth.label_map.shape}"
        )
    np_, nt = pred.count, truth.count
    if np_ == 0 or nt == 0:
        return np.zeros((np_, nt))
    joint = np.zeros((np_ + 1, nt + 1), dtype=np.int64)
    np.add.at(joint, (pred.label_map.ravel(), truth.label_map.ravel()), 1)
    inter = joint[1:, 1:].astype(np.float64)
    pred_areas = np.asarray(pred.areas_px, dtype=np.float64)[:, None]
    true_areas = np.asarray(truth.areas_px, dtype=np.float64)[None, :]
    union = pred_areas + true_areas - inter
    return inter / np.maximum(union, 1.0)


def match_segmentation(
    pred: LabeledObjects, truth: LabeledObjects, iou_thr: float = IOU_THRESHOLD
) -> MatchResult:
    """Maximum matching over pairs with IoU strictly greater than iou_thr."""
    iou = iou_matrix(pred, truth)
    admissible = iou > iou_thr
    pairs = _max_matching(admissible, score=iou, maximize_score=True)
    return MatchResult.from_pairs(pairs, pred.count, truth.count)


def match_detection(
    pred_centroids, true_centroids, dist_thr_px: float = DIST_THRESHOLD_PX
) -> MatchResult:
    """Maximum matching over pairs with center distance strictly below dist_thr_px."""
    pred = np.asarray(pred_centroids, dtype=np.float64).reshape(-1, 2)
    true = np.asarray(true_centroids, dtype=np.float64).reshape(-1, 2)
    if len(pred) == 0 or len(true) == 0:
        return MatchResult.from_pairs([], len(pred), len(true))
    dist = np.linalg.norm(pred[:, None, :] - true[None, :, :], axis=2)
    admissible = dist < dist_thr_px
    pairs = _max_matching(admissible, score=dist, maximize_score=False)
    return MatchResult.from_pairs(pairs, len(pred), len(true))


def _max_matching(admissible: np.ndarray, score: np.ndarray, maximize_score: bool):
    """Hungarian assignment: cardinality first, then the score tie-break.

    Each admissible pair earns a base profit larger than the sum of all
    tie-break terms, so any extra matched pair beats any score improvement.
    """
    if admissible.size == 0 or not admissible.any():
        return []
    if maximize_score:
        tiebreak = score
    else:
        tiebreak = score.max() + 1.0 - score
    base = float(tiebreak.max()) * (sum(admissible.shape) + 2) + 1.0
    profit = np.where(admissible, base + tiebreak, 0.0)
    rows, cols = linear_sum_assignment(profit, maximize=True)
    return [(int(r) + 1, int(c) + 1) for r, c in zip(rows, cols) if admissible[r, c]]


def f1(tp: int, fp: int, fn: int) -> float:
    """2tp / (2tp + fp + fn); empty-vs-empty counts as a perfect 1.0."""
    if tp < 0 or fp < 0 or fn < 0:
        raise ValueError("counts must be nonnegative")
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0
    return 2.0 * tp / denom


def counting_error(per_image: list[dict]) -> dict:
    """Signed mean percentage error and MAPE over images with true_count > 0.

    Images with true_count == 0 are excluded from the averages and reported
    under n_excluded_zero_truth.
    """
    errors = [
        100.0 * (row["pred_count"] - row["true_count"]) / row["true_count"]
        for row in per_image
        if row["true_count"] > 0
    ]
    n_excluded = len(per_image) - len(errors)
    if not errors:
        logger.warning("counting error undefined: every image has true_count 0")
        return {"mpe_signed": None, "mape": None, "n_excluded_zero_truth": n_excluded}
    return {
        "mpe_signed": float(np.mean(errors)),
        "mape": float(np.mean(np.abs(errors))),
        "n_excluded_zero_truth": n_excluded,
    }


@dataclass
class EvalReport:
    per_image: list[dict]
    aggregate: dict
    thresholds: dict = field(
        default_factory=lambda: {"iou_thr": IOU_THRESHOLD, "dist_thr_px": DIST_THRESHOLD_PX}
    )
    postproc: dict = field(default_factory=lambda: PostprocConfig().to_dict())
    conventions: dict = field(default_factory=lambda: {"empty_vs_empty_f1": 1.0})

    def to_dict(self) -> dict:
        return {
            "per_image": self.per_image,
            "aggregate": self.aggregate,
            "thresholds": self.thresholds,
            "postproc": self.postproc,
            "conventions": self.conventions,
        }

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: Path) -> "EvalReport":
        raw = json.loads(Path(path).read_text())
        return cls(
            per_image=raw["per_image"],
            aggregate=raw["aggregate"],
            thresholds=raw["thresholds"],
            postproc=raw["postproc"],
            conventions=raw.get("conventions", {}),
        )


def evaluate(
    predict_logits,
    samples,
    postproc_cfg: PostprocConfig | None = None,
    iou_thr: float = IOU_THRESHOLD,
    dist_thr_px: float = DIST_THRESHOLD_PX,
) -> EvalReport:
    """Run inference + postproc + all three tiers over samples.

    predict_logits: callable mapping a Sample image (H, W, 3 in [0, 1]) to a
    (H, W) logit map at native resolution. Per-image failures are recorded
    without aborting the batch; aggregate F1 pools TP/FP/FN across images.
    """
    from .postproc import count_cells  # local import keeps module load light

    postproc_cfg = postproc_cfg or PostprocConfig()
    per_image = []
    seg_pool = {"tp": 0, "fp": 0, "fn": 0}
    det_pool = {"tp": 0, "fp": 0, "fn": 0}
    for sample in samples:
        try:
            logits = predict_logits(sample.image)
            pred = count_cells(logits, postproc_cfg)
            truth = count_mask(sample.mask, postproc_cfg)
            seg = match_segmentation(pred, truth, iou_thr)
            det = match_detection(pred.centroids, truth.centroids, dist_thr_px)
        except Exception as exc:  # keep evaluating the rest of the batch
            logger.error("evaluation failed for %s: %s", sample.image_id, exc)
            per_image.append({"image_id": sample.image_id, "error": str(exc)})
            continue
        for pool, res in ((seg_pool, seg), (det_pool, det)):
            pool["tp"] += res.tp
            pool["fp"] += res.fp
            pool["fn"] += res.fn
        row = {
            "image_id": sample.image_id,
            "seg_f1": f1(seg.tp, seg.fp, seg.fn),
            "det_f1": f1(det.tp, det.fp, det.fn),
            "pred_count": pred.count,
            "true_count": truth.count,
        }
        row["pct_error"] = (
            100.0 * (pred.count - truth.count) / truth.count if truth.count > 0 else None
        )
        per_image.append(row)

    ok_rows = [r for r in per_image if "error" not in r]
    aggregate = {
        "seg_f1": f1(seg_pool["tp"], seg_pool["fp"], seg_pool["fn"]),
        "det_f1": f1(det_pool["tp"], det_pool["fp"], det_pool["fn"]),
        "n_images": len(per_image),
        "n_failed": len(per_image) - len(ok_rows),
        **counting_error(ok_rows),
    }
    return EvalReport(
        per_image=per_image,
        aggregate=aggregate,
        thresholds={"iou_thr": iou_thr, "dist_thr_px": dist_thr_px},
        postproc=postproc_cfg.to_dict(),
    )
