"""Evaluation metrics for moment retrieval and highlight detection.

Everything here is pure numpy over the interchange representations: per-query
moment predictions as (center, width, confidence) rows and per-clip saliency
scores. Rankings break confidence ties by earlier start, then smaller width,
then original order, so reports are deterministic and permutation-stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
VERY_GOOD_LEVEL = 4.0


def interval_iou(a, b) -> float:
    """IoU of two (start, end) intervals; 0 when disjoint."""
    a_start, a_end = float(a[0]), float(a[1])
    b_start, b_end = float(b[0]), float(b[1])
    inter = max(0.0, min(a_end, b_end) - max(a_start, b_start))
    union = (a_end - a_start) + (b_end - b_start) - inter
    if union <= 0:
        raise ValueError("IoU undefined: both intervals have zero length")
    return inter / union


def cw_to_se_np(spans: np.ndarray) -> np.ndarray:
    c, w = spans[..., 0], spans[..., 1]
    return np.stack([c - w / 2, c + w / 2], axis=-1)


def rank_predictions(preds: np.ndarray) -> np.ndarray:
    """Sort (m, 3) rows of (center, width, confidence) best-first.

    Descending confidence; ties by earlier start, then smaller width, then
    input order (stable).
    """
    if preds.size == 0:
        return preds.reshape(0, 3)
    start = preds[:, 0] - preds[:, 1] / 2
    order = np.lexsort((preds[:, 1], start, -preds[:, 2]))
    return preds[order]


def recall_at_1(preds: np.ndarray, gts: np.ndarray, threshold: float) -> float:
    """1.0 iff the top-confidence prediction overlaps any GT at IoU >= threshold."""
    if len(preds) == 0 or len(gts) == 0:
        return 0.0
    top = cw_to_se_np(rank_predictions(preds)[0, :2])
    gt_se = cw_to_se_np(gts)
    return 1.0 if any(interval_iou(top, g) >= threshold for g in gt_se) else 0.0


def _ap_from_pr(precision: np.ndarray, recall: np.ndarray) -> float:
    """All-points interpolated area under the precision-recall curve."""
    mprec = np.hstack([[0.0], precision, [0.0]])
    mrec = np.hstack([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def average_precision(preds: np.ndarray, gts: np.ndarray, threshold: float) -> float:
    """AP for one query: confidence-ranked greedy matching against unmatched GTs."""
    n_gt = len(gts)
    if n_gt == 0:
        raise ValueError("average_precision needs at least one ground-truth span")
    if len(preds) == 0:
        return 0.0
    ranked = rank_predictions(preds)
    pred_se = cw_to_se_np(ranked[:, :2])
    gt_se = cw_to_se_np(np.asarray(gts, dtype=np.float64))

    matched = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(len(ranked))
    for i, p in enumerate(pred_se):
        best_j, best_iou = -1, threshold
        for j, g in enumerate(gt_se):
            if matched[j]:
                continue
            iou = interval_iou(p, g)
            if iou >= best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0:
            matched[best_j] = True
            tp[i] = 1.0
    tp_cum = np.cumsum(tp)
    precision = tp_cum / np.arange(1, len(ranked) + 1)
    recall = tp_cum / n_gt
    return _ap_from_pr(precision, recall)


def map_at_threshold(pred_list: list[np.ndarray], gt_list: list[np.ndarray], threshold: float) -> float:
    """Mean AP over queries that have ground truth."""
    aps = [
        average_precision(p, g, threshold)
        for p, g in zip(pred_list, gt_list)
        if len(g) > 0
    ]
    return float(np.mean(aps)) if aps else 0.0


def map_series(pred_list: list[np.ndarray], gt_list: list[np.ndarray]) -> tuple[dict[float, float], float]:
    per_threshold = {t: map_at_threshold(pred_list, gt_list, t) for t in MAP_THRESHOLDS}
    return per_threshold, float(np.mean(list(per_threshold.values())))


def mean_iou(pred_list: list[np.ndarray], gt_list: list[np.ndarray]) -> float:
    """Mean over queries of the top prediction's best IoU against the GTs."""
    vals = []
    for preds, gts in zip(pred_list, gt_list):
        if len(gts) == 0:
            continue
        if len(preds) == 0:
            vals.append(0.0)
            continue
        top = cw_to_se_np(rank_predictions(preds)[0, :2])
        vals.append(max(interval_iou(top, g) for g in cw_to_se_np(gts)))
    return float(np.mean(vals)) if vals else 0.0


def rank_clips(pred_saliency: np.ndarray) -> np.ndarray:
    """Clip indices best-first; ties keep the earlier clip first."""
    return np.lexsort((np.arange(len(pred_saliency)), -pred_saliency))


def hd_metrics(
    pred_saliency: np.ndarray,
    gt_saliency: np.ndarray,
    very_good_level: float = VERY_GOOD_LEVEL,
) -> tuple[float | None, float]:
    """(AP of relevance-ranked clips or None if nothing is relevant, HIT@1)."""
    if len(pred_saliency) != len(gt_saliency):
        raise ValueError("saliency length mismatch")
    relevant = np.asarray(gt_saliency, dtype=np.float64) >= very_good_level
    order = rank_clips(np.asarray(pred_saliency, dtype=np.float64))
    hits = relevant[order].astype(np.float64)
    hit_at_1 = float(hits[0]) if len(hits) else 0.0
    n_rel = int(relevant.sum())
    if n_rel == 0:
        return None, 0.0
    tp_cum = np.cumsum(hits)
    precision = tp_cum / np.arange(1, len(hits) + 1)
    recall = tp_cum / n_rel
    return _ap_from_pr(precision, recall), hit_at_1


@dataclass
class EvalReport:
    r1_at: dict[float, float]
    map_at: dict[float, float]
    map_avg: float
    miou: float
    hd_map: float
    hit_at_1: float
    num_queries: int
    per_query: list[dict] = field(default_factory=list)

    def validate(self) -> None:
        rates = list(self.r1_at.values()) + list(self.map_at.values())
        rates += [self.map_avg, self.miou, self.hd_map, self.hit_at_1]
        if any(r < -1e-9 or r > 1 + 1e-9 for r in rates):
            raise ValueError("metric rates must lie in [0, 1]")

    def to_json(self) -> str:
        payload = {
            "r1_at": {f"{k:g}": v for k, v in self.r1_at.items()},
            "map_at": {f"{k:g}": v for k, v in self.map_at.items()},
            "map_avg": self.map_avg,
            "miou": self.miou,
            "hd_map": self.hd_map,
            "hit_at_1": self.hit_at_1,
            "num_queries": self.num_queries,
            "per_query": self.per_query,
        }
        return json.dumps(payload, indent=2)


def evaluate(
    samples,
    predictions: dict[str, dict],
    r1_thresholds=(0.5, 0.7),
    map_report_thresholds=(0.5, 0.75),
    very_good_level: float = VERY_GOOD_LEVEL,
    with_per_query: bool = False,
) -> EvalReport:
    """Score a prediction set against annotated samples.

    samples: an iterable of data_model.Sample; predictions: id -> record with
    pred_moments [[center, width, confidence]] and pred_saliency (valid clips,
    in temporal order).
    """
    pred_list, gt_list = [], []
    hd_aps, hits = [], []
    per_query = []
    for s in samples:
        if s.id not in predictions:
            raise KeyError(f"no prediction for sample {s.id!r}")
        rec = predictions[s.id]
        preds = np.asarray(rec["pred_moments"], dtype=np.float64).reshape(-1, 3)
        gts = np.asarray(
            [[m.center, m.width] for m in s.annotation.gt_moments], dtype=np.float64
        ).reshape(-1, 2)
        pred_list.append(preds)
        gt_list.append(gts)

        sal_pred = np.asarray(rec.get("pred_saliency", []), dtype=np.float64)
        valid = s.bundle.video_mask
        sal_gt = np.asarray(s.annotation.saliency, dtype=np.float64)[valid]
        if len(sal_pred) != len(sal_gt):
            raise ValueError(f"sample {s.id!r}: saliency length mismatch")
        ap, hit = hd_metrics(sal_pred, sal_gt, very_good_level)
        if ap is not None:
            hd_aps.append(ap)
        hits.append(hit)
        if with_per_query:
            per_query.append(
                {
                    "id": s.id,
                    "r1_0.5": recall_at_1(preds, gts, 0.5),
                    "hd_ap": ap,
                    "hit_at_1": hit,
                }
            )

    series, map_avg = map_series(pred_list, gt_list)
    report = EvalReport(
        r1_at={t: float(np.mean([recall_at_1(p, g, t) for p, g in zip(pred_list, gt_list)]))
               for t in r1_thresholds},
        map_at={t: series.get(t, map_at_threshold(pred_list, gt_list, t))
                for t in map_report_thresholds},
        map_avg=map_avg,
        miou=mean_iou(pred_list, gt_list),
        hd_map=float(np.mean(hd_aps)) if hd_aps else 0.0,
        hit_at_1=float(np.mean(hits)) if hits else 0.0,
        num_queries=len(pred_list),
        per_query=per_query,
    )
    report.validate()
    return report


def save_report(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
