"""Recall@n, average precision, mAP and the frame-probability alignment gap."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError
from .temporal import iou_matrix

log = logging.getLogger(__name__)

DEFAULT_MAP_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
DEFAULT_RECALL_KEYS = ((1, 0.3), (1, 0.5), (1, 0.7), (5, 0.5), (5, 0.7))


def rank_predictions(scores: Sequence[float], spans: np.ndarray) -> np.ndarray:
    """Spans sorted by score, descending; ties keep prediction order."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return np.asarray(spans, dtype=np.float64).reshape(-1, 2)[order]


def recall_at(n: int, threshold: float, ranked: Sequence[np.ndarray], gts: Sequence) -> float:
    """Fraction of queries whose top-n ranked spans include one with IoU >= threshold."""
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    if len(ranked) != len(gts):
        raise ContractError(f"{len(ranked)} prediction lists for {len(gts)} ground truths")
    if not ranked:
        return 0.0
    hits = 0
    for preds, gt in zip(ranked, gts):
        preds = np.asarray(preds, dtype=np.float64).reshape(-1, 2)[:n]
        if preds.size == 0:
            continue
        if np.any(iou_matrix(preds, np.asarray(gt, dtype=np.float64).reshape(-1, 2)) >= threshold):
            hits += 1
    return hits / len(ranked)


def average_precision(threshold: float, ranked: np.ndarray, gt_spans) -> float | None:
    """All-point interpolated AP of one ranked list against one or more GT spans.

    Returns None (query skipped) when there is no ground truth.
    """
    gts = np.asarray(gt_spans, dtype=np.float64).reshape(-1, 2)
    if len(gts) == 0:
        log.warning("average_precision: query without ground truth skipped")
        return None
    preds = np.asarray(ranked, dtype=np.float64).reshape(-1, 2)
    if len(preds) == 0:
        return 0.0
    ious = iou_matrix(preds, gts)
    used = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(preds))
    for i in range(len(preds)):
        cand = np.where(~used & (ious[i] >= threshold), ious[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= 0:
            used[j] = True
            tp[i] = 1.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(preds) + 1)
    recall = cum_tp / len(gts)
    # monotone envelope, then area under the step curve
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def mean_ap(ranked: Sequence[np.ndarray], gts: Sequence, thresholds: Sequence[float] = DEFAULT_MAP_GRID) -> tuple[dict[float, float], float]:
    if len(thresholds) == 0:
        raise ContractError("mean_ap needs at least one threshold")
    per = {}
    for t in thresholds:
        aps = [ap for ap in (average_precision(t, r, g) for r, g in zip(ranked, gts)) if ap is not None]
        per[float(t)] = float(np.mean(aps)) if aps else 0.0
    return per, float(np.mean(list(per.values())))


def alignment_gap(probs: Sequence[np.ndarray], inside: Sequence[np.ndarray]) -> tuple[float, float, float]:
    """Mean frame probability inside vs outside the GT, pooled over all frames of all queries."""
    gt_vals, bg_vals = [], []
    for p, m in zip(probs, inside):
        p = np.asarray(p, dtype=np.float64)
        m = np.asarray(m, dtype=bool)
        gt_vals.append(p[m])
        bg_vals.append(p[~m])
    gt = np.concatenate(gt_vals) if gt_vals else np.zeros(0)
    bg = np.concatenate(bg_vals) if bg_vals else np.zeros(0)
    gt_mean = float(gt.mean()) if gt.size else float("nan")
    bg_mean = float(bg.mean()) if bg.size else float("nan")
    return gt_mean, bg_mean, gt_mean - bg_mean


@dataclass
class EvalResult:
    recall: dict[tuple[int, float], float] = field(default_factory=dict)
    map: dict[float, float] = field(default_factory=dict)
    avg_map: float = 0.0
    gt_mean: float = float("nan")
    non_gt_mean: float = float("nan")
    num_queries: int = 0

    @property
    def gap(self) -> float:
        return self.gt_mean - self.non_gt_mean

    def r1(self, threshold: float) -> float:
        return self.recall[(1, threshold)]

    def to_dict(self) -> dict:
        return {
            "num_queries": self.num_queries,
            "recall": {f"R{n}@{t:.2f}": v for (n, t), v in sorted(self.recall.items())},
            "map": {f"mAP@{t:.2f}": v for t, v in sorted(self.map.items())},
            "avg_map": self.avg_map,
            "alignment": {"gt_mean": self.gt_mean, "non_gt_mean": self.non_gt_mean, "gap": self.gap},
        }

    def lines(self) -> list[str]:
        out = [f"queries={self.num_queries}"]
        out += [f"R{n}@{t:.2f}={v:.4f}" for (n, t), v in sorted(self.recall.items())]
        out += [f"mAP@{t:.2f}={v:.4f}" for t, v in sorted(self.map.items()) if t in (0.5, 0.75)]
        out.append(f"mAP_avg={self.avg_map:.4f}")
        out.append(f"align_gt={self.gt_mean:.4f}")
        out.append(f"align_non_gt={self.non_gt_mean:.4f}")
        out.append(f"align_gap={self.gap:.4f}")
        return out


def evaluate_predictions(
    ranked: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    probs: Sequence[np.ndarray] | None = None,
    inside: Sequence[np.ndarray] | None = None,
    recall_keys=DEFAULT_RECALL_KEYS,
    map_grid=DEFAULT_MAP_GRID,
) -> EvalResult:
    res = EvalResult(num_queries=len(ranked))
    for n, t in recall_keys:
        res.recall[(n, float(t))] = recall_at(n, t, ranked, gts)
    grid = sorted(set(map(float, map_grid)) | {0.5, 0.75})
    per, _ = mean_ap(ranked, gts, grid)
    res.map = per
    res.avg_map = float(np.mean([per[float(t)] for t in map_grid]))
    if probs is not None and inside is not None:
        res.gt_mean, res.non_gt_mean, _ = alignment_gap(probs, inside)
    return res
