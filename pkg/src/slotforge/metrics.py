"""Segmentation quality metrics: FG-ARI and mean Best Overlap.

FG-ARI is the adjusted Rand index restricted to ground-truth foreground
pixels (the DINOSAUR-lineage convention: only the ground truth is
filtered, predicted labels are taken as-is).  mBO averages, for each
ground-truth object, the best IoU over all predicted masks; a flag flips
the orientation to per-predicted-mask for comparison purposes.

Video-level scores flatten time into the pixel set and score once;
image-level scores average the per-frame metric over frames where it is
defined (frames with no foreground are skipped, not counted as zero).
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

MetricFn = Callable[[np.ndarray, np.ndarray], float | None]


def _contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact joint label-count matrix of two flat integer label arrays."""
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    na = int(ai.max()) + 1
    nb = int(bi.max()) + 1
    counts = np.bincount(ai * nb + bi, minlength=na * nb)
    return counts.reshape(na, nb)


def _comb2(n: int) -> int:
    return n * (n - 1) // 2


def fg_ari(pred: np.ndarray, gt: np.ndarray) -> float | None:
    """Adjusted Rand index over pixels with gt label > 0.

    Returns None when the ground truth has no foreground (the index is
    undefined there and callers skip the frame rather than scoring 0).
    Exact integer arithmetic throughout the contingency sums.
    """
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    fg = gt > 0
    if not fg.any():
        return None
    cont = _contingency(gt[fg], pred[fg])
    n = int(cont.sum())
    index = sum(_comb2(int(v)) for v in cont.reshape(-1))
    sum_a = sum(_comb2(int(v)) for v in cont.sum(axis=1))
    sum_b = sum(_comb2(int(v)) for v in cont.sum(axis=0))
    total_pairs = _comb2(n)
    if total_pairs == 0:
        return 1.0  # a single pixel: both partitions agree trivially
    expected = sum_a * sum_b / total_pairs
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0  # both sides are the same trivial partition
    return (index - expected) / (max_index - expected)


def m_bo(pred: np.ndarray, gt: np.ndarray, per_predicted: bool = False) -> float | None:
    """Mean best overlap.

    Default orientation: for every ground-truth object (gt label > 0),
    take the best IoU over all predicted masks (all predicted labels,
    including a predicted background cluster), then average over the
    ground-truth objects.  ``per_predicted=True`` selects the opposite
    orientation: per predicted mask, best IoU against ground-truth
    objects, averaged over predicted masks.
    """
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    gt_labels = np.unique(gt)
    gt_labels = gt_labels[gt_labels > 0]
    if gt_labels.size == 0:
        return None
    cont = _contingency(gt, pred).astype(np.int64)
    gt_index = {int(v): i for i, v in enumerate(np.unique(gt))}
    area_gt = cont.sum(axis=1)
    area_pred = cont.sum(axis=0)
    with np.errstate(invalid="ignore"):
        iou = cont / (area_gt[:, None] + area_pred[None, :] - cont)
    rows = [gt_index[int(g)] for g in gt_labels]
    if not per_predicted:
        return float(np.mean(iou[rows, :].max(axis=1)))
    return float(np.mean(iou[rows, :].max(axis=0)))


def video_level(metric: MetricFn, pred: np.ndarray, gt: np.ndarray) -> float | None:
    """Score the whole clip at once: time folds into the pixel set."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return metric(pred.reshape(-1), gt.reshape(-1))


def image_level(metric: MetricFn, pred: np.ndarray, gt: np.ndarray) -> float | None:
    """Average the per-frame metric over frames where it is defined."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    vals = [metric(pred[t], gt[t]) for t in range(pred.shape[0])]
    vals = [v for v in vals if v is not None]
    if not vals:
        return None
    return float(np.mean(vals))


LEVELS = ("image", "video")
METRICS = ("fg_ari", "mbo")


def score_video(pred: np.ndarray, gt: np.ndarray,
                mbo_per_predicted: bool = False) -> dict[str, float | None]:
    """All four (level, metric) scores for one (T,H,W) mask pair."""
    mbo = lambda p, g: m_bo(p, g, per_predicted=mbo_per_predicted)  # noqa: E731
    return {
        "image_fg_ari": image_level(fg_ari, pred, gt),
        "image_mbo": image_level(mbo, pred, gt),
        "video_fg_ari": video_level(fg_ari, pred, gt),
        "video_mbo": video_level(mbo, pred, gt),
    }


def max_workers() -> int:
    cap = os.environ.get("SLOTFORGE_THREADS")
    if cap:
        return max(1, int(cap))
    return min(4, os.cpu_count() or 1)


def score_videos(preds: list[np.ndarray], gts: list[np.ndarray],
                 mbo_per_predicted: bool = False) -> dict[str, float]:
    """Mean scores over a list of videos (parallel across videos)."""
    if len(preds) != len(gts):
        raise ValueError("pred/gt video counts differ")
    workers = max_workers()
    if workers > 1 and len(preds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(
                lambda pg: score_video(pg[0], pg[1], mbo_per_predicted),
                zip(preds, gts),
            ))
    else:
        rows = [score_video(p, g, mbo_per_predicted) for p, g in zip(preds, gts)]
    out = {}
    for key in ("image_fg_ari", "image_mbo", "video_fg_ari", "video_mbo"):
        vals = [r[key] for r in rows if r[key] is not None]
        out[key] = float(np.mean(vals)) if vals else math.nan
    return out


@dataclass
class EvalReport:
    """Per-seed scores plus mean/std rows, mirroring the seed-sweep layout."""

    per_seed: dict[int, dict[str, float]] = field(default_factory=dict)
    config_hash: str = ""
    dataset_hash: str = ""

    def add(self, seed: int, scores: dict[str, float]) -> None:
        self.per_seed[seed] = dict(scores)

    def _keys(self) -> list[str]:
        return ["image_fg_ari", "image_mbo", "video_fg_ari", "video_mbo"]

    def mean(self, key: str) -> float:
        return float(np.mean([s[key] for s in self.per_seed.values()]))

    def std(self, key: str) -> float:
        vals = [s[key] for s in self.per_seed.values()]
        if len(vals) < 2:
            return 0.0
        return float(np.std(vals, ddof=1))

    def rows(self) -> list[tuple[str, str, str, str]]:
        out = []
        for seed in sorted(self.per_seed):
            for key in self._keys():
                level, metric = key.split("_", 1)
                out.append((level, metric, str(seed), repr(self.per_seed[seed][key])))
        for key in self._keys():
            level, metric = key.split("_", 1)
            out.append((level, metric, "mean", repr(self.mean(key))))
            out.append((level, metric, "std", repr(self.std(key))))
        return out

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["# config_hash", self.config_hash])
            writer.writerow(["# dataset_hash", self.dataset_hash])
            writer.writerow(["level", "metric", "seed", "value"])
            writer.writerows(self.rows())
