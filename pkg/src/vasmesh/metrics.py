"""Centerline and volume evaluation metrics.

The overlap and average-distance definitions are local choices:

* OV = 100 * (matched predicted points + matched ground-truth points) /
  (all predicted points + all ground-truth points), a point being matched
  when some point of the other set lies within the threshold;
* AI = mean of all nearest-neighbour distances taken in both directions;
* HD = symmetric Hausdorff distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from .graph import VascularGraph, polyline_length, resample_segment

DEFAULT_DENSIFY_STEP = 0.5


def densify(g: VascularGraph, step: float = DEFAULT_DENSIFY_STEP) -> np.ndarray:
    """Arclength-uniform centerline points, spacing <= step, endpoints included."""
    if not step > 0:
        raise ValueError("step must be positive")
    out = []
    for k in range(len(g.segments)):
        pts = g.segment_vertices(k)
        n = max(2, int(math.ceil(polyline_length(pts) / step - 1e-9)) + 1)
        out.append(resample_segment(pts, n)[:, :3])
    return np.vstack(out)


def _check(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("metrics need non-empty point sets")
    return a, b


def nearest_distances(a, b, chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive nearest distances a->b and b->a."""
    a, b = _check(a, b)
    ab = np.empty(len(a))
    ba = np.full(len(b), np.inf)
    for s in range(0, len(a), chunk):
        d = a[s:s + chunk, None, :] - b[None, :, :]
        d2 = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
        ab[s:s + chunk] = d2.min(axis=1)
        ba = np.minimum(ba, d2.min(axis=0))
    return np.sqrt(ab), np.sqrt(ba)


def metric_ov(pred, gt, threshold: float) -> float:
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    dp, dg = nearest_distances(pred, gt)
    hits = int(np.count_nonzero(dp <= threshold)) + int(np.count_nonzero(dg <= threshold))
    return 100.0 * hits / (len(dp) + len(dg))


def metric_ai(pred, gt) -> float:
    dp, dg = nearest_distances(pred, gt)
    return math.fsum(dp.tolist() + dg.tolist()) / (len(dp) + len(dg))


def metric_hd(pred, gt) -> float:
    dp, dg = nearest_distances(pred, gt)
    return float(max(dp.max(), dg.max()))


def metric_dice(a, b) -> float:
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 100.0
    return 100.0 * 2 * int(np.count_nonzero(a & b)) / denom


@dataclass(frozen=True)
class MetricReport:
    ov_percent: float
    ai_mm: float
    hd_mm: float
    dice_percent: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_graphs(
    pred: VascularGraph,
    gt: VascularGraph,
    threshold: float,
    step: float = DEFAULT_DENSIFY_STEP,
    pred_mask=None,
    gt_mask=None,
) -> MetricReport:
    p, q = densify(pred, step), densify(gt, step)
    dice = None if pred_mask is None or gt_mask is None else metric_dice(pred_mask, gt_mask)
    return MetricReport(metric_ov(p, q, threshold), metric_ai(p, q), metric_hd(p, q), dice)


def aggregate(reports: Sequence[MetricReport]) -> dict:
    """Mean and (population) standard deviation of every metric."""
    out = {}
    for key in ("ov_percent", "ai_mm", "hd_mm", "dice_percent"):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        if vals:
            out[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
    return out
