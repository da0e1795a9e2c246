"""Multi-level graph loss, uniformity regularizer, Dice loss and their gradients.

Vertex distance is the squared position gap plus the squared radius gap.
Nearest vertices are found by position alone and ties go to the lowest
index. Gradients treat the nearest-vertex assignment as fixed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .graph import VascularGraph, resample_segment

DEFAULT_LAMBDA_REG = 0.01
DEFAULT_LAMBDA_SEG = 1.0


@dataclass(frozen=True)
class LossConfig:
    """Loss weights and per-segment uniformity targets (mm), indexed like the segments."""

    lambda_reg: float = DEFAULT_LAMBDA_REG
    lambda_seg: float = DEFAULT_LAMBDA_SEG
    alpha: tuple[float, ...] = ()
    beta: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if self.lambda_reg < 0 or self.lambda_seg < 0:
            raise ValueError("loss weights must be non-negative")
        vals = np.array(self.alpha + self.beta)
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise ValueError("alpha and beta must be finite and non-negative")

    def with_segment_targets(self, alpha, beta) -> "LossConfig":
        return LossConfig(self.lambda_reg, self.lambda_seg, tuple(alpha), tuple(beta))


class StructureMismatch(ValueError):
    pass


class MatchResult(NamedTuple):
    forward: np.ndarray
    backward: np.ndarray


def vertex_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dc = a[:3] - b[:3]
    dr = a[3] - b[3]
    return float(dc @ dc + dr * dr)


def _sq_dist_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :3] - b[None, :, :3]
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def nearest_match(src, tgt) -> MatchResult:
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("nearest_match needs two non-empty vertex lists")
    d2 = _sq_dist_matrix(src, tgt)
    # argmin returns the first minimum: lowest-index tie-break
    return MatchResult(np.argmin(d2, axis=1), np.argmin(d2, axis=0))


def _pair_terms(src: np.ndarray, tgt: np.ndarray):
    match = nearest_match(src, tgt)
    fwd = src - tgt[match.forward]
    bwd = src[match.backward] - tgt
    loss = float((fwd * fwd).sum() + (bwd * bwd).sum())
    grad = 2.0 * fwd
    np.add.at(grad, match.backward, 2.0 * bwd)
    return loss, grad


def segment_pair_loss(src_seg, tgt_seg) -> float:
    """Forward plus backward nearest-vertex distances between two segments."""
    src = np.asarray(src_seg, dtype=np.float64).reshape(-1, 4)
    tgt = np.asarray(tgt_seg, dtype=np.float64).reshape(-1, 4)
    return _pair_terms(src, tgt)[0]


def _regularizer_terms(g: VascularGraph, segment: int, alpha: float, beta: float, want_grad: bool):
    v = g.vertices
    a2, b2 = alpha * alpha, beta * beta
    total = 0.0
    grad = np.zeros_like(v) if want_grad else None
    for p in g.segments[segment].vertex_ids:
        for q in g.neighbors[p]:
            dc = v[p, :3] - v[q, :3]
            dr = v[p, 3] - v[q, 3]
            tc = dc @ dc - a2
            tr = dr * dr - b2
            total += abs(tc) + abs(tr)
            if want_grad:
                gc = 2.0 * np.sign(tc) * dc
                gr = 2.0 * np.sign(tr) * dr
                grad[p, :3] += gc
                grad[q, :3] -= gc
                grad[p, 3] += gr
                grad[q, 3] -= gr
    return total, grad


def regularizer(g: VascularGraph, segment: int, alpha: float, beta: float) -> float:
    """Uniform-density penalty of one segment over the graph 1-ring of its vertices."""
    if not (np.isfinite(alpha) and np.isfinite(beta)):
        raise ValueError("alpha and beta must be finite")
    return _regularizer_terms(g, segment, alpha, beta, False)[0]


def segment_targets(target: VascularGraph, like: VascularGraph | None = None):
    """Per-segment mean consecutive position gap and mean absolute radius gap.

    With ``like`` given, each target segment is first resampled to the vertex
    count of the matching segment in ``like`` so the gaps refer to the
    prediction's vertex density.
    """
    alpha, beta = [], []
    for k in range(len(target.segments)):
        pts = target.segment_vertices(k)
        if like is not None:
            pts = resample_segment(pts, len(like.segments[k]))
        d = np.diff(pts, axis=0)
        alpha.append(float(np.linalg.norm(d[:, :3], axis=1).mean()))
        beta.append(float(np.abs(d[:, 3]).mean()))
    return tuple(alpha), tuple(beta)


def check_structure(pred: VascularGraph, target: VascularGraph, cfg: LossConfig | None = None):
    if len(pred.segments) != len(target.segments):
        raise StructureMismatch(
            f"prediction has {len(pred.segments)} segments, target has {len(target.segments)}"
        )
    for k, (a, b) in enumerate(zip(pred.segments, target.segments)):
        if a.subgraph != b.subgraph:
            raise StructureMismatch(f"segment {k}: subgraph {a.subgraph} vs {b.subgraph}")
        if len(a) < 2 or len(b) < 2:
            raise StructureMismatch(f"segment {k} is degenerate")
    if cfg is not None and cfg.lambda_reg > 0:
        if len(cfg.alpha) != len(pred.segments) or len(cfg.beta) != len(pred.segments):
            raise StructureMismatch("alpha/beta must be given for every segment")


def _graph_loss(pred: VascularGraph, target: VascularGraph, cfg: LossConfig, want_grad: bool):
    check_structure(pred, target, cfg)
    total = 0.0
    grad = np.zeros_like(pred.vertices) if want_grad else None
    for k, seg in enumerate(pred.segments):
        ids = list(seg.vertex_ids)
        loss, g = _pair_terms(pred.vertices[ids], target.segment_vertices(k))
        total += loss
        if want_grad:
            np.add.at(grad, ids, g)
        if cfg.lambda_reg > 0:
            r, rg = _regularizer_terms(pred, k, cfg.alpha[k], cfg.beta[k], want_grad)
            total += cfg.lambda_reg * r
            if want_grad:
                grad += cfg.lambda_reg * rg
    return total, grad


def graph_loss(pred: VascularGraph, target: VascularGraph, cfg: LossConfig) -> float:
    """Graph loss at one scale: sum over segments of both distance terms plus the weighted regularizer."""
    return _graph_loss(pred, target, cfg, False)[0]


def graph_loss_grad(pred: VascularGraph, target: VascularGraph, cfg: LossConfig) -> np.ndarray:
    """(m, 4) gradient of ``graph_loss`` w.r.t. the predicted vertex rows."""
    return _graph_loss(pred, target, cfg, True)[1]


def graph_loss_and_grad(pred: VascularGraph, target: VascularGraph, cfg: LossConfig):
    return _graph_loss(pred, target, cfg, True)


def multiscale_graph_loss(
    preds: Sequence[VascularGraph], target: VascularGraph, cfgs: Sequence[LossConfig]
) -> float:
    return sum(graph_loss(p, target, c) for p, c in zip(preds, cfgs))


def dice_loss(gt, prob) -> float:
    y = np.asarray(gt, dtype=np.float64)
    p = np.asarray(prob, dtype=np.float64)
    if y.shape != p.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {p.shape}")
    denom = np.abs(y).sum() + np.abs(p).sum()
    if denom == 0:
        return 0.0
    return float(1.0 - 2.0 * (y * p).sum() / denom)


def total_loss(graph_terms: Sequence[float], seg_term: float | None = None, cfg: LossConfig | None = None) -> float:
    if len(graph_terms) == 0:
        raise ValueError("need at least one graph loss term")
    cfg = cfg or LossConfig()
    seg = 0.0 if seg_term is None else cfg.lambda_seg * seg_term
    return float(sum(graph_terms) + seg)
