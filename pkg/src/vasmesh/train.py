"""Adam training loop with a step learning-rate schedule, and inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import loss as L
from .graph import VascularGraph
from .net import DeformNet, DeformedGraphs, TemplatePyramid, backward, forward
from .sampling import POINTS_PER_CIRCLE, SCALE_FACTORS, FeatureVolume, sample_vertex_features

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    decay_every: int = 10
    decay_factor: float = 0.1
    epochs: int = 200
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.epochs < 0 or self.decay_every < 1:
            raise ValueError("epochs must be >= 0 and decay_every >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SamplingConfig:
    points_per_circle: int = POINTS_PER_CIRCLE
    scale_factors: tuple[float, ...] = SCALE_FACTORS
    moments: bool = True

    def channels_to_in_dim(self, channels: int) -> int:
        return channels * (4 if self.moments else 1)


def learning_rate_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.learning_rate * cfg.decay_factor ** (epoch // cfg.decay_every)


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k in sorted(params):
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            params[k] -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


class TrainingDiverged(RuntimeError):
    pass


def stage_features(
    volumes: Sequence[FeatureVolume], pyr: TemplatePyramid, sampling: SamplingConfig = SamplingConfig()
) -> list[np.ndarray]:
    """Sample stage ``s`` volume on template level ``s``."""
    if len(volumes) != len(pyr.graphs):
        raise ValueError(f"need {len(pyr.graphs)} stage volumes, got {len(volumes)}")
    return [
        sample_vertex_features(g, v, sampling.points_per_circle, sampling.scale_factors, sampling.moments).features
        for g, v in zip(pyr.graphs, volumes)
    ]


@dataclass
class PreparedCase:
    features: list[np.ndarray]
    target: VascularGraph
    loss_cfgs: list[L.LossConfig]


def prepare_case(
    volumes: Sequence[FeatureVolume],
    target: VascularGraph,
    pyr: TemplatePyramid,
    loss_cfg: L.LossConfig,
    sampling: SamplingConfig = SamplingConfig(),
) -> PreparedCase:
    cfgs = []
    for g in pyr.graphs:
        L.check_structure(g, target)
        alpha, beta = L.segment_targets(target, like=g)
        cfgs.append(loss_cfg.with_segment_targets(alpha, beta))
    return PreparedCase(stage_features(volumes, pyr, sampling), target, cfgs)


def input_statistics(cases: Sequence[PreparedCase]) -> np.ndarray:
    """Per-stage feature mean and standard deviation over all training vertices."""
    out = []
    for s in range(len(cases[0].features)):
        f = np.vstack([c.features[s] for c in cases])
        std = f.std(axis=0)
        out.append([f.mean(axis=0), np.where(std > 1e-12, std, 1.0)])
    return np.array(out)


def case_loss_and_grads(net: DeformNet, case: PreparedCase, pyr: TemplatePyramid, seg_term: float | None = None):
    out = forward(net, case.features, pyr)
    terms, grads = [], []
    for g, cfg in zip(out.graphs, case.loss_cfgs):
        value, grad = L.graph_loss_and_grad(g, case.target, cfg)
        terms.append(value)
        grads.append(grad)
    total = L.total_loss(terms, seg_term, case.loss_cfgs[0])
    return total, out, grads


def train(
    net: DeformNet,
    cases: Sequence[PreparedCase],
    pyr: TemplatePyramid,
    cfg: TrainConfig,
    on_epoch=None,
) -> tuple[DeformNet, list[float]]:
    """Train a copy of ``net`` one case per Adam step; returns it with per-epoch mean losses.

    The visiting order is a seeded permutation per epoch, so a run is
    reproducible bit for bit.
    """
    if not cases:
        raise ValueError("training needs at least one case")
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        lr = learning_rate_at(epoch, cfg)
        losses = []
        for i in rng.permutation(len(cases)):
            total, out, grads = case_loss_and_grads(net, cases[i], pyr)
            if not np.isfinite(total):
                raise TrainingDiverged(f"non-finite loss {total} at epoch {epoch}, case {i}")
            pgrads = backward(net, out, grads)
            opt.step(net.params, pgrads, lr)
            losses.append(total)
        history.append(float(np.mean(losses)))
        if on_epoch is not None:
            on_epoch(epoch, history[-1], lr)
        log.debug("epoch %d lr %.3g loss %.6g", epoch, lr, history[-1])
    return net, history


def infer(
    net: DeformNet,
    volumes: Sequence[FeatureVolume],
    pyr: TemplatePyramid,
    sampling: SamplingConfig = SamplingConfig(),
) -> DeformedGraphs:
    """Deformed graphs at all three levels; ``.finest`` is the output graph."""
    return forward(net, stage_features(volumes, pyr, sampling), pyr)
