"""Three-stage residual graph-convolution network predicting template deformations.

Stage ``s`` runs on template level ``s``. Its input is the sampled image
features of that level, concatenated (for s > 0) with the previous stage's
hidden features up-pooled onto the finer graph. A stage is a residual GC
module (three G-Conv+ReLU blocks plus a linear skip projection) followed by a
linear G-Conv output layer with four channels: xyz offset and radius offset.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import VascularGraph, SubdivisionMap, subdivide

N_STAGES = 3
N_BLOCKS = 3
HIDDEN = 64
R_MIN = 0.05


@dataclass
class GConvLayer:
    weight: np.ndarray
    bias: np.ndarray


def normalized_adjacency(g: VascularGraph) -> np.ndarray:
    """Symmetric normalization of the adjacency with self-loops."""
    a = g.edge_matrix() + np.eye(g.n_vertices)
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


def gconv_forward(features, adj, layer: GConvLayer, relu: bool = True) -> np.ndarray:
    h = np.asarray(features, dtype=np.float64)
    if adj.shape != (h.shape[0], h.shape[0]) or layer.weight.shape[0] != h.shape[1]:
        raise ValueError(
            f"dimension mismatch: features {h.shape}, adjacency {adj.shape}, weight {layer.weight.shape}"
        )
    out = adj @ h @ layer.weight + layer.bias
    return np.maximum(out, 0.0) if relu else out


def up_pool(features, smap: SubdivisionMap) -> np.ndarray:
    """Copy vertex rows to the refined graph; midpoint rows average their edge endpoints."""
    h = np.asarray(features, dtype=np.float64)
    if h.shape[0] != smap.n_parent:
        raise ValueError(f"map expects {smap.n_parent} parent rows, got {h.shape[0]}")
    out = np.empty((smap.n_child, h.shape[1]))
    out[smap.copy_of_vertex] = h
    e = smap.parent_edges
    out[smap.child_of_edge] = 0.5 * (h[e[:, 0]] + h[e[:, 1]])
    return out


@dataclass(frozen=True, eq=False)
class TemplatePyramid:
    """Template graphs of the three levels with their adjacency and pooling operators."""

    graphs: tuple[VascularGraph, ...]
    maps: tuple[SubdivisionMap, ...]
    adjacency: tuple[np.ndarray, ...] = field(repr=False)
    pooling: tuple[np.ndarray, ...] = field(repr=False)

    @classmethod
    def from_template(cls, g0: VascularGraph) -> "TemplatePyramid":
        if g0.level != 0:
            raise ValueError("pyramid must start from a level-0 template")
        graphs, maps = [g0], []
        for _ in range(N_STAGES - 1):
            g, m = subdivide(graphs[-1])
            graphs.append(g)
            maps.append(m)
        adj = tuple(normalized_adjacency(g) for g in graphs)
        pool = tuple(m.pool_matrix() for m in maps)
        return cls(tuple(graphs), tuple(maps), adj, pool)


@dataclass
class DeformNet:
    """Parameters of the three stage-specific GC modules, keyed ``s{stage}.{layer}.{W|b}``."""

    in_dim: int
    hidden: int = HIDDEN
    params: dict[str, np.ndarray] = field(default_factory=dict)
    r_min: float = R_MIN
    # frozen per-stage (shift, scale) applied to sampled features, shape (3, 2, in_dim)
    input_norm: np.ndarray | None = None

    def stage_in_dim(self, stage: int) -> int:
        return self.in_dim if stage == 0 else self.in_dim + self.hidden

    def layer(self, stage: int, name: str) -> GConvLayer:
        return GConvLayer(self.params[f"s{stage}.{name}.W"], self.params[f"s{stage}.{name}.b"])

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for s in range(N_STAGES):
            d_in = self.stage_in_dim(s)
            out[f"s{s}.skip.W"] = (d_in, self.hidden)
            for k in range(N_BLOCKS):
                out[f"s{s}.conv{k}.W"] = (d_in if k == 0 else self.hidden, self.hidden)
                out[f"s{s}.conv{k}.b"] = (self.hidden,)
            out[f"s{s}.out.W"] = (self.hidden, 4)
            out[f"s{s}.out.b"] = (4,)
        return out

    def copy(self) -> "DeformNet":
        norm = None if self.input_norm is None else self.input_norm.copy()
        return DeformNet(self.in_dim, self.hidden, {k: v.copy() for k, v in self.params.items()}, self.r_min, norm)

    def normalize(self, stage: int, features: np.ndarray) -> np.ndarray:
        if self.input_norm is None:
            return features
        shift, scale = self.input_norm[stage]
        return (features - shift) / scale


def init_net(in_dim: int, hidden: int = HIDDEN, seed: int = 0, r_min: float = R_MIN) -> DeformNet:
    """Glorot-uniform hidden and skip weights, zero biases and zero output layers.

    Values are rounded to float32 so a checkpoint of the initial network
    reproduces it exactly.
    """
    rng = np.random.default_rng(seed)
    net = DeformNet(in_dim, hidden, {}, r_min)
    for name, shape in net.shapes().items():
        if name.endswith(".b") or ".out." in name:
            net.params[name] = np.zeros(shape)
        else:
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            net.params[name] = rng.uniform(-lim, lim, size=shape).astype(np.float32).astype(np.float64)
    return net


@dataclass(frozen=True, eq=False)
class DeformedGraphs:
    """Deformed graphs from coarse to fine, plus activations kept for ``backward``."""

    graphs: tuple[VascularGraph, ...]
    offsets: tuple[np.ndarray, ...]
    cache: dict = field(repr=False, default_factory=dict)

    @property
    def finest(self) -> VascularGraph:
        return self.graphs[-1]


def _check_features(net: DeformNet, features: Sequence[np.ndarray], pyr: TemplatePyramid):
    if len(features) != N_STAGES:
        raise ValueError(f"need features for {N_STAGES} stages, got {len(features)}")
    for s, (f, g) in enumerate(zip(features, pyr.graphs)):
        if f.shape != (g.n_vertices, net.in_dim):
            raise ValueError(
                f"stage {s}: features {f.shape} do not match wiring ({g.n_vertices}, {net.in_dim})"
            )


def forward(net: DeformNet, features: Sequence[np.ndarray], pyr: TemplatePyramid) -> DeformedGraphs:
    """Deform every template level; ``features[s]`` is (m_s, in_dim)."""
    features = [np.asarray(getattr(f, "features", f), dtype=np.float64) for f in features]
    _check_features(net, features, pyr)
    p = net.params
    graphs, offsets, stages = [], [], []
    h_prev = None
    for s in range(N_STAGES):
        adj = pyr.adjacency[s]
        f = net.normalize(s, features[s])
        x = f if s == 0 else np.hstack([f, pyr.pooling[s - 1] @ h_prev])
        acts = []  # (aggregated input, pre-activation) per block
        z = x
        for k in range(N_BLOCKS):
            agg = adj @ z
            pre = agg @ p[f"s{s}.conv{k}.W"] + p[f"s{s}.conv{k}.b"]
            acts.append((agg, pre))
            z = np.maximum(pre, 0.0)
        h = z + x @ p[f"s{s}.skip.W"]
        agg_h = adj @ h
        delta = agg_h @ p[f"s{s}.out.W"] + p[f"s{s}.out.b"]

        tmpl = pyr.graphs[s].vertices
        verts = tmpl + delta
        radius = np.maximum(verts[:, 3], net.r_min)
        clamped = verts[:, 3] < net.r_min
        verts[:, 3] = radius
        graphs.append(pyr.graphs[s].with_vertices(verts))
        offsets.append(delta)
        stages.append({"x": x, "acts": acts, "agg_h": agg_h, "clamped": clamped})
        h_prev = h
    return DeformedGraphs(tuple(graphs), tuple(offsets), {"stages": stages, "pyr": pyr})


def backward(net: DeformNet, out: DeformedGraphs, grads: Sequence[np.ndarray]) -> dict[str, np.ndarray]:
    """Parameter gradients given d(loss)/d(vertex rows) of every deformed level."""
    p = net.params
    pyr: TemplatePyramid = out.cache["pyr"]
    stages = out.cache["stages"]
    g = {k: np.zeros_like(v) for k, v in p.items()}
    dh_next = None
    for s in reversed(range(N_STAGES)):
        st = stages[s]
        adj = pyr.adjacency[s]
        d_delta = np.array(grads[s], dtype=np.float64)
        d_delta[st["clamped"], 3] = 0.0

        g[f"s{s}.out.W"] += st["agg_h"].T @ d_delta
        g[f"s{s}.out.b"] += d_delta.sum(axis=0)
        dh = adj.T @ (d_delta @ p[f"s{s}.out.W"].T)
        if dh_next is not None:
            dh += dh_next

        x = st["x"]
        g[f"s{s}.skip.W"] += x.T @ dh
        dx = dh @ p[f"s{s}.skip.W"].T
        dz = dh
        for k in reversed(range(N_BLOCKS)):
            agg, pre = st["acts"][k]
            dpre = dz * (pre > 0)
            g[f"s{s}.conv{k}.W"] += agg.T @ dpre
            g[f"s{s}.conv{k}.b"] += dpre.sum(axis=0)
            dinput = adj.T @ (dpre @ p[f"s{s}.conv{k}.W"].T)
            if k == 0:
                dx += dinput
            else:
                dz = dinput
        if s > 0:
            dh_next = pyr.pooling[s - 1].T @ dx[:, net.in_dim:]
    return g


MAGIC = b"VASMESH-CKPT1\n"


def save_checkpoint(path, net: DeformNet, header: dict | None = None) -> None:
    """Text header line (JSON) followed by the little-endian float32 parameter blob."""
    names = sorted(net.params)
    layout, offset = [], 0
    for n in names:
        shape = list(net.params[n].shape)
        size = int(np.prod(shape))
        layout.append({"name": n, "shape": shape, "offset": offset})
        offset += size
    meta = {
        "in_dim": net.in_dim,
        "hidden": net.hidden,
        "r_min": net.r_min,
        "params": layout,
        "n_values": offset,
        "input_norm": None if net.input_norm is None else net.input_norm.tolist(),
        **(header or {}),
    }
    blob = b"".join(np.asarray(net.params[n], dtype="<f4").tobytes() for n in names)
    text = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        fh.write(b"\n")
        fh.write(blob)


def load_checkpoint(path) -> tuple[DeformNet, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path} is not a checkpoint")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    meta = json.loads(raw[pos:pos + n])
    pos += n + 1
    values = np.frombuffer(raw, dtype="<f4", offset=pos).astype(np.float64)
    if values.size != meta["n_values"]:
        raise ValueError(f"{path}: expected {meta['n_values']} parameters, found {values.size}")
    norm = meta.get("input_norm")
    net = DeformNet(meta["in_dim"], meta["hidden"], {}, meta["r_min"], None if norm is None else np.array(norm))
    for item in meta["params"]:
        size = int(np.prod(item["shape"]))
        net.params[item["name"]] = values[item["offset"]:item["offset"] + size].reshape(item["shape"]).copy()
    if set(net.params) != set(net.shapes()) or any(
        net.params[k].shape != s for k, s in net.shapes().items()
    ):
        raise ValueError(f"{path}: parameter layout does not match the network wiring")
    return net, meta
