"""Feature volumes and per-vertex feature sampling on cross-section circles."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .graph import VascularGraph

POINTS_PER_CIRCLE = 48
SCALE_FACTORS = (0.5, 1.0, 1.5)


@dataclass(frozen=True, eq=False)
class FeatureVolume:
    """Multi-channel scalar grid.

    ``data`` has shape ``(C, nx, ny, nz)``; voxel ``(i, j, k)`` is centered at
    ``origin + spacing * (i, j, k)`` millimeters.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim == 3:
            d = d[None]
        if d.ndim != 4:
            raise ValueError(f"volume data must be (C, nx, ny, nz), got shape {d.shape}")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or min(sp) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if not np.all(np.isfinite(d)):
            raise ValueError("volume contains non-finite values")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def to_voxel(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - np.asarray(self.origin)) / np.asarray(self.spacing)

    def voxel_centers(self) -> np.ndarray:
        """(nx, ny, nz, 3) array of voxel center coordinates in mm."""
        axes = [o + s * np.arange(n) for o, s, n in zip(self.origin, self.spacing, self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def trilinear(vol: FeatureVolume, points) -> np.ndarray:
    """Interpolate every channel at ``points`` (mm); returns shape (N, C).

    Coordinates outside the grid are clamped to the boundary voxels.
    """
    u = vol.to_voxel(np.atleast_2d(points))
    dims = np.array(vol.dims)
    u = np.clip(u, 0.0, dims - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), np.maximum(dims - 2, 0))
    f = u - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    data = vol.data
    out = np.zeros((u.shape[0], vol.channels))
    for cx in (0, 1):
        wx = f[:, 0] if cx else 1.0 - f[:, 0]
        ix = i1[:, 0] if cx else i0[:, 0]
        for cy in (0, 1):
            wy = f[:, 1] if cy else 1.0 - f[:, 1]
            iy = i1[:, 1] if cy else i0[:, 1]
            for cz in (0, 1):
                wz = f[:, 2] if cz else 1.0 - f[:, 2]
                iz = i1[:, 2] if cz else i0[:, 2]
                out += (wx * wy * wz)[:, None] * data[:, ix, iy, iz].T
    return out


def trilinear_sample(vol: FeatureVolume, p, channel: int) -> float:
    if not 0 <= channel < vol.channels:
        raise IndexError(f"channel {channel} out of range for {vol.channels} channels")
    return float(trilinear(vol, np.asarray(p, dtype=np.float64).reshape(1, 3))[0, channel])


class LocalFrame(NamedTuple):
    tangent: np.ndarray
    normal_u: np.ndarray
    normal_v: np.ndarray


def _initial_normal(t: np.ndarray) -> np.ndarray:
    axis = np.eye(3)[int(np.argmin(np.abs(t)))]
    u = axis - np.dot(axis, t) * t
    return u / np.linalg.norm(u)


def segment_frames(points) -> list[LocalFrame]:
    """Parallel-transported frames along a polyline.

    Tangents use central differences (one-sided at the ends). The first normal
    is an arbitrary perpendicular; later normals are the previous normal
    projected onto the next cross-section plane.
    """
    p = np.asarray(points, dtype=np.float64)[:, :3]
    n = len(p)
    if n < 2:
        raise ValueError("frames need at least two points")
    steps = np.linalg.norm(np.diff(p, axis=0), axis=1)
    if np.any(steps <= 0):
        raise ValueError("coincident consecutive centerline points")
    t = np.empty_like(p)
    t[0] = p[1] - p[0]
    t[-1] = p[-1] - p[-2]
    t[1:-1] = p[2:] - p[:-2]
    norms = np.linalg.norm(t, axis=1)
    if np.any(norms <= 1e-300):
        raise ValueError("zero-length tangent")
    t /= norms[:, None]

    frames = []
    u = _initial_normal(t[0])
    for i in range(n):
        if i:
            u = u - np.dot(u, t[i]) * t[i]
            nu = np.linalg.norm(u)
            u = u / nu if nu > 1e-8 else _initial_normal(t[i])
        v = np.cross(t[i], u)
        frames.append(LocalFrame(t[i].copy(), u.copy(), v / np.linalg.norm(v)))
    return frames


def circle_directions(frame: LocalFrame, points_per_circle: int = POINTS_PER_CIRCLE) -> np.ndarray:
    theta = 2.0 * np.pi * np.arange(points_per_circle) / points_per_circle
    return np.outer(np.cos(theta), frame.normal_u) + np.outer(np.sin(theta), frame.normal_v)


def circle_points(
    center,
    frame: LocalFrame,
    radius: float,
    points_per_circle: int = POINTS_PER_CIRCLE,
    scale_factors: Sequence[float] = SCALE_FACTORS,
) -> np.ndarray:
    """Points on concentric circles in the frame's cross-section plane, scale-major order."""
    if not radius > 0 or points_per_circle < 3:
        raise ValueError("need radius > 0 and at least 3 points per circle")
    c = np.asarray(center, dtype=np.float64)
    dirs = circle_directions(frame, points_per_circle)
    return np.vstack([c + (a * radius) * dirs for a in scale_factors])


def vertex_frames(g: VascularGraph) -> list[LocalFrame]:
    """One frame per vertex; a junction takes the frame of its first segment."""
    frames: list[LocalFrame | None] = [None] * g.n_vertices
    for k, seg in enumerate(g.segments):
        for vid, fr in zip(seg.vertex_ids, segment_frames(g.segment_vertices(k))):
            if frames[vid] is None:
                frames[vid] = fr
    return frames  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class NodeFeatureGraph:
    graph: VascularGraph
    features: np.ndarray


def sample_vertex_features(
    g: VascularGraph,
    vol: FeatureVolume,
    points_per_circle: int = POINTS_PER_CIRCLE,
    scale_factors: Sequence[float] = SCALE_FACTORS,
    moments: bool = False,
) -> NodeFeatureGraph:
    """Average the volume over each vertex's cross-section circles.

    Returns ``C`` mean features per vertex. With ``moments=True`` another
    ``3 * C`` columns follow: for every channel, the mean of the sampled value
    times the unit in-plane direction of its sample, in world axes. These
    first angular moments tell which side of the circle a structure lies on,
    which the plain mean cannot.
    """
    frames = vertex_frames(g)
    k = points_per_circle * len(scale_factors)
    dirs = np.empty((g.n_vertices, k, 3))
    pts = np.empty((g.n_vertices, k, 3))
    for i, fr in enumerate(frames):
        d = circle_directions(fr, points_per_circle)
        dirs[i] = np.tile(d, (len(scale_factors), 1))
        pts[i] = circle_points(g.positions[i], fr, g.radii[i], points_per_circle, scale_factors)
    vals = trilinear(vol, pts.reshape(-1, 3)).reshape(g.n_vertices, k, vol.channels)
    feats = vals.mean(axis=1)
    if moments:
        mom = np.einsum("nkc,nkd->ncd", vals, dirs) / k
        feats = np.hstack([feats, mom.reshape(g.n_vertices, 3 * vol.channels)])
    return NodeFeatureGraph(g, feats)


def save_volume(vol: FeatureVolume, stem) -> None:
    """Write ``<stem>.raw`` (little-endian float32, channel-major then z-major) and ``<stem>.json``."""
    stem = Path(stem)
    # (C, nx, ny, nz) -> (C, nz, ny, nx) so x varies fastest on disk
    blob = np.ascontiguousarray(vol.data.transpose(0, 3, 2, 1)).astype("<f4")
    stem.with_suffix(".raw").write_bytes(blob.tobytes())
    header = {
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "origin": list(vol.origin),
        "channels": vol.channels,
    }
    stem.with_suffix(".json").write_text(json.dumps(header) + "\n")


def load_volume(stem) -> FeatureVolume:
    stem = Path(stem)
    h = json.loads(stem.with_suffix(".json").read_text())
    nx, ny, nz = h["dims"]
    raw = np.frombuffer(stem.with_suffix(".raw").read_bytes(), dtype="<f4")
    expected = h["channels"] * nx * ny * nz
    if raw.size != expected:
        raise ValueError(f"{stem}.raw holds {raw.size} values, header implies {expected}")
    data = raw.reshape(h["channels"], nz, ny, nx).transpose(0, 3, 2, 1).astype(np.float64)
    return FeatureVolume(data, tuple(h["spacing"]), tuple(h["origin"]))
