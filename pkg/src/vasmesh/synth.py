"""Synthetic ground truth: perturbed vessel graphs, tube masks and stand-in feature volumes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .graph import VascularGraph, graph_from_polylines, resample_segment
from .sampling import FeatureVolume

# (subgraph, vertex count): trunk and two branches on the left, one long vessel on the right
DEFAULT_SEGMENT_SPECS = ((0, 16), (0, 40), (0, 36), (1, 50))
NOISE_SIGMA = 0.05


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    perturbation_scale: float = 4.0
    radius_range: tuple[float, float] = (1.5, 4.5)
    segment_specs: tuple[tuple[int, int], ...] = DEFAULT_SEGMENT_SPECS
    # radius offsets are bounded by radius_fraction * perturbation_scale
    radius_fraction: float = 0.125
    wavelength_range: tuple[float, float] = (60.0, 120.0)
    origin: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self):
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError("radius_range must be a positive interval")
        if self.perturbation_scale < 0 or self.radius_fraction < 0:
            raise ValueError("perturbation scales must be non-negative")
        object.__setattr__(self, "segment_specs", tuple((int(a), int(b)) for a, b in self.segment_specs))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims) * np.asarray(self.spacing)


def _bezier(p0, p1, p2, n=400) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * t * (1 - t) * p1 + t ** 2 * p2


def _rot_z(v, angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]])


def canonical_graph(cfg: SynthConfig = SynthConfig()) -> VascularGraph:
    """Deterministic vessel layout filling the volume.

    In each subgraph the first segment is a trunk and the remaining segments
    branch off its distal end, fanning out and bending gently.
    """
    ext = cfg.extent
    org = np.asarray(cfg.origin)
    by_sub: dict[int, list[int]] = {}
    for k, (sub, _) in enumerate(cfg.segment_specs):
        by_sub.setdefault(sub, []).append(k)
    subs = sorted(by_sub)
    r_lo, r_hi = cfg.radius_range
    r_trunk = r_lo + 0.7 * (r_hi - r_lo)
    r_tip = r_lo + 0.25 * (r_hi - r_lo)

    polys: list[np.ndarray | None] = [None] * len(cfg.segment_specs)
    starts: list = [None] * len(cfg.segment_specs)
    for j, sub in enumerate(subs):
        ks = by_sub[sub]
        frac = (j + 0.5) / len(subs)
        base = org + ext * np.array([0.2, 0.75 - 0.5 * frac, 0.5 + 0.1 * (frac - 0.5)])
        heading = _rot_z(np.array([1.0, 0.0, 0.0]), 0.4 * (frac - 0.5))
        sign = 1.0 if frac < 0.5 else -1.0
        if len(ks) == 1:
            length = 0.55 * ext[0]
            bend = _rot_z(heading, sign * 0.45)
            p2 = base + length * bend + np.array([0, 0, 0.08 * ext[2]])
            curve = _bezier(base, base + 0.5 * length * heading, p2)
            r0, r1 = r_trunk, r_tip
        else:
            length = 0.2 * ext[0]
            curve = _bezier(base, base + 0.5 * length * heading, base + length * _rot_z(heading, 0.1 * sign))
            r0, r1 = r_hi - 0.1 * (r_hi - r_lo), r_trunk
        n0 = cfg.segment_specs[ks[0]][1]
        polys[ks[0]] = resample_segment(np.column_stack([curve, np.linspace(r0, r1, len(curve))]), n0)

        junction = polys[ks[0]][-1]
        n_br = len(ks) - 1
        for b, k in enumerate(ks[1:]):
            spread = 0.0 if n_br == 1 else -0.55 + 1.1 * b / (n_br - 1)
            d = _rot_z(heading, spread)
            d = d + np.array([0.0, 0.0, 0.25 * spread])
            d /= np.linalg.norm(d)
            length = 0.4 * ext[0]
            p0 = junction[:3]
            p2 = p0 + length * _rot_z(d, 0.25 * np.sign(spread or 1.0))
            curve = _bezier(p0, p0 + 0.5 * length * d, p2)
            radii = np.linspace(junction[3], r_tip, len(curve))
            polys[k] = resample_segment(np.column_stack([curve, radii]), cfg.segment_specs[k][1])
            starts[k] = (ks[0], "end")
    subgraphs = [s for s, _ in cfg.segment_specs]
    return graph_from_polylines(polys, subgraphs, starts)


def _smooth_field(rng: np.random.Generator, n_modes: int, wavelengths, dim: int):
    """Random sum of plane waves whose amplitude is bounded by 1 everywhere."""
    w = rng.dirichlet(np.ones(n_modes))
    dirs = rng.normal(size=(n_modes, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    k = rng.normal(size=(n_modes, 3))
    k /= np.linalg.norm(k, axis=1, keepdims=True)
    k *= (2 * np.pi / rng.uniform(*wavelengths, size=n_modes))[:, None]
    phase = rng.uniform(0, 2 * np.pi, size=n_modes)

    def field(x):
        s = np.sin(x @ k.T + phase)  # (n, modes)
        return (s * w) @ dirs

    return field


def random_graph(template: VascularGraph, cfg: SynthConfig, seed: int | None = None) -> VascularGraph:
    """Apply a smooth random displacement field (|offset| <= perturbation_scale) and radius field."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    pos_field = _smooth_field(rng, 3, cfg.wavelength_range, 3)
    rad_field = _smooth_field(rng, 3, cfg.wavelength_range, 1)
    if cfg.perturbation_scale == 0:
        return template
    v = template.vertices.copy()
    x = template.positions
    v[:, :3] = x + cfg.perturbation_scale * pos_field(x)
    v[:, 3] = v[:, 3] + cfg.radius_fraction * cfg.perturbation_scale * rad_field(x)[:, 0]
    v[:, 3] = np.clip(v[:, 3], *cfg.radius_range)
    return template.with_vertices(v)


def voxel_centers(dims, spacing, origin) -> list[np.ndarray]:
    return [o + s * np.arange(n) for o, s, n in zip(origin, spacing, dims)]


def rasterize_tubes(g: VascularGraph, dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Binary (nx, ny, nz) mask of voxels whose center lies inside a swept tube.

    A center is inside when its distance to some edge is at most the radius
    interpolated at the closest point of that edge. Each edge only visits its
    padded bounding box, which never changes the result.
    """
    dims = tuple(int(d) for d in dims)
    sp = np.asarray(spacing, dtype=np.float64)
    org = np.asarray(origin, dtype=np.float64)
    axes = voxel_centers(dims, sp, org)
    mask = np.zeros(dims, dtype=np.uint8)
    v = g.vertices
    for ia, ib in g.edges:
        a, b = v[ia, :3], v[ib, :3]
        ra, rb = v[ia, 3], v[ib, 3]
        rmax = max(ra, rb)
        lo = np.floor((np.minimum(a, b) - rmax - org) / sp).astype(int) - 1
        hi = np.ceil((np.maximum(a, b) + rmax - org) / sp).astype(int) + 2
        lo = np.clip(lo, 0, dims)
        hi = np.clip(hi, 0, dims)
        if np.any(hi <= lo):
            continue
        sl = tuple(slice(l, h) for l, h in zip(lo, hi))
        inside = tube_inside(axes[0][sl[0]], axes[1][sl[1]], axes[2][sl[2]], a, b, ra, rb)
        mask[sl] |= inside
    return mask


def tube_inside(xs, ys, zs, a, b, ra, rb) -> np.ndarray:
    """Inside test of one tapered edge on a grid of centers given by its axes."""
    ab = b - a
    ll = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2]
    dx = xs[:, None, None] - a[0]
    dy = ys[None, :, None] - a[1]
    dz = zs[None, None, :] - a[2]
    t = (dx * ab[0] + dy * ab[1] + dz * ab[2]) / ll if ll > 0 else np.zeros_like(dx + dy + dz)
    t = np.clip(t, 0.0, 1.0)
    ex = dx - t * ab[0]
    ey = dy - t * ab[1]
    ez = dz - t * ab[2]
    r = ra + t * (rb - ra)
    return (ex * ex + ey * ey + ez * ez <= r * r).astype(np.uint8)


def downsample(data: np.ndarray, factor: int) -> np.ndarray:
    """Block mean over ``factor``-sized blocks; trailing partial blocks average what they hold."""
    if factor == 1:
        return data.copy()
    out = data
    for axis in range(data.ndim - 3, data.ndim):
        n = out.shape[axis]
        m = -(-n // factor)
        starts = np.arange(0, n, factor)
        sums = np.add.reduceat(out, starts, axis=axis)
        counts = np.minimum(starts + factor, n) - starts
        shape = [1] * out.ndim
        shape[axis] = m
        out = sums / counts.reshape(shape)
    return out


def make_feature_volume(binary: FeatureVolume, stage: int = 0, seed: int = 0) -> FeatureVolume:
    """Three-channel stand-in for encoder features at stage ``stage`` (downsampled by 2**stage).

    Channels: box-smoothed mask plus Gaussian noise, distance (mm) from each
    voxel to the nearest foreground voxel (all zero when there is none), and
    the central-difference gradient magnitude of that distance.
    """
    if stage not in (0, 1, 2):
        raise ValueError("stage must be 0, 1 or 2")
    mask = np.asarray(binary.data[0]) > 0.5
    sp = binary.spacing
    intensity = ndimage.uniform_filter(mask.astype(np.float64), size=3, mode="constant")
    intensity = intensity + np.random.default_rng(seed).normal(0.0, NOISE_SIGMA, size=mask.shape)
    if mask.any():
        dist = ndimage.distance_transform_edt(~mask, sampling=sp)
    else:
        dist = np.zeros(mask.shape)
    grad = np.gradient(dist, *sp) if min(mask.shape) > 1 else [np.zeros(mask.shape)] * 3
    gmag = np.sqrt(sum(g * g for g in grad))
    data = np.stack([intensity, dist, gmag])
    f = 2 ** stage
    origin = np.asarray(binary.origin) + 0.5 * (f - 1) * np.asarray(sp)
    return FeatureVolume(downsample(data, f), tuple(s * f for s in sp), tuple(origin))


def mask_volume(mask: np.ndarray, spacing, origin) -> FeatureVolume:
    return FeatureVolume(np.asarray(mask, dtype=np.float64)[None], tuple(spacing), tuple(origin))
