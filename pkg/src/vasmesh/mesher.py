"""Sweep O-grid cross-sections along centerlines into quad surfaces and hex volumes.

Section layout (in the section plane, ``u`` and ``v`` the frame normals):

* a square core of side ``radius / sqrt(2)`` sampled on a 13 x 13 grid, whose
  48 boundary nodes start at the midpoint of the ``+u`` side and run
  counter-clockwise;
* ``L`` transition rings of 48 nodes, ring ``l`` interpolating linearly from
  the core boundary (l = 0) to the 48-point circle (l = L).

Node order per section: the 169 core nodes row by row (``v`` outer, ``u``
inner), then ring 1 .. ring L.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .graph import VascularGraph
from .sampling import LocalFrame, circle_points, segment_frames

RING_POINTS = 48
CORE_INTERVALS = RING_POINTS // 4
CORE_SIZE = CORE_INTERVALS + 1
DEFAULT_LAYERS = 2

VTK_QUAD = 9
VTK_HEXAHEDRON = 12

# for every hex corner: the three neighbouring corners in right-handed order
HEX_CORNER_NEIGHBORS = (
    (1, 3, 4), (2, 0, 5), (3, 1, 6), (0, 2, 7),
    (7, 5, 0), (4, 6, 1), (5, 7, 2), (6, 4, 3),
)


def section_node_count(layers: int) -> int:
    return CORE_SIZE * CORE_SIZE + RING_POINTS * layers


def slab_hex_count(layers: int) -> int:
    return CORE_INTERVALS * CORE_INTERVALS + RING_POINTS * layers


def _core_boundary_indices() -> list[tuple[int, int]]:
    """(a, b) grid indices of the 48 core boundary nodes, aligned with the circle points."""
    n = CORE_INTERVALS
    h = n // 2
    loop = [(n, b) for b in range(h, n)]                    # right side, upward to the corner
    loop += [(a, n) for a in range(n, 0, -1)]               # top side, leftward
    loop += [(0, b) for b in range(n, 0, -1)]               # left side, downward
    loop += [(a, 0) for a in range(0, n)]                   # bottom side, rightward
    loop += [(n, b) for b in range(0, h)]                   # right side, back to the start
    return loop


CORE_LOOP = _core_boundary_indices()


def _core_index(a: int, b: int) -> int:
    return b * CORE_SIZE + a


class SectionLayout(NamedTuple):
    ring_points: np.ndarray      # (48, 3) outer circle
    core_grid: np.ndarray        # (13, 13, 3) indexed [b, a]
    radial_layers: np.ndarray    # (L, 48, 3), last entry equal to ring_points

    def nodes(self) -> np.ndarray:
        return np.vstack([self.core_grid.reshape(-1, 3), self.radial_layers.reshape(-1, 3)])


def build_section(center, frame: LocalFrame, radius: float, layers: int = DEFAULT_LAYERS) -> SectionLayout:
    if not radius > 0 or layers < 1:
        raise ValueError("need radius > 0 and at least one radial layer")
    c = np.asarray(center, dtype=np.float64)
    half = 0.5 * radius / np.sqrt(2.0)
    coords = np.linspace(-half, half, CORE_SIZE)
    a_off = coords[None, :, None] * frame.normal_u
    b_off = coords[:, None, None] * frame.normal_v
    core = c + a_off + b_off
    ring = circle_points(c, frame, radius, RING_POINTS, (1.0,))
    inner = np.array([core[b, a] for a, b in CORE_LOOP])
    rings = [inner + (l / layers) * (ring - inner) for l in range(1, layers + 1)]
    rings[-1] = ring
    return SectionLayout(ring, core, np.array(rings))


def _section_cells(layers: int) -> tuple[list[tuple[int, int, int, int]], list[tuple[int, int, int, int]]]:
    """Counter-clockwise quads of one section layout and the outer-ring boundary edges."""
    quads = []
    for b in range(CORE_INTERVALS):
        for a in range(CORE_INTERVALS):
            quads.append((_core_index(a, b), _core_index(a + 1, b), _core_index(a + 1, b + 1), _core_index(a, b + 1)))
    base = CORE_SIZE * CORE_SIZE
    inner = [_core_index(a, b) for a, b in CORE_LOOP]
    for l in range(layers):
        outer = [base + l * RING_POINTS + j for j in range(RING_POINTS)]
        for j in range(RING_POINTS):
            k = (j + 1) % RING_POINTS
            quads.append((inner[j], outer[j], outer[k], inner[k]))
        inner = outer
    boundary = [(inner[j], inner[(j + 1) % RING_POINTS]) for j in range(RING_POINTS)]
    return quads, boundary


@dataclass(frozen=True, eq=False)
class HexMesh:
    nodes: np.ndarray
    hexes: np.ndarray
    surface_quads: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True, eq=False)
class QuadMesh:
    nodes: np.ndarray
    quads: np.ndarray


def _segment_sections(g: VascularGraph, k: int):
    pts = g.segment_vertices(k)
    return pts, segment_frames(pts)


def sweep_surface(g: VascularGraph) -> QuadMesh:
    """Open tube surfaces: 48 ring nodes per vertex, successive rings joined index to index."""
    nodes, quads = [], []
    offset = 0
    for k in range(len(g.segments)):
        pts, frames = _segment_sections(g, k)
        for p, fr in zip(pts, frames):
            nodes.append(circle_points(p[:3], fr, p[3], RING_POINTS, (1.0,)))
        for i in range(len(pts) - 1):
            a0 = offset + i * RING_POINTS
            a1 = a0 + RING_POINTS
            for j in range(RING_POINTS):
                k2 = (j + 1) % RING_POINTS
                quads.append((a0 + j, a0 + k2, a1 + k2, a1 + j))
        offset += len(pts) * RING_POINTS
    return QuadMesh(np.vstack(nodes), np.array(quads, dtype=np.int64).reshape(-1, 4))


def sweep_hex(g: VascularGraph, layers: int = DEFAULT_LAYERS) -> HexMesh:
    """O-grid hex mesh, one independent block per segment (no junction stitching)."""
    section_quads, boundary = _section_cells(layers)
    per_section = section_node_count(layers)
    nodes, hexes, surf = [], [], []
    offset = 0
    for k in range(len(g.segments)):
        pts, frames = _segment_sections(g, k)
        for p, fr in zip(pts, frames):
            nodes.append(build_section(p[:3], fr, p[3], layers).nodes())
        for i in range(len(pts) - 1):
            lo = offset + i * per_section
            hi = lo + per_section
            for q in section_quads:
                hexes.append(tuple(lo + n for n in q) + tuple(hi + n for n in q))
            for a, b in boundary:
                surf.append((lo + a, lo + b, hi + b, hi + a))
        offset += len(pts) * per_section
    return HexMesh(
        np.vstack(nodes),
        np.array(hexes, dtype=np.int64).reshape(-1, 8),
        np.array(surf, dtype=np.int64).reshape(-1, 4),
    )


def scaled_jacobian(hex_points) -> float:
    """Minimum over the 8 corners of the triple product of normalized edge vectors.

    Returns -1 when an edge has zero length.
    """
    p = np.asarray(hex_points, dtype=np.float64).reshape(8, 3)
    best = 1.0
    for c, (i, j, k) in enumerate(HEX_CORNER_NEIGHBORS):
        e = p[[i, j, k]] - p[c]
        n = np.linalg.norm(e, axis=1)
        if np.any(n == 0):
            return -1.0
        e /= n[:, None]
        best = min(best, float(np.dot(np.cross(e[0], e[1]), e[2])))
    return max(-1.0, min(1.0, best))


def scaled_jacobians(mesh: HexMesh) -> np.ndarray:
    """Vectorized ``scaled_jacobian`` over all cells."""
    p = mesh.nodes[mesh.hexes]  # (n, 8, 3)
    out = np.full(len(p), np.inf)
    degenerate = np.zeros(len(p), dtype=bool)
    for c, (i, j, k) in enumerate(HEX_CORNER_NEIGHBORS):
        e = p[:, [i, j, k]] - p[:, c:c + 1]
        n = np.linalg.norm(e, axis=2)
        bad = np.any(n == 0, axis=1)
        degenerate |= bad
        e = e / np.where(n == 0, 1.0, n)[..., None]
        out = np.minimum(out, np.einsum("nd,nd->n", np.cross(e[:, 0], e[:, 1]), e[:, 2]))
    out = np.clip(out, -1.0, 1.0)
    out[degenerate] = -1.0
    return out


@dataclass(frozen=True)
class QualityReport:
    min_scaled_jacobian: float
    mean_scaled_jacobian: float
    negative_count: int
    n_cells: int

    def to_dict(self) -> dict:
        return {
            "min_scaled_jacobian": self.min_scaled_jacobian,
            "mean_scaled_jacobian": self.mean_scaled_jacobian,
            "negative_count": self.negative_count,
            "n_cells": self.n_cells,
        }


def quality_report(mesh: HexMesh) -> QualityReport:
    if len(mesh.hexes) == 0:
        raise ValueError("quality report of an empty mesh")
    sj = scaled_jacobians(mesh)
    return QualityReport(float(sj.min()), float(sj.mean()), int(np.count_nonzero(sj <= 0)), len(sj))


def export_vtk(mesh: HexMesh | QuadMesh, path, title: str = "vasmesh") -> None:
    """Legacy ASCII unstructured grid with hexahedra (type 12) or quads (type 9)."""
    if isinstance(mesh, HexMesh):
        cells, ctype = mesh.hexes, VTK_HEXAHEDRON
    else:
        cells, ctype = mesh.quads, VTK_QUAD
    npc = cells.shape[1]
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {len(mesh.nodes)} double",
    ]
    lines += [" ".join(repr(float(x)) for x in p) for p in mesh.nodes]
    lines.append(f"CELLS {len(cells)} {len(cells) * (npc + 1)}")
    lines += [f"{npc} " + " ".join(str(int(i)) for i in c) for c in cells]
    lines.append(f"CELL_TYPES {len(cells)}")
    lines += [str(ctype)] * len(cells)
    Path(path).write_text("\n".join(lines) + "\n")


def read_vtk(path) -> tuple[np.ndarray, list[list[int]], list[int]]:
    """Parse a legacy ASCII unstructured grid back into points, cells and cell types."""
    tokens = Path(path).read_text().split("\n")
    i = 0
    points, cells, types = None, [], []
    while i < len(tokens):
        line = tokens[i].strip()
        if line.startswith("POINTS"):
            n = int(line.split()[1])
            vals = " ".join(tokens[i + 1:i + 1 + n]).split()
            points = np.array(vals, dtype=np.float64).reshape(n, 3)
            i += n
        elif line.startswith("CELLS"):
            n = int(line.split()[1])
            for row in tokens[i + 1:i + 1 + n]:
                ids = [int(t) for t in row.split()]
                if ids[0] != len(ids) - 1:
                    raise ValueError(f"malformed cell record {row!r}")
                cells.append(ids[1:])
            i += n
        elif line.startswith("CELL_TYPES"):
            n = int(line.split()[1])
            types = [int(t) for t in tokens[i + 1:i + 1 + n]]
            i += n
        i += 1
    if points is None:
        raise ValueError(f"{path}: no POINTS section")
    return points, cells, types


def export_obj(surface: QuadMesh, path) -> None:
    lines = ["v " + " ".join(repr(float(x)) for x in p) for p in surface.nodes]
    lines += ["f " + " ".join(str(int(i) + 1) for i in q) for q in surface.quads]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(t.split("/")[0]) - 1 for t in parts[1:]])
    return np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64)


def surface_of(mesh: HexMesh) -> QuadMesh:
    """Outer lateral faces of a hex mesh as a standalone quad mesh."""
    return QuadMesh(mesh.nodes, mesh.surface_quads)


def mesh_counts(g: VascularGraph, layers: int = DEFAULT_LAYERS) -> tuple[int, int]:
    """Closed-form (node, hex) totals of ``sweep_hex``."""
    sizes: Sequence[int] = [len(s) for s in g.segments]
    return (
        sum(sizes) * section_node_count(layers),
        sum(n - 1 for n in sizes) * slab_hex_count(layers),
    )
