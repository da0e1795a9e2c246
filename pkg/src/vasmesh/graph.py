"""Vascular centerline graphs: data model, validation, subdivision and templates.

A graph stores one row ``(x, y, z, r)`` per vertex (millimeters) and a list of
segments. Each segment is an unbranched path of vertex ids tagged with the id
of the connected component (subgraph) it belongs to. Edges are derived from
the segments, so every edge belongs to exactly one segment by construction.
Segments of one subgraph may share junction vertices at their endpoints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

MAX_LEVEL = 2


@dataclass(frozen=True)
class VesselSegment:
    vertex_ids: tuple[int, ...]
    subgraph: int

    def __post_init__(self):
        object.__setattr__(self, "vertex_ids", tuple(int(i) for i in self.vertex_ids))
        object.__setattr__(self, "subgraph", int(self.subgraph))

    def __len__(self):
        return len(self.vertex_ids)


@dataclass(frozen=True, eq=False)
class VascularGraph:
    """Centerline graph with per-vertex radii.

    Parameters
    ----------
    vertices : array_like, shape (m, 4)
        Rows ``(x, y, z, r)`` in millimeters.
    segments : sequence of VesselSegment
        Unbranched paths; consecutive ids are the graph edges.
    level : int
        Subdivision level, 0 for a template and up to 2 after two splits.
    """

    vertices: np.ndarray
    segments: tuple[VesselSegment, ...]
    level: int = 0

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 4)
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "level", int(self.level))

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return self.vertices[:, :3]

    @property
    def radii(self) -> np.ndarray:
        return self.vertices[:, 3]

    @cached_property
    def edges(self) -> np.ndarray:
        """(E, 2) int array in segment order, each pair as stored in its path."""
        pairs = [
            (s.vertex_ids[k], s.vertex_ids[k + 1])
            for s in self.segments
            for k in range(len(s.vertex_ids) - 1)
        ]
        return np.array(pairs, dtype=np.int64).reshape(-1, 2)

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        """Sorted 1-ring of every vertex."""
        nbrs: list[set[int]] = [set() for _ in range(self.n_vertices)]
        for a, b in self.edges:
            if a != b and 0 <= a < self.n_vertices and 0 <= b < self.n_vertices:
                nbrs[a].add(int(b))
                nbrs[b].add(int(a))
        return tuple(tuple(sorted(n)) for n in nbrs)

    def edge_matrix(self) -> np.ndarray:
        """Dense symmetric 0/1 edge indicator matrix with zero diagonal."""
        m = self.n_vertices
        e = np.zeros((m, m))
        for a, b in self.edges:
            if a != b:
                e[a, b] = e[b, a] = 1.0
        return e

    def segment_vertices(self, index: int) -> np.ndarray:
        return self.vertices[list(self.segments[index].vertex_ids)]

    def with_vertices(self, vertices) -> "VascularGraph":
        """Same topology and level, new vertex rows."""
        v = np.asarray(vertices, dtype=np.float64)
        if v.shape != self.vertices.shape:
            raise ValueError(f"expected vertices of shape {self.vertices.shape}, got {v.shape}")
        return VascularGraph(v, self.segments, self.level)

    def structure(self) -> tuple[tuple[int, int], ...]:
        """(subgraph, vertex count) per segment."""
        return tuple((s.subgraph, len(s)) for s in self.segments)


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def validate_graph(g: VascularGraph) -> ValidationReport:
    """Check every graph invariant and collect the violated ones."""
    out: list[str] = []
    m = g.n_vertices
    v = g.vertices
    if not np.all(np.isfinite(v)):
        out.append("coordinates finite")
    if np.any(~(v[:, 3] > 0)):
        out.append("radius > 0")
    if g.level not in range(MAX_LEVEL + 1):
        out.append("level in {0,1,2}")
    if not g.segments:
        out.append("at least one segment")

    ids_ok = True
    for s in g.segments:
        if len(s) < 2:
            out.append("segment length >= 2")
        if len(set(s.vertex_ids)) != len(s):
            out.append("segment ids not repeated")
        if any(i < 0 or i >= m for i in s.vertex_ids):
            ids_ok = False
    if not ids_ok:
        out.append("edge ids valid")
        return ValidationReport(tuple(dict.fromkeys(out)))

    keys = [tuple(sorted(map(int, e))) for e in g.edges]
    if any(a == b for a, b in keys):
        out.append("no self-loops")
    if len(set(keys)) != len(keys):
        out.append("edges duplicate-free")

    covered = np.zeros(m, dtype=bool)
    for s in g.segments:
        covered[list(s.vertex_ids)] = True
    if not covered.all():
        out.append("every vertex on a segment")

    if g.n_edges and m:
        e = g.edges
        adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(m, m))
        _, labels = connected_components(adj, directed=False)
        comp_of_sub: dict[int, set[int]] = {}
        for s in g.segments:
            comp_of_sub.setdefault(s.subgraph, set()).update(labels[list(s.vertex_ids)].tolist())
        comps = [c for cs in comp_of_sub.values() for c in cs]
        if any(len(cs) != 1 for cs in comp_of_sub.values()) or len(set(comps)) != len(comps):
            out.append("subgraph ids equal connected components")
    return ValidationReport(tuple(dict.fromkeys(out)))


@dataclass(frozen=True, eq=False)
class SubdivisionMap:
    """Relation between a graph and its edge-split refinement.

    Parent vertex ``i`` becomes child vertex ``copy_of_vertex[i]`` and parent
    edge ``e`` (row of ``parent_edges``) gains the midpoint ``child_of_edge[e]``.
    """

    parent_level: int
    parent_edges: np.ndarray
    child_of_edge: np.ndarray
    copy_of_vertex: np.ndarray
    n_child: int = field(default=0)

    @property
    def n_parent(self) -> int:
        return len(self.copy_of_vertex)

    def pool_matrix(self) -> np.ndarray:
        """Dense (n_child, n_parent) operator: copies pass through, midpoints average."""
        p = np.zeros((self.n_child, self.n_parent))
        p[self.copy_of_vertex, np.arange(self.n_parent)] = 1.0
        for (a, b), c in zip(self.parent_edges, self.child_of_edge):
            p[c, a] += 0.5
            p[c, b] += 0.5
        return p


def subdivide(g: VascularGraph) -> tuple[VascularGraph, SubdivisionMap]:
    """Split every edge at its midpoint (mean position and radius)."""
    if g.level >= MAX_LEVEL:
        raise ValueError(f"graph is already at level {g.level}; only levels 0..{MAX_LEVEL} exist")
    m = g.n_vertices
    edges = g.edges
    mids = 0.5 * (g.vertices[edges[:, 0]] + g.vertices[edges[:, 1]])
    child_vertices = np.vstack([g.vertices, mids])
    child_of_edge = m + np.arange(len(edges))

    segments = []
    e = 0
    for s in g.segments:
        path = [s.vertex_ids[0]]
        for k in range(1, len(s)):
            path.extend([int(child_of_edge[e]), s.vertex_ids[k]])
            e += 1
        segments.append(VesselSegment(tuple(path), s.subgraph))

    child = VascularGraph(child_vertices, segments, g.level + 1)
    smap = SubdivisionMap(
        parent_level=g.level,
        parent_edges=edges.copy(),
        child_of_edge=child_of_edge,
        copy_of_vertex=np.arange(m),
        n_child=child.n_vertices,
    )
    return child, smap


def polyline_length(points) -> float:
    p = np.asarray(points, dtype=np.float64)[:, :3]
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


def resample_segment(points, n: int) -> np.ndarray:
    """Resample a polyline of ``(x, y, z, r)`` rows to ``n`` arclength-uniform rows.

    Radii are interpolated linearly in arclength; both endpoints are kept
    bit-exact.
    """
    p = np.asarray(points, dtype=np.float64)
    if n < 2 or len(p) < 2:
        raise ValueError("resampling needs n >= 2 and at least two input vertices")
    seg = np.linalg.norm(np.diff(p[:, :3], axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if not s[-1] > 0:
        raise ValueError("cannot resample a zero-length segment")
    t = np.linspace(0.0, s[-1], n)
    out = np.column_stack([np.interp(t, s, p[:, c]) for c in range(p.shape[1])])
    out[0] = p[0]
    out[-1] = p[-1]
    return out


def graph_from_polylines(
    polylines: Sequence[np.ndarray],
    subgraphs: Sequence[int],
    starts_at: Sequence[tuple[int, str] | None] | None = None,
    level: int = 0,
) -> VascularGraph:
    """Assemble a graph from per-segment ``(n, 4)`` polylines.

    ``starts_at[k] = (j, "end")`` (or ``"start"``) makes segment ``k`` reuse
    the corresponding endpoint vertex of an earlier segment ``j`` instead of
    its own first row.
    """
    starts_at = starts_at or [None] * len(polylines)
    rows: list[np.ndarray] = []
    segments: list[VesselSegment] = []
    for k, (poly, sub) in enumerate(zip(polylines, subgraphs)):
        poly = np.asarray(poly, dtype=np.float64)
        ids = []
        link = starts_at[k]
        if link is not None:
            j, which = link
            ids.append(segments[j].vertex_ids[-1 if which == "end" else 0])
            poly = poly[1:]
        for row in poly:
            ids.append(len(rows))
            rows.append(row)
        segments.append(VesselSegment(tuple(ids), sub))
    return VascularGraph(np.array(rows).reshape(-1, 4), segments, level)


def _endpoint_signature(g: VascularGraph) -> tuple:
    """Segment structure with endpoint ids relabelled by first appearance."""
    labels: dict[int, int] = {}
    sig = []
    endpoints = set()
    for s in g.segments:
        ends = []
        for i in (s.vertex_ids[0], s.vertex_ids[-1]):
            labels.setdefault(i, len(labels))
            ends.append(labels[i])
            endpoints.add(i)
        sig.append((s.subgraph, ends[0], ends[1]))
    interior = [i for s in g.segments for i in s.vertex_ids[1:-1]]
    if len(set(interior)) != len(interior) or endpoints & set(interior):
        raise ValueError("template construction requires junctions at segment endpoints only")
    return tuple(sig)


def symmetric_mean_distance(a, b) -> float:
    """Mean nearest-point distance between two point sets, averaged over both directions."""
    pa = np.asarray(a, dtype=np.float64)[:, :3]
    pb = np.asarray(b, dtype=np.float64)[:, :3]
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def medoid_index(graphs: Sequence[VascularGraph]) -> int:
    """Index of the graph with the smallest summed distance to all the others."""
    n = len(graphs)
    cost = np.zeros(n)
    for i in range(n):
        for j in range(i + 1, n):
            d = symmetric_mean_distance(graphs[i].vertices, graphs[j].vertices)
            cost[i] += d
            cost[j] += d
    return int(np.argmin(cost))


def build_template(
    training_graphs: Sequence[VascularGraph], vertices_per_segment: Sequence[int]
) -> VascularGraph:
    """Build a level-0 template from graphs sharing one segment topology.

    The medoid graph fixes the junction layout; every segment is then
    replaced by the per-vertex mean of all training segments after resampling
    each to ``vertices_per_segment[m]`` arclength-uniform vertices.
    """
    graphs = list(training_graphs)
    if not graphs:
        raise ValueError("need at least one training graph")
    sigs = {_endpoint_signature(g) for g in graphs}
    if len(sigs) != 1:
        raise ValueError("training graphs do not share a segment/subgraph topology")
    counts = [int(c) for c in vertices_per_segment]
    ref = graphs[medoid_index(graphs)]
    if len(counts) != len(ref.segments):
        raise ValueError(f"need {len(ref.segments)} vertex counts, got {len(counts)}")

    rows: list[np.ndarray] = []
    id_of_endpoint: dict[int, int] = {}
    segments = []
    for k, (seg, n) in enumerate(zip(ref.segments, counts)):
        mean = np.mean([resample_segment(g.segment_vertices(k), n) for g in graphs], axis=0)
        ids = []
        for j, row in enumerate(mean):
            key = seg.vertex_ids[0] if j == 0 else seg.vertex_ids[-1] if j == n - 1 else None
            if key is not None and key in id_of_endpoint:
                ids.append(id_of_endpoint[key])
                continue
            ids.append(len(rows))
            rows.append(row)
            if key is not None:
                id_of_endpoint[key] = ids[-1]
        segments.append(VesselSegment(tuple(ids), seg.subgraph))
    return VascularGraph(np.array(rows), segments, 0)


def graph_to_dict(g: VascularGraph) -> dict:
    return {
        "units": "mm",
        "level": g.level,
        "vertices": g.vertices.tolist(),
        "segments": [{"subgraph": s.subgraph, "vertex_ids": list(s.vertex_ids)} for s in g.segments],
    }


def graph_from_dict(d: dict) -> VascularGraph:
    if d.get("units", "mm") != "mm":
        raise ValueError(f"unsupported units {d['units']!r}")
    segs = [VesselSegment(tuple(s["vertex_ids"]), s["subgraph"]) for s in d["segments"]]
    return VascularGraph(np.array(d["vertices"], dtype=np.float64).reshape(-1, 4), segs, d.get("level", 0))


def save_graph(g: VascularGraph, path) -> None:
    # float repr is the shortest string that round-trips a float64 exactly
    Path(path).write_text(json.dumps(graph_to_dict(g)) + "\n")


def load_graph(path) -> VascularGraph:
    return graph_from_dict(json.loads(Path(path).read_text()))


def iter_segment_points(g: VascularGraph) -> Iterable[np.ndarray]:
    for k in range(len(g.segments)):
        yield g.segment_vertices(k)
