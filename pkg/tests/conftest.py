import numpy as np
import pytest

from vasmesh.graph import VascularGraph, VesselSegment, graph_from_polylines


def straight_path(n=3, length=None, r=1.0, axis=0):
    length = float(n - 1) if length is None else length
    p = np.zeros((n, 4))
    p[:, axis] = np.linspace(0.0, length, n)
    p[:, 3] = r
    return p


def path_graph(rows, subgraph=0, level=0) -> VascularGraph:
    rows = np.asarray(rows, dtype=np.float64)
    return VascularGraph(rows, [VesselSegment(tuple(range(len(rows))), subgraph)], level)


def random_walk(rng, n, start=None, step=1.0, r_lo=0.5, r_hi=2.0):
    start = rng.uniform(-5, 5, 3) if start is None else np.asarray(start, dtype=np.float64)
    steps = rng.normal(size=(n - 1, 3))
    steps *= step / np.linalg.norm(steps, axis=1, keepdims=True)
    pos = np.vstack([start, start + np.cumsum(steps, axis=0)])
    return np.column_stack([pos, rng.uniform(r_lo, r_hi, n)])


def random_tree(rng, n_subgraphs=2, max_len=10, branches=True) -> VascularGraph:
    """Random graph: each subgraph a trunk plus an optional branch sharing its end vertex."""
    polys, subs, starts = [], [], []
    for s in range(n_subgraphs):
        base = np.array([12.0 * s, 0.0, 0.0])
        trunk = random_walk(rng, int(rng.integers(2, max_len + 1)), start=base)
        polys.append(trunk)
        subs.append(s)
        starts.append(None)
        if branches and rng.random() < 0.5:
            j = len(polys) - 1
            br = random_walk(rng, int(rng.integers(2, max_len + 1)), start=trunk[-1, :3])
            polys.append(br)
            subs.append(s)
            starts.append((j, "end"))
    return graph_from_polylines(polys, subs, starts)


def perturbed(g: VascularGraph, rng, scale=0.5) -> VascularGraph:
    v = g.vertices.copy()
    v[:, :3] += rng.normal(scale=scale, size=(len(v), 3))
    v[:, 3] = np.abs(v[:, 3] + rng.normal(scale=0.1 * scale, size=len(v))) + 0.05
    return g.with_vertices(v)


def y_graph(n=(4, 4, 4), r=1.0) -> VascularGraph:
    trunk = np.column_stack([np.linspace(0, 6, n[0]), np.zeros(n[0]), np.zeros(n[0]), np.full(n[0], r)])
    j = trunk[-1, :3]
    left = np.column_stack([
        j[0] + np.linspace(0, 5, n[1]), np.linspace(0, 4, n[1]), np.zeros(n[1]), np.full(n[1], r)])
    right = np.column_stack([
        j[0] + np.linspace(0, 5, n[2]), np.linspace(0, -4, n[2]), np.zeros(n[2]), np.full(n[2], r)])
    return graph_from_polylines([trunk, left, right], [0, 0, 0], [None, (0, "end"), (0, "end")])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_structure(rng, n_subgraphs=2, max_len=10):
    """Segment specs (subgraph, starts_at) shared by a prediction and its target."""
    spec = []
    for s in range(n_subgraphs):
        spec.append((s, None))
        if rng.random() < 0.5:
            spec.append((s, (len(spec) - 1, "end")))
    return spec


def graph_with_structure(rng, spec, max_len=10, spread=1.0):
    polys = []
    for k, (sub, link) in enumerate(spec):
        n = int(rng.integers(2, max_len + 1))
        start = polys[link[0]][-1, :3] if link else np.array([6.0 * sub, 0.0, 0.0]) + rng.normal(scale=spread, size=3)
        polys.append(random_walk(rng, n, start=start, step=rng.uniform(0.5, 1.5)))
    return graph_from_polylines(polys, [s for s, _ in spec], [l for _, l in spec])


def random_loss_instance(rng, max_len=10):
    spec = random_structure(rng, 2, max_len)
    return graph_with_structure(rng, spec, max_len), graph_with_structure(rng, spec, max_len)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
