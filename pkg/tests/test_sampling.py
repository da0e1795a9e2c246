import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vasmesh.graph import VascularGraph, VesselSegment
from vasmesh.sampling import (
    FeatureVolume,
    LocalFrame,
    circle_points,
    load_volume,
    sample_vertex_features,
    save_volume,
    segment_frames,
    trilinear,
    trilinear_sample,
    vertex_frames,
)

from conftest import path_graph, random_tree, random_walk, straight_path, y_graph

IDENTITY = LocalFrame(np.array([0.0, 0, 1]), np.array([1.0, 0, 0]), np.array([0.0, 1, 0]))


def rmf_double_reflection(points, u0):
    """Rotation-minimizing frames by the double-reflection method on the given polyline."""
    p = np.asarray(points, dtype=np.float64)
    t = np.gradient(p, axis=0)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    us = [u0 / np.linalg.norm(u0)]
    for i in range(len(p) - 1):
        v1 = p[i + 1] - p[i]
        c1 = v1 @ v1
        rl = us[-1] - (2 / c1) * (v1 @ us[-1]) * v1
        tl = t[i] - (2 / c1) * (v1 @ t[i]) * v1
        v2 = t[i + 1] - tl
        c2 = v2 @ v2
        us.append(rl - (2 / c2) * (v2 @ rl) * v2 if c2 > 0 else rl)
    return np.array(us)


# ---------------------------------------------------------------- volumes


def test_volume_validation():
    with pytest.raises(ValueError):
        FeatureVolume(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        FeatureVolume(np.zeros((1, 2, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(ValueError):
        FeatureVolume(np.full((1, 2, 2, 2), np.inf))
    vol = FeatureVolume(np.zeros((3, 3, 3)))
    assert vol.channels == 1 and vol.dims == (3, 3, 3)


def test_volume_round_trip(tmp_path, rng):
    vol = FeatureVolume(rng.normal(size=(2, 3, 4, 5)).astype(np.float32), (0.5, 1.0, 2.0), (1.0, -2.0, 3.0))
    save_volume(vol, tmp_path / "v")
    back = load_volume(tmp_path / "v")
    np.testing.assert_array_equal(back.data, vol.data)
    assert back.spacing == vol.spacing and back.origin == vol.origin
    # x varies fastest on disk
    raw = np.frombuffer((tmp_path / "v.raw").read_bytes(), dtype="<f4")
    assert raw[1] == np.float32(vol.data[0, 1, 0, 0])


def test_volume_truncated_raw_is_rejected(tmp_path):
    save_volume(FeatureVolume(np.ones((1, 2, 2, 2))), tmp_path / "v")
    (tmp_path / "v.raw").write_bytes(b"\0" * 12)
    with pytest.raises(ValueError):
        load_volume(tmp_path / "v")


# ---------------------------------------------------------------- trilinear


def test_constant_volume():
    vol = FeatureVolume(np.full((1, 4, 4, 4), 7.0))
    pts = np.random.default_rng(0).uniform(-2, 6, size=(20, 3))
    np.testing.assert_allclose(trilinear(vol, pts), 7.0, atol=1e-12)


def test_voxel_centers_are_exact(rng):
    vol = FeatureVolume(rng.normal(size=(2, 4, 5, 6)), (0.5, 2.0, 1.0), (1.0, 2.0, -3.0))
    centers = vol.voxel_centers().reshape(-1, 3)
    vals = trilinear(vol, centers)
    np.testing.assert_array_equal(vals, vol.data.reshape(2, -1).T)


def test_cell_center_is_corner_mean():
    data = np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2)
    vol = FeatureVolume(data)
    assert trilinear_sample(vol, [0.5, 0.5, 0.5], 0) == pytest.approx(3.5, abs=1e-15)


def test_trilinear_matches_corner_sum_oracle(rng):
    vol = FeatureVolume(rng.normal(size=(1, 5, 5, 5)), (1.5, 1.0, 0.5), (0.3, -1, 2))
    for _ in range(50):
        p = np.asarray(vol.origin) + rng.uniform(0, 4, 3) * np.asarray(vol.spacing)
        u = (p - np.asarray(vol.origin)) / np.asarray(vol.spacing)
        i = np.minimum(np.floor(u).astype(int), 3)
        f = u - i
        want = 0.0
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = (f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1]) * (f[2] if dz else 1 - f[2])
                    want += w * vol.data[0, i[0] + dx, i[1] + dy, i[2] + dz]
        assert trilinear_sample(vol, p, 0) == pytest.approx(want, abs=1e-12)


def test_out_of_bounds_clamps():
    data = np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2)
    vol = FeatureVolume(data)
    assert trilinear_sample(vol, [-5, -5, -5], 0) == 0.0
    assert trilinear_sample(vol, [9, 9, 9], 0) == 7.0
    assert trilinear_sample(vol, [9, 0, 0], 0) == data[0, 1, 0, 0]


def test_channel_index_checked():
    with pytest.raises(IndexError):
        trilinear_sample(FeatureVolume(np.ones((1, 2, 2, 2))), [0, 0, 0], 1)


# ---------------------------------------------------------------- frames


def check_frame(fr: LocalFrame):
    m = np.array([fr.tangent, fr.normal_u, fr.normal_v])
    np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(m) == pytest.approx(1.0, abs=1e-9)


def test_straight_segment_frames():
    frames = segment_frames(straight_path(6))
    for fr in frames:
        np.testing.assert_allclose(fr.tangent, [1, 0, 0], atol=1e-15)
        np.testing.assert_allclose(fr.normal_u, frames[0].normal_u, atol=1e-15)
        check_frame(fr)


def test_two_vertex_segment_shares_tangent():
    frames = segment_frames([[0, 0, 0, 1], [1, 2, 2, 1]])
    np.testing.assert_allclose(frames[0].tangent, [1 / 3, 2 / 3, 2 / 3])
    np.testing.assert_allclose(frames[1].tangent, frames[0].tangent)


def test_coincident_points_are_rejected():
    with pytest.raises(ValueError):
        segment_frames([[0, 0, 0, 1], [0, 0, 0, 1], [1, 0, 0, 1]])


def test_planar_quarter_circle_has_no_extra_twist():
    t = np.linspace(0, np.pi / 2, 25)
    pts = np.column_stack([3 * np.cos(t), 3 * np.sin(t), np.zeros_like(t)])
    frames = segment_frames(pts)
    # oracle on a 40x denser sampling of the same arc
    td = np.linspace(0, np.pi / 2, 24 * 40 + 1)
    dense = np.column_stack([3 * np.cos(td), 3 * np.sin(td), np.zeros_like(td)])
    ref = rmf_double_reflection(dense, frames[0].normal_u)[::40]
    for fr, u in zip(frames, ref):
        u = u - (u @ fr.tangent) * fr.tangent
        u /= np.linalg.norm(u)
        ang = np.arctan2(np.cross(u, fr.normal_u) @ fr.tangent, u @ fr.normal_u)
        assert abs(ang) < 1e-6


def helix_drift(n, sub=50):
    t = np.linspace(0, 2 * np.pi, n)
    pts = np.column_stack([4 * np.cos(t), 4 * np.sin(t), 1.5 * t])
    frames = segment_frames(pts)
    td = np.linspace(0, 2 * np.pi, (n - 1) * sub + 1)
    dense = np.column_stack([4 * np.cos(td), 4 * np.sin(td), 1.5 * td])
    ref = rmf_double_reflection(dense, frames[0].normal_u)[::sub]
    worst = 0.0
    for fr, u in zip(frames, ref):
        check_frame(fr)
        u = u - (u @ fr.tangent) * fr.tangent
        u /= np.linalg.norm(u)
        worst = max(worst, abs(np.arctan2(np.cross(u, fr.normal_u) @ fr.tangent, u @ fr.normal_u)))
    return worst


def test_helix_frames_converge_to_rotation_minimizing_frames():
    # projection transport is first order: the drift per turn halves with the vertex spacing
    coarse, fine = helix_drift(80), helix_drift(159)
    assert coarse < 0.06
    assert fine < 0.6 * coarse


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 30))
def test_frames_are_orthonormal_right_handed(seed, n):
    pts = random_walk(np.random.default_rng(seed), n)
    for fr in segment_frames(pts):
        check_frame(fr)


def test_junction_takes_first_segment_frame():
    g = y_graph()
    frames = vertex_frames(g)
    junction = g.segments[0].vertex_ids[-1]
    np.testing.assert_array_equal(frames[junction].tangent, segment_frames(g.segment_vertices(0))[-1].tangent)


# ---------------------------------------------------------------- circles


def test_default_circle_sample_count():
    assert circle_points([0, 0, 0], IDENTITY, 1.0).shape == (144, 3)


def test_unit_circle_four_points():
    pts = circle_points([0, 0, 0], IDENTITY, 1.0, 4, (1.0,))
    np.testing.assert_allclose(pts, [[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10))
def test_circle_radii_exact(seed, r):
    rng = np.random.default_rng(seed)
    fr = segment_frames(random_walk(rng, 3))[1]
    c = rng.normal(size=3)
    pts = circle_points(c, fr, r).reshape(3, 48, 3)
    for a, ring in zip((0.5, 1.0, 1.5), pts):
        np.testing.assert_allclose(np.linalg.norm(ring - c, axis=1), a * r, atol=1e-12)
        np.testing.assert_allclose((ring - c) @ fr.tangent, 0.0, atol=1e-12)


def test_circle_rejects_bad_radius():
    with pytest.raises(ValueError):
        circle_points([0, 0, 0], IDENTITY, 0.0)


# ---------------------------------------------------------------- vertex features


def test_constant_volume_features(rng):
    g = random_tree(rng)
    vol = FeatureVolume(np.full((2, 4, 4, 4), 3.25), origin=(-10, -10, -10), spacing=(8, 8, 8))
    f = sample_vertex_features(g, vol).features
    assert f.shape == (g.n_vertices, 2)
    np.testing.assert_allclose(f, 3.25, atol=1e-12)


def test_linear_ramp_gives_center_coordinate():
    xs = np.arange(10.0)
    ramp = np.broadcast_to(xs[:, None, None], (10, 10, 10))
    vol = FeatureVolume(ramp[None].copy())
    g = path_graph([[4.3, 5.0, 5.0, 1.0], [4.3, 5.0, 6.0, 1.0]])
    f = sample_vertex_features(g, vol, 4, (1.0,)).features
    np.testing.assert_allclose(f[:, 0], 4.3, atol=1e-12)


def test_signed_distance_tube_ring_mean_is_near_zero():
    radius, h = 3.0, 0.5
    n = 41
    axes = np.arange(n) * h
    x, y, z = np.meshgrid(axes, axes, axes, indexing="ij")
    c = axes[-1] / 2
    sd = np.sqrt((y - c) ** 2 + (z - c) ** 2) - radius
    vol = FeatureVolume(sd[None], (h, h, h))
    pts = np.column_stack([np.linspace(4, 16, 7), np.full(7, c), np.full(7, c), np.full(7, radius)])
    g = path_graph(pts)
    f = sample_vertex_features(g, vol, 48, (1.0,)).features
    assert np.max(np.abs(f)) < h


def test_moment_columns_point_towards_structure():
    n = 21
    x, y, z = np.meshgrid(*[np.arange(n, dtype=float)] * 3, indexing="ij")
    blob = np.exp(-((y - 14) ** 2 + (z - 10) ** 2) / 8.0)
    vol = FeatureVolume(blob[None])
    g = path_graph([[5, 10, 10, 3], [15, 10, 10, 3]])
    f = sample_vertex_features(g, vol, moments=True).features
    assert f.shape == (2, 4)
    mom = f[:, 1:4]
    assert np.all(mom[:, 1] > 0)
    np.testing.assert_allclose(mom[:, [0, 2]], 0.0, atol=1e-12)
    np.testing.assert_array_equal(f[:, :1], sample_vertex_features(g, vol).features)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(-5, 5), st.integers(-5, 5), st.integers(-5, 5))
def test_sampling_translation_invariant(seed, dx, dy, dz):
    rng = np.random.default_rng(seed)
    vol = FeatureVolume(rng.normal(size=(2, 12, 12, 12)), (1.0, 1.0, 1.0), (-6, -6, -6))
    g = path_graph(random_walk(rng, 5, start=[0, 0, 0], r_lo=0.5, r_hi=1.5))
    shift = np.array([dx, dy, dz], dtype=float) * 0.75
    vol2 = FeatureVolume(vol.data, vol.spacing, tuple(np.asarray(vol.origin) + shift))
    g2 = g.with_vertices(g.vertices + np.append(shift, 0.0))
    a = sample_vertex_features(g, vol, moments=True).features
    b = sample_vertex_features(g2, vol2, moments=True).features
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_feature_rows_follow_vertex_order_and_are_deterministic(rng):
    vol = FeatureVolume(rng.normal(size=(1, 10, 10, 10)), origin=(-5, -5, -5))
    g = path_graph(random_walk(rng, 4, start=[0, 0, 0]))
    a = sample_vertex_features(g, vol).features
    b = sample_vertex_features(g, vol).features
    assert a.tobytes() == b.tobytes()
    # relabelling the vertices permutes the rows and nothing else
    perm = rng.permutation(g.n_vertices)
    inv = np.argsort(perm)
    relabelled = VascularGraph(g.vertices[perm], [VesselSegment(tuple(int(inv[i]) for i in g.segments[0].vertex_ids), 0)])
    b = sample_vertex_features(relabelled, vol).features
    np.testing.assert_array_equal(b, a[perm])
