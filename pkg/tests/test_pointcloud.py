"""Spatial queries against brute-force scans; transform algebra to 1e-12."""
import numpy as np
import pytest

from voxdesc.pointcloud import (
    AffineTransform,
    PointCloud,
    RigidTransform,
    apply_transform,
    build_spatial_index,
    compose,
    farthest_point_sample,
    invert_rigid,
    knn_query,
    radius_query,
)


def _random_rotation(rng) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _brute_radius(pts, center, radius):
    d = np.linalg.norm(pts - center, axis=1)
    return np.flatnonzero(d <= radius)


def _brute_knn(pts, center, k):
    d = np.linalg.norm(pts - center, axis=1)
    return np.argsort(d, kind="stable")[:k]


def _brute_fps(pts, k, start):
    chosen = [start]
    d = np.linalg.norm(pts - pts[start], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(pts - pts[nxt], axis=1))
    return np.asarray(chosen)


# ---------------------------------------------------------------------------
# container and transforms


def test_cloud_is_immutable_float64():
    cloud = PointCloud(np.zeros((4, 3), dtype=np.float32), id="c")
    assert cloud.points.dtype == np.float64
    assert len(cloud) == 4
    with pytest.raises(ValueError):
        cloud.points[0, 0] = 1.0


def test_cloud_rejects_bad_shapes_and_nonfinite():
    with pytest.raises(ValueError, match=r"\(n, 3\)"):
        PointCloud(np.zeros((5, 2)))
    with pytest.raises(ValueError, match="at least one"):
        PointCloud(np.zeros((0, 3)))
    bad = np.zeros((3, 3))
    bad[1, 2] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        PointCloud(bad)


def test_rigid_rejects_non_rotations():
    with pytest.raises(ValueError, match="orthonormal"):
        RigidTransform(np.eye(3) * 1.01, np.zeros(3))
    with pytest.raises(ValueError, match="determinant"):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError, match="non-finite"):
        RigidTransform(np.eye(3), np.array([0.0, np.inf, 0.0]))


def test_affine_accepts_non_orthonormal():
    t = AffineTransform(2.0 * np.eye(3), np.ones(3))
    np.testing.assert_allclose(t.apply(np.ones((1, 3))), [[3.0, 3.0, 3.0]])


def test_transform_algebra_round_trips():
    rng = np.random.default_rng(7)
    for _ in range(20):
        r = _random_rotation(rng)
        t = RigidTransform(r, rng.normal(size=3))
        pts = rng.normal(size=(15, 3))
        np.testing.assert_allclose(t.apply(pts), pts @ r.T + t.translation, atol=1e-12)
        inv = invert_rigid(t)
        np.testing.assert_allclose(inv.apply(t.apply(pts)), pts, atol=1e-12)
        both = compose(t, inv)
        np.testing.assert_allclose(both.matrix, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(both.translation, 0.0, atol=1e-12)


def test_compose_applies_right_operand_first():
    rng = np.random.default_rng(3)
    a = RigidTransform(_random_rotation(rng), rng.normal(size=3))
    b = AffineTransform(rng.normal(size=(3, 3)), rng.normal(size=3))
    pts = rng.normal(size=(9, 3))
    np.testing.assert_allclose(
        compose(a, b).apply(pts), a.apply(b.apply(pts)), atol=1e-12
    )


def test_as_matrix_is_homogeneous():
    rng = np.random.default_rng(11)
    t = RigidTransform(_random_rotation(rng), rng.normal(size=3))
    m = t.as_matrix()
    assert m.shape == (4, 4)
    np.testing.assert_allclose(m[3], [0, 0, 0, 1])
    pts = rng.normal(size=(6, 3))
    hom = np.column_stack([pts, np.ones(6)]) @ m.T
    np.testing.assert_allclose(hom[:, :3], t.apply(pts), atol=1e-12)


def test_apply_transform_marks_derived_cloud():
    cloud = PointCloud(np.eye(3), id="base")
    out = apply_transform(RigidTransform.identity(), cloud)
    assert out.id == "base:t"
    np.testing.assert_allclose(out.points, cloud.points)


def test_compose_rejects_unknown_types():
    with pytest.raises(TypeError, match="RigidTransform or AffineTransform"):
        compose(np.eye(4), RigidTransform.identity())
    with pytest.raises(TypeError):
        invert_rigid(np.eye(4))


# ---------------------------------------------------------------------------
# queries vs brute force


def test_radius_query_matches_brute_force():
    for seed in range(25):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(80, 3))
        cloud = PointCloud(pts)
        index = build_spatial_index(cloud)
        center = rng.normal(size=3)
        radius = float(rng.uniform(0.2, 2.0))
        got = radius_query(index, center, radius)
        np.testing.assert_array_equal(got, _brute_radius(pts, center, radius))


def test_radius_query_keeps_exact_boundary_point():
    # one point sits at exactly the query radius; <= must include it
    pts = np.array([[0.7, 0.0, 0.0], [0.1, 0.1, 0.1], [2.0, 0.0, 0.0]])
    index = build_spatial_index(PointCloud(pts))
    got = radius_query(index, np.zeros(3), 0.7)
    np.testing.assert_array_equal(got, [0, 1])


def test_radius_query_rejects_nonpositive_radius():
    index = build_spatial_index(PointCloud(np.eye(3)))
    with pytest.raises(ValueError, match="radius"):
        radius_query(index, np.zeros(3), 0.0)


def test_knn_query_matches_brute_force():
    for seed in range(25):
        rng = np.random.default_rng(seed + 100)
        pts = rng.normal(size=(60, 3))
        index = build_spatial_index(PointCloud(pts))
        center = rng.normal(size=3)
        k = int(rng.integers(1, 60))
        got = knn_query(index, center, k)
        np.testing.assert_array_equal(got, _brute_knn(pts, center, k))


def test_knn_query_breaks_ties_toward_lower_index():
    # indices 1 and 2 are equidistant from the origin; 1 must win the last slot
    pts = np.array([[0.1, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
    index = build_spatial_index(PointCloud(pts))
    np.testing.assert_array_equal(knn_query(index, np.zeros(3), 2), [0, 1])
    np.testing.assert_array_equal(knn_query(index, np.zeros(3), 3), [0, 1, 2])


def test_knn_query_validates_k():
    index = build_spatial_index(PointCloud(np.eye(3)))
    with pytest.raises(ValueError, match="k must be"):
        knn_query(index, np.zeros(3), 0)
    with pytest.raises(ValueError, match="k must be"):
        knn_query(index, np.zeros(3), 4)


# ---------------------------------------------------------------------------
# farthest point sampling


def test_fps_matches_greedy_oracle_with_forced_start():
    for seed in range(15):
        rng = np.random.default_rng(seed + 50)
        pts = rng.normal(size=(40, 3))
        cloud = PointCloud(pts)
        start = int(rng.integers(40))
        k = int(rng.integers(2, 40))
        got = farthest_point_sample(cloud, k, seed=0, start=start)
        np.testing.assert_array_equal(got, _brute_fps(pts, k, start))


def test_fps_seed_controls_free_start():
    cloud = PointCloud(np.random.default_rng(1).normal(size=(30, 3)))
    a = farthest_point_sample(cloud, 8, seed=4)
    b = farthest_point_sample(cloud, 8, seed=4)
    np.testing.assert_array_equal(a, b)
    start = int(np.random.default_rng(4).integers(30))
    assert a[0] == start


def test_fps_indices_are_distinct_and_spread():
    cloud = PointCloud(np.random.default_rng(9).normal(size=(50, 3)))
    got = farthest_point_sample(cloud, 12, seed=2)
    assert len(set(got.tolist())) == 12
    # greedy max-min: the chosen set's min pairwise distance beats random picks
    pts = cloud.points[got]
    dmat = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    np.fill_diagonal(dmat, np.inf)
    rng = np.random.default_rng(0)
    rand = cloud.points[rng.choice(50, size=12, replace=False)]
    rmat = np.linalg.norm(rand[:, None] - rand[None], axis=2)
    np.fill_diagonal(rmat, np.inf)
    assert dmat.min() >= rmat.min()


def test_fps_validates_arguments():
    cloud = PointCloud(np.eye(3))
    with pytest.raises(ValueError, match="k must be"):
        farthest_point_sample(cloud, 0, seed=0)
    with pytest.raises(ValueError, match="k must be"):
        farthest_point_sample(cloud, 4, seed=0)
    with pytest.raises(ValueError, match="start index"):
        farthest_point_sample(cloud, 2, seed=0, start=3)
