"""Occupancy grids vs a per-pair loop oracle; analytic gradients vs FD."""
import io

import numpy as np
import pytest

from voxdesc.lrf import LrfFrame
from voxdesc.pointcloud import PointCloud, build_spatial_index
from voxdesc.voxelizer import (
    VoxelGrid,
    VoxelGridSpec,
    dump_voxels,
    point_in_voxel_prob,
    voxel_centers,
    voxelize,
    voxelize_backward,
    voxelize_batch,
    voxelize_backward_batch,
)

_CLAMP = 1.0 - 1e-15


def _frame(axes=None, center=(0.0, 0.0, 0.0)) -> LrfFrame:
    return LrfFrame(np.eye(3) if axes is None else axes, np.asarray(center), 0.3)


def _spec(center=(0, 0, 0), support=1.0, resolution=4, sharpness=1e-3,
          cutoff=0.0, axes=None) -> VoxelGridSpec:
    return VoxelGridSpec(center=np.asarray(center, dtype=float), frame=_frame(axes),
                         support=support, resolution=resolution,
                         sharpness=sharpness, cutoff=cutoff)


def _random_rotation(rng) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _oracle_values(pts: np.ndarray, spec: VoxelGridSpec) -> np.ndarray:
    """Direct noisy-or over per-pair probabilities, independent arithmetic."""
    centers = voxel_centers(spec).reshape(-1, 3)
    r = spec.support / (2.0 * spec.resolution)
    out = np.zeros(len(centers))
    for k, ck in enumerate(centers):
        surv = 1.0
        for p in pts:
            pr = point_in_voxel_prob(p, ck, r, spec.sharpness)
            if spec.cutoff > 0.0 and pr < spec.cutoff:
                continue
            surv *= 1.0 - min(pr, _CLAMP)
        out[k] = 1.0 - surv
    h = spec.resolution
    return out.reshape(h, h, h)


def _rel(a: float, n: float) -> float:
    # additive floor keeps FD noise from dominating near-zero gradients
    return abs(a - n) / max(1e-4, abs(a) + abs(n))


# ---------------------------------------------------------------------------
# geometry and the per-pair probability


def test_voxel_centers_h2_lattice():
    got = voxel_centers(_spec(resolution=2)).reshape(-1, 3)
    want = np.array([[sa, sb, sc] for sa in (-0.25, 0.25)
                     for sb in (-0.25, 0.25) for sc in (-0.25, 0.25)])
    np.testing.assert_allclose(got, want, atol=1e-15)


def test_voxel_centers_rotate_with_frame():
    rng = np.random.default_rng(2)
    q = _random_rotation(rng)
    center = rng.normal(size=3)
    base = voxel_centers(_spec(center=center, resolution=3))
    rot = voxel_centers(_spec(center=center, resolution=3, axes=q))
    np.testing.assert_allclose(rot, center + (base - center) @ q.T, atol=1e-12)


def test_prob_boundary_is_exactly_half():
    assert point_in_voxel_prob([0.25, 0.0, 0.0], [0.0, 0.0, 0.0], 0.25, 1e-3) == 0.5


def test_prob_at_voxel_center_spot_value():
    # r = 1/(2*16), sigma = 1e-3: sigmoid(r^2/sigma) = sigmoid(0.9765625)
    got = point_in_voxel_prob([0.0, 0.0, 0.0], [0.0, 0.0, 0.0], 1.0 / 32, 1e-3)
    assert abs(got - 0.72637) < 1e-4
    np.testing.assert_allclose(got, 1.0 / (1.0 + np.exp(-0.9765625)), rtol=1e-12)


def test_prob_saturates_far_away():
    r = 1.0 / 32
    assert point_in_voxel_prob([10 * r, 0, 0], [0, 0, 0], r, 1e-3) < 1e-30


def test_prob_validates_inputs():
    with pytest.raises(ValueError, match="radius"):
        point_in_voxel_prob([0, 0, 0], [0, 0, 0], 0.0, 1e-3)
    with pytest.raises(ValueError, match="sigma"):
        point_in_voxel_prob([0, 0, 0], [0, 0, 0], 0.1, 0.0)


def test_spec_validation():
    with pytest.raises(ValueError, match="support"):
        _spec(support=0.0)
    with pytest.raises(ValueError, match="resolution"):
        _spec(resolution=1)
    with pytest.raises(ValueError, match="sharpness"):
        _spec(sharpness=-1.0)
    with pytest.raises(ValueError, match="cutoff"):
        _spec(cutoff=0.01)
    with pytest.raises(TypeError, match="LrfFrame"):
        VoxelGridSpec(np.zeros(3), np.eye(3), 1.0, 4, 1e-3)
    with pytest.raises(ValueError, match="non-finite"):
        _spec(center=(np.nan, 0, 0))


# ---------------------------------------------------------------------------
# forward vs oracle


def test_voxelize_matches_loop_oracle():
    for seed in range(8):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-0.6, 0.6, size=(25, 3))
        cloud = PointCloud(pts)
        for cutoff in (0.0, 1e-6, 1e-4):
            spec = _spec(resolution=3, cutoff=cutoff)
            grid = voxelize(cloud, spec)
            np.testing.assert_allclose(grid.values, _oracle_values(pts, spec),
                                       rtol=0, atol=1e-12)
            assert grid.values.min() >= 0.0 and grid.values.max() <= 1.0


def test_voxelize_single_boundary_point_gives_half():
    spec = _spec(resolution=2)
    centers = voxel_centers(spec).reshape(-1, 3)
    r = spec.support / 4.0
    u = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)
    cloud = PointCloud((centers[0] + r * u)[None, :])
    grid = voxelize(cloud, spec)
    assert abs(grid.values.reshape(-1)[0] - 0.5) < 1e-12


def test_voxelize_two_boundary_points_give_three_quarters():
    spec = _spec(resolution=2)
    c0 = voxel_centers(spec).reshape(-1, 3)[0]
    r = spec.support / 4.0
    cloud = PointCloud(np.stack([c0 + [r, 0, 0], c0 - [r, 0, 0]]))
    grid = voxelize(cloud, spec)
    assert abs(grid.values.reshape(-1)[0] - 0.75) < 1e-12


def test_voxelize_far_cloud_is_empty():
    cloud = PointCloud(np.full((10, 3), 50.0))
    grid = voxelize(cloud, _spec(cutoff=1e-6))
    np.testing.assert_array_equal(grid.values, 0.0)


def test_voxelize_with_index_matches_without():
    rng = np.random.default_rng(4)
    cloud = PointCloud(rng.uniform(-1, 1, size=(60, 3)))
    for cutoff in (0.0, 1e-6):
        spec = _spec(cutoff=cutoff)
        a = voxelize(cloud, spec).values
        b = voxelize(cloud, spec, index=build_spatial_index(cloud)).values
        np.testing.assert_array_equal(a, b)


def test_voxelize_permutation_bit_identical_at_zero_cutoff():
    rng = np.random.default_rng(7)
    pts = rng.uniform(-0.5, 0.5, size=(40, 3))
    spec = _spec(cutoff=0.0)
    base = voxelize(PointCloud(pts), spec).values
    for seed in range(5):
        perm = np.random.default_rng(seed).permutation(40)
        np.testing.assert_array_equal(voxelize(PointCloud(pts[perm]), spec).values, base)


def test_voxelize_permutation_close_with_cutoff():
    rng = np.random.default_rng(9)
    pts = rng.uniform(-0.5, 0.5, size=(40, 3))
    spec = _spec(cutoff=1e-6)
    base = voxelize(PointCloud(pts), spec).values
    perm = np.random.default_rng(1).permutation(40)
    np.testing.assert_allclose(voxelize(PointCloud(pts[perm]), spec).values, base,
                               rtol=0, atol=1e-12)


def test_voxelize_rotation_invariant_representation():
    rng = np.random.default_rng(11)
    pts = rng.uniform(-0.5, 0.5, size=(30, 3))
    center = rng.normal(size=3) * 0.1
    spec = _spec(center=center)
    base = voxelize(PointCloud(pts), spec).values
    q = _random_rotation(rng)
    moved = PointCloud(pts @ q.T)
    spec_rot = _spec(center=q @ center, axes=q)
    np.testing.assert_allclose(voxelize(moved, spec_rot).values, base,
                               rtol=0, atol=1e-9)


def test_voxelize_monotone_in_points():
    rng = np.random.default_rng(13)
    pts = rng.uniform(-0.5, 0.5, size=(20, 3))
    spec = _spec()
    base = voxelize(PointCloud(pts), spec).values
    more = voxelize(PointCloud(np.vstack([pts, rng.uniform(-0.5, 0.5, size=(5, 3))])),
                    spec).values
    assert (more - base).min() >= -1e-15


def test_voxelize_batch_thread_count_invariant():
    rng = np.random.default_rng(15)
    cloud = PointCloud(rng.uniform(-0.6, 0.6, size=(50, 3)))
    specs = [_spec(center=rng.normal(size=3) * 0.2, cutoff=1e-6) for _ in range(6)]
    index = build_spatial_index(cloud)
    one = voxelize_batch(cloud, specs, index, threads=1)
    four = voxelize_batch(cloud, specs, index, threads=4)
    assert len(one) == len(four) == 6
    for a, b in zip(one, four):
        np.testing.assert_array_equal(a.values, b.values)


# ---------------------------------------------------------------------------
# backward vs finite differences


def _fd_support(pts, spec, up, eps=1e-5):
    def val(s):
        s2 = VoxelGridSpec(spec.center, spec.frame, s, spec.resolution,
                           spec.sharpness, spec.cutoff)
        return float((up * voxelize(PointCloud(pts), s2).values).sum())

    return (val(spec.support + eps) - val(spec.support - eps)) / (2 * eps)


def test_backward_support_gradient_many_configs():
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-0.6, 0.6, size=(15, 3))
        spec = _spec(support=float(rng.uniform(0.5, 1.2)), resolution=3,
                     cutoff=float(rng.choice([0.0, 1e-6])))
        up = rng.normal(size=(3, 3, 3))
        d_s, _ = voxelize_backward(PointCloud(pts), spec, up)
        worst = max(worst, _rel(d_s, _fd_support(pts, spec, up)))
    assert worst < 1e-4


def test_backward_point_gradients_match_fd():
    rng = np.random.default_rng(21)
    pts = rng.uniform(-0.6, 0.6, size=(30, 3))
    spec = _spec(resolution=4, cutoff=0.0)
    up = rng.normal(size=(4, 4, 4))
    _, d_pts = voxelize_backward(PointCloud(pts), spec, up)
    eps = 1e-5
    worst = 0.0
    for j, ax in [(0, 0), (3, 1), (7, 2), (12, 0), (19, 1), (25, 2), (29, 0)]:
        plus = pts.copy(); plus[j, ax] += eps
        minus = pts.copy(); minus[j, ax] -= eps
        num = ((up * voxelize(PointCloud(plus), spec).values).sum()
               - (up * voxelize(PointCloud(minus), spec).values).sum()) / (2 * eps)
        worst = max(worst, _rel(d_pts[j, ax], num))
    assert worst < 1e-4


def test_backward_zero_upstream_zero_gradients():
    rng = np.random.default_rng(23)
    cloud = PointCloud(rng.uniform(-0.5, 0.5, size=(12, 3)))
    d_s, d_pts = voxelize_backward(cloud, _spec(), np.zeros((4, 4, 4)))
    assert d_s == 0.0
    np.testing.assert_array_equal(d_pts, 0.0)


def test_backward_far_point_gets_exact_zero_gradient():
    rng = np.random.default_rng(25)
    pts = rng.uniform(-0.4, 0.4, size=(10, 3))
    pts[4] = [30.0, 0.0, 0.0]  # outside any voxel's reach at cutoff 1e-6
    spec = _spec(cutoff=1e-6)
    _, d_pts = voxelize_backward(PointCloud(pts), spec,
                                 rng.normal(size=(4, 4, 4)))
    np.testing.assert_array_equal(d_pts[4], 0.0)
    assert np.abs(d_pts[:4]).max() > 0.0


def test_backward_batch_matches_single_and_threads():
    rng = np.random.default_rng(27)
    cloud = PointCloud(rng.uniform(-0.6, 0.6, size=(40, 3)))
    specs = [_spec(center=rng.normal(size=3) * 0.2) for _ in range(4)]
    ups = [rng.normal(size=(4, 4, 4)) for _ in range(4)]
    single = [voxelize_backward(cloud, s, u) for s, u in zip(specs, ups)]
    for threads in (1, 4):
        got = voxelize_backward_batch(cloud, specs, ups, threads=threads)
        for (ds_a, dp_a), (ds_b, dp_b) in zip(single, got):
            assert ds_a == ds_b
            np.testing.assert_array_equal(dp_a, dp_b)
    with pytest.raises(ValueError, match="specs"):
        voxelize_backward_batch(cloud, specs, ups[:2])


# ---------------------------------------------------------------------------
# debug dump


def test_dump_voxels_threshold_and_format():
    vals = np.zeros((2, 2, 2))
    vals[0, 1, 0] = 0.5
    vals[1, 1, 1] = 0.009  # below the 0.01 display threshold
    grid = VoxelGrid(values=vals, spec=_spec(resolution=2))
    buf = io.StringIO()
    assert dump_voxels(grid, buf) == 1
    assert buf.getvalue() == "2 0 1 0 0.50000000\n"
