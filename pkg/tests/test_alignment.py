"""Weighted fits vs lstsq/scipy oracles; loss identities; tape gradients."""
import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from voxdesc import autodiff as ad
from voxdesc.alignment import (
    RankDeficientError,
    cycle_loss,
    fit_affine_op,
    fit_affine_weighted,
    kabsch_rigid,
    loss_ops,
    orthogonality_loss,
    registration_loss,
)
from voxdesc.pointcloud import AffineTransform, RigidTransform


def _random_rotation(rng) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _lstsq_oracle(src, dst, w):
    """Weighted least squares via scaled rows and numpy's lstsq."""
    design = np.column_stack([src, np.ones(len(src))]) * w[:, None]
    xt, *_ = np.linalg.lstsq(design, dst * w[:, None], rcond=None)
    return xt.T  # (3, 4)


# ---------------------------------------------------------------------------
# affine fitting


def test_fit_matches_lstsq_oracle():
    for seed in range(15):
        rng = np.random.default_rng(seed)
        src = rng.normal(size=(10, 3))
        dst = rng.normal(size=(10, 3))
        w = rng.uniform(0.1, 1.0, size=10)
        got = fit_affine_weighted(src, dst, w, damping=0.0)
        want = _lstsq_oracle(src, dst, w)
        np.testing.assert_allclose(got.matrix, want[:, :3], atol=1e-8)
        np.testing.assert_allclose(got.translation, want[:, 3], atol=1e-8)


def test_fit_recovers_exact_rigid_maps():
    for seed in range(20):
        rng = np.random.default_rng(seed + 50)
        r = _random_rotation(rng)
        t = rng.normal(size=3)
        src = rng.normal(size=(8, 3))
        dst = src @ r.T + t
        w = rng.uniform(0.2, 1.0, size=8)
        got = fit_affine_weighted(src, dst, w)
        np.testing.assert_allclose(got.matrix, r, atol=1e-8)
        np.testing.assert_allclose(got.translation, t, atol=1e-8)


def test_fit_zero_weight_rows_are_ignored():
    rng = np.random.default_rng(3)
    r = _random_rotation(rng)
    src = rng.normal(size=(8, 3))
    dst = src @ r.T
    dst[7] = [100.0, -50.0, 9.0]  # gross outlier, weighted out
    w = np.ones(8)
    w[7] = 0.0
    got = fit_affine_weighted(src, dst, w)
    np.testing.assert_allclose(got.matrix, r, atol=1e-7)


def test_fit_rank_deficiency_reported_without_damping():
    rng = np.random.default_rng(4)
    line = np.outer(rng.normal(size=10), np.array([1.0, 2.0, 3.0]))
    dst = rng.normal(size=(10, 3))
    with pytest.raises(RankDeficientError, match="condition"):
        fit_affine_weighted(line, dst, np.ones(10), damping=0.0)
    fit_affine_weighted(line, dst, np.ones(10), damping=1e-9)  # damped: solvable


def test_fit_validation():
    good = np.zeros((4, 3))
    with pytest.raises(ValueError, match="at least 4"):
        fit_affine_weighted(good[:3], good[:3], np.ones(3))
    with pytest.raises(ValueError, match="matching"):
        fit_affine_weighted(good, np.zeros((5, 3)), np.ones(4))
    with pytest.raises(ValueError, match="weights"):
        fit_affine_weighted(good, good, np.ones(3))
    with pytest.raises(ValueError, match="non-negative"):
        fit_affine_weighted(good, good, np.array([1, 1, 1, -1.0]))
    with pytest.raises(ValueError, match="non-finite"):
        fit_affine_weighted(good, np.full((4, 3), np.nan), np.ones(4))
    with pytest.raises(ValueError, match="damping"):
        fit_affine_weighted(good, good, np.ones(4), damping=-1.0)


def test_fit_op_matches_plain_fit():
    rng = np.random.default_rng(5)
    src = rng.normal(size=(6, 3))
    dst = rng.normal(size=(6, 3))
    w = rng.uniform(0.2, 1.0, size=6)
    plain = fit_affine_weighted(src, dst, w)
    tape = ad.Tape(np.float64)
    x = fit_affine_op(src, dst, tape.leaf(w, requires_grad=True))
    np.testing.assert_allclose(x.values[:, :3], plain.matrix, atol=1e-12)
    np.testing.assert_allclose(x.values[:, 3], plain.translation, atol=1e-12)


def test_fit_op_weight_gradients_match_fd():
    rng = np.random.default_rng(6)
    src = rng.normal(size=(6, 3))
    dst = rng.normal(size=(6, 3))
    w0 = rng.uniform(0.2, 1.0, size=6)
    g = rng.normal(size=(3, 4))

    def build(tape, w):
        x = fit_affine_op(src, dst, w)
        return ad.matmul(ad.reshape(x, (1, -1)), tape.leaf(g.reshape(-1, 1)))

    assert ad.grad_check(build, [w0]) < 1e-6


def test_fit_op_soft_target_gradients_match_fd():
    rng = np.random.default_rng(7)
    src = rng.normal(size=(5, 3))
    dst0 = rng.normal(size=(5, 3))
    w0 = rng.uniform(0.2, 1.0, size=5)
    g = rng.normal(size=(3, 4))

    def build(tape, w, dst):
        x = fit_affine_op(src, dst, w)
        return ad.matmul(ad.reshape(x, (1, -1)), tape.leaf(g.reshape(-1, 1)))

    assert ad.grad_check(build, [w0, dst0]) < 1e-6


# ---------------------------------------------------------------------------
# losses


def test_orthogonality_loss_hand_values():
    eye = RigidTransform.identity()
    assert orthogonality_loss(eye, eye) == 0.0
    doubled = AffineTransform(2.0 * np.eye(3), np.zeros(3))
    # |4I - I| sums to 9 on one side, identity contributes 0: mean is 4.5
    assert orthogonality_loss(doubled, eye) == pytest.approx(4.5, abs=1e-12)
    assert orthogonality_loss(doubled, doubled) == pytest.approx(9.0, abs=1e-12)


def test_cycle_loss_hand_values():
    eye = RigidTransform.identity()
    assert cycle_loss(eye, eye) == 0.0
    rng = np.random.default_rng(8)
    r = _random_rotation(rng)
    t = rng.normal(size=3)
    fwd = RigidTransform(r, t)
    bwd = RigidTransform(r.T, -r.T @ t)
    assert cycle_loss(fwd, bwd) < 1e-12
    doubled = AffineTransform(2.0 * np.eye(3), np.zeros(3))
    assert cycle_loss(doubled, eye) == pytest.approx(3.0, abs=1e-12)


def test_registration_loss_combines_terms():
    rng = np.random.default_rng(9)
    xf = rng.normal(size=(3, 4))
    xb = rng.normal(size=(3, 4))
    rep = registration_loss(xf, xb, lambda_o=0.7, lambda_c=1.3)
    assert rep.l_pcr == pytest.approx(0.7 * rep.l_o + 1.3 * rep.l_c, rel=1e-12)
    np.testing.assert_allclose(rep.l_o, orthogonality_loss(xf, xb), atol=1e-15)
    np.testing.assert_allclose(rep.l_c, cycle_loss(xf, xb), atol=1e-15)


def test_loss_ops_match_plain_losses():
    rng = np.random.default_rng(10)
    xf = rng.normal(size=(3, 4))
    xb = rng.normal(size=(3, 4))
    tape = ad.Tape(np.float64)
    l_pcr, lo, lc = loss_ops(tape.leaf(xf, requires_grad=True),
                             tape.leaf(xb, requires_grad=True),
                             lambda_o=0.7, lambda_c=1.3)
    rep = registration_loss(xf, xb, lambda_o=0.7, lambda_c=1.3)
    np.testing.assert_allclose(lo.values, rep.l_o, atol=1e-12)
    np.testing.assert_allclose(lc.values, rep.l_c, atol=1e-12)
    np.testing.assert_allclose(l_pcr.values, rep.l_pcr, atol=1e-12)


def test_loss_ops_gradients_match_fd():
    rng = np.random.default_rng(11)
    xf0 = rng.normal(size=(3, 4))
    xb0 = rng.normal(size=(3, 4))

    def build(tape, xf, xb):
        return loss_ops(xf, xb)[0]

    assert ad.grad_check(build, [xf0, xb0]) < 1e-6


def test_rejects_bad_transform_payload():
    with pytest.raises(ValueError, match=r"\(3, 4\)"):
        orthogonality_loss(np.eye(3), np.zeros((3, 4)))


# ---------------------------------------------------------------------------
# rigid fit


def test_kabsch_recovers_exact_rigid_maps():
    for seed in range(20):
        rng = np.random.default_rng(seed + 100)
        r = _random_rotation(rng)
        t = rng.normal(size=3)
        src = rng.normal(size=(10, 3))
        got = kabsch_rigid(src, src @ r.T + t)
        np.testing.assert_allclose(got.rotation, r, atol=1e-9)
        np.testing.assert_allclose(got.translation, t, atol=1e-9)


def test_kabsch_matches_scipy_on_noisy_instances():
    for seed in range(10):
        rng = np.random.default_rng(seed + 200)
        r = _random_rotation(rng)
        t = rng.normal(size=3)
        src = rng.normal(size=(15, 3))
        dst = src @ r.T + t + rng.normal(scale=0.01, size=(15, 3))
        got = kabsch_rigid(src, dst)
        ref, _ = Rotation.align_vectors(dst - dst.mean(axis=0), src - src.mean(axis=0))
        np.testing.assert_allclose(got.rotation, ref.as_matrix(), atol=1e-6)


def test_kabsch_weighted_ignores_zeroed_outlier():
    rng = np.random.default_rng(12)
    r = _random_rotation(rng)
    src = rng.normal(size=(8, 3))
    dst = src @ r.T
    dst[0] = [99.0, 99.0, 99.0]
    w = np.ones(8)
    w[0] = 0.0
    got = kabsch_rigid(src, dst, weights=w)
    np.testing.assert_allclose(got.rotation, r, atol=1e-9)


def test_kabsch_never_returns_reflections():
    rng = np.random.default_rng(13)
    src = rng.normal(size=(10, 3))
    got = kabsch_rigid(src, src * np.array([1.0, 1.0, -1.0]))
    assert np.linalg.det(got.rotation) == pytest.approx(1.0, abs=1e-9)


def test_kabsch_validation():
    rng = np.random.default_rng(14)
    src = rng.normal(size=(5, 3))
    with pytest.raises(ValueError, match="at least 3"):
        kabsch_rigid(src[:2], src[:2])
    with pytest.raises(ValueError, match="collinear"):
        kabsch_rigid(np.outer(np.arange(5.0), [1, 1, 1]), src)
    with pytest.raises(ValueError, match="positive weights"):
        kabsch_rigid(src, src, weights=np.array([1, 1, 0, 0, 0.0]))
    with pytest.raises(ValueError, match="weights"):
        kabsch_rigid(src, src, weights=np.ones(4))
