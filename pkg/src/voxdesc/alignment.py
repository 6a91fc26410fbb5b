"""Weighted transform fitting and the rigidity losses.

`fit_affine_weighted` solves the confidence-weighted least squares for an
unconstrained 3x4 map X = [A | t]; nothing forces A toward a rotation, that
pressure comes entirely from the losses: an orthogonality penalty on the two
directional fits and a cycle penalty asking forward and backward maps to
invert each other. All norms are entrywise L1.

`fit_affine_op` is the same solve recorded on a tape with a hand-derived
backward (gradients w.r.t. the weights and, optionally, the target
positions), since the solve itself is cheaper to differentiate through its
closed form than through an elementwise graph.

`kabsch_rigid` is the rigid counterpart used at inference time, via the
quaternion eigenvector method; the 4x4 eigen decomposition calls numpy
(numerical plumbing, validated against exact instances in the tests).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _acc
from .pointcloud import AffineTransform, RigidTransform

__all__ = [
    "RankDeficientError",
    "LossReport",
    "fit_affine_weighted",
    "fit_affine_op",
    "orthogonality_loss",
    "cycle_loss",
    "registration_loss",
    "loss_ops",
    "kabsch_rigid",
]


class RankDeficientError(ValueError):
    """Normal equations too ill-conditioned to solve without damping."""


@dataclass(frozen=True)
class LossReport:
    l_pcr: float
    l_o: float
    l_c: float
    lambda_o: float
    lambda_c: float


def _fit_system(src: np.ndarray, dst: np.ndarray, w: np.ndarray):
    """Normal equations of the weighted least squares.

    Rows of src/dst are correspondences; returns (ph, a, b) with
    ph = homogeneous source columns (4, n), a = ph W^2 ph^T, b = ph W^2 dst.
    """
    n = src.shape[0]
    ph = np.vstack([src.T, np.ones((1, n))])
    w2 = w * w
    phw = ph * w2
    return ph, phw @ ph.T, phw @ dst


def _check_fit_inputs(src, dst, w):
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape:
        raise ValueError(f"correspondence arrays must be matching (n, 3), got {src.shape} and {dst.shape}")
    if w.shape[0] != src.shape[0]:
        raise ValueError(f"{w.shape[0]} weights for {src.shape[0]} correspondences")
    if src.shape[0] < 4:
        raise ValueError(f"need at least 4 correspondences, got {src.shape[0]}")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst)) and np.all(np.isfinite(w))):
        raise ValueError("non-finite values in fit inputs")
    return src, dst, w


def fit_affine_weighted(src, dst, weights, damping: float = 1e-9) -> AffineTransform:
    """Weighted least-squares affine map src -> dst.

    With damping = 0 the raw normal equations are solved and a condition
    number above 1e12 raises RankDeficientError; with damping > 0 the
    diagonal is lifted instead.
    """
    src, dst, w = _check_fit_inputs(src, dst, weights)
    if damping < 0:
        raise ValueError("damping must be non-negative")
    _, a, b = _fit_system(src, dst, w)
    if damping == 0.0:
        cond = np.linalg.cond(a)
        if not np.isfinite(cond) or cond > 1e12:
            raise RankDeficientError(f"normal equations condition number {cond:.3e}")
    else:
        a = a + damping * np.eye(4)
    try:
        xt = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as e:
        raise RankDeficientError(f"normal equations singular: {e}") from e
    x = xt.T
    return AffineTransform(matrix=x[:, :3], translation=x[:, 3])


def fit_affine_op(src, dst, weights: Tensor, damping: float = 1e-9) -> Tensor:
    """Tape version of the weighted fit; returns X as a (3, 4) tensor.

    src is constant; dst may be an array (constant targets) or a (n, 3)
    tensor (soft targets). Gradients flow to the weights and tensor targets
    through the closed-form solve: with A x = b per output row,
    dL/db = A^-1 g and dL/dA = -(A^-1 g) x^T.
    """
    tape = weights.tape
    dst_t = dst if isinstance(dst, Tensor) else None
    dstv = dst_t.values.astype(np.float64) if dst_t is not None else dst
    src, dstv, w = _check_fit_inputs(src, dstv, weights.values)
    if damping < 0:
        raise ValueError("damping must be non-negative")
    ph, a, b = _fit_system(src, dstv, w)
    if damping > 0.0:
        a = a + damping * np.eye(4)
    try:
        xt = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as e:
        raise RankDeficientError(f"normal equations singular: {e}") from e

    inputs = [weights] + ([dst_t] if dst_t is not None else [])
    req = any(t.requires_grad for t in inputs)
    out = Tensor(np.asarray(xt.T, dtype=tape.dtype), req, tape)
    if req:
        def bwd():
            if out.grad is None:
                return
            gt = out.grad.astype(np.float64).T          # (4, 3)
            db = np.linalg.solve(a, gt)                 # A symmetric
            da = -db @ xt.T                             # (4, 4)
            dw2 = np.einsum("ai,ab,bi->i", ph, da, ph) + np.einsum(
                "ai,ab,ib->i", ph, db, dstv
            )
            _acc(weights, 2.0 * w * dw2)
            if dst_t is not None:
                _acc(dst_t, (ph.T @ db) * (w * w)[:, None])
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# losses


def _as_xmat(t) -> np.ndarray:
    if isinstance(t, AffineTransform) or isinstance(t, RigidTransform):
        a, v = (t.matrix, t.translation) if isinstance(t, AffineTransform) else (t.rotation, t.translation)
        return np.hstack([a, v[:, None]])
    x = np.asarray(t, dtype=np.float64)
    if x.shape != (3, 4):
        raise ValueError(f"expected a transform or (3, 4) matrix, got {x.shape}")
    return x


def orthogonality_loss(fwd, bwd) -> float:
    """Mean L1 deviation of both linear parts from orthonormality."""
    eye = np.eye(3)
    tot = 0.0
    for t in (fwd, bwd):
        a = _as_xmat(t)[:, :3]
        tot += np.abs(a.T @ a - eye).sum()
    return 0.5 * tot


def cycle_loss(fwd, bwd) -> float:
    """L1 deviation of (fwd o bwd) from the identity map."""
    xf = _as_xmat(fwd)
    xb = _as_xmat(bwd)
    a1, t1 = xf[:, :3], xf[:, 3]
    a2, t2 = xb[:, :3], xb[:, 3]
    return float(np.abs(a1 @ a2 - np.eye(3)).sum() + np.abs(a1 @ t2 + t1).sum())


def registration_loss(fwd, bwd, lambda_o: float = 1.0, lambda_c: float = 1.0) -> LossReport:
    lo = orthogonality_loss(fwd, bwd)
    lc = cycle_loss(fwd, bwd)
    return LossReport(
        l_pcr=lambda_o * lo + lambda_c * lc,
        l_o=float(lo),
        l_c=float(lc),
        lambda_o=lambda_o,
        lambda_c=lambda_c,
    )


def loss_ops(xf: Tensor, xb: Tensor, lambda_o: float = 1.0, lambda_c: float = 1.0):
    """Tape version; returns (l_pcr, l_o, l_c) scalar tensors."""
    from . import autodiff as ad

    eye = np.eye(3)
    a1 = ad.slice_cols(xf, 0, 3)
    t1 = ad.slice_cols(xf, 3, 4)
    a2 = ad.slice_cols(xb, 0, 3)
    t2 = ad.slice_cols(xb, 3, 4)
    lo = ad.scale(
        ad.add(
            ad.abs_sum(ad.sub_const(ad.matmul(ad.transpose(a1), a1), eye)),
            ad.abs_sum(ad.sub_const(ad.matmul(ad.transpose(a2), a2), eye)),
        ),
        0.5,
    )
    lc = ad.add(
        ad.abs_sum(ad.sub_const(ad.matmul(a1, a2), eye)),
        ad.abs_sum(ad.add(ad.matmul(a1, t2), t1)),
    )
    l_pcr = ad.add(ad.scale(lo, lambda_o), ad.scale(lc, lambda_c))
    return l_pcr, lo, lc


# ---------------------------------------------------------------------------
# rigid fit (inference path)


def _quat_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def kabsch_rigid(src, dst, weights=None) -> RigidTransform:
    """Weighted best-fit proper rigid motion src -> dst.

    Quaternion formulation: the rotation is the top eigenvector of the 4x4
    profile matrix, which is proper by construction (no reflection branch).
    Collinear or otherwise rank-deficient configurations raise ValueError.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape:
        raise ValueError(f"correspondence arrays must be matching (n, 3), got {src.shape} and {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 correspondences, got {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise ValueError(f"{w.shape[0]} weights for {n} correspondences")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if (w > 0).sum() < 3:
        raise ValueError("need at least 3 positive weights")
    wsum = w.sum()
    cs = (src * w[:, None]).sum(axis=0) / wsum
    cd = (dst * w[:, None]).sum(axis=0) / wsum
    x = src - cs
    y = dst - cd

    scatter = (x * w[:, None]).T @ x
    ev = np.linalg.eigvalsh(scatter)
    if ev[1] <= 1e-12 * max(ev[2], 1e-300):
        raise ValueError("degenerate correspondence geometry (collinear points)")

    m = (x * w[:, None]).T @ y
    sxx, sxy, sxz = m[0]
    syx, syy, syz = m[1]
    szx, szy, szz = m[2]
    prof = np.array(
        [
            [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
            [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
            [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
            [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
        ]
    )
    _, vecs = np.linalg.eigh(prof)
    q = vecs[:, -1]
    r = _quat_to_rot(q / np.linalg.norm(q))
    t = cd - r @ cs
    return RigidTransform(rotation=r, translation=t)
