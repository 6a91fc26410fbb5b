"""Registration and correspondence quality measures.

Comparisons against thresholds follow strict inequalities throughout: a
correspondence is an inlier when its residual is strictly below tau_1, a
pair counts toward feature-match recall when its inlier ratio is strictly
above tau_2, and a registration is recalled when its ground-truth
correspondence RMSE is strictly below the recall threshold.

Rotation errors are reported on Euler angles (intrinsic X-Y-Z convention,
degrees), pooled over all components of all pairs into one RMSE and one
R^2; translation errors are pooled the same way. The Euler conversions are
written out here so the evaluation stack carries no rotation library.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .pointcloud import RigidTransform

__all__ = [
    "PoseErrorSummary",
    "euler_xyz_to_rot",
    "rot_to_euler_xyz",
    "inlier_ratio",
    "feature_match_recall",
    "correspondence_rmse",
    "registration_recall",
    "pose_errors",
]


def euler_xyz_to_rot(a: float, b: float, c: float) -> np.ndarray:
    """Rotation from intrinsic X-Y-Z Euler angles (radians): R = Rx Ry Rz."""
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    return rx @ ry @ rz


def rot_to_euler_xyz(r: np.ndarray) -> np.ndarray:
    """Intrinsic X-Y-Z Euler angles (radians) of a rotation matrix.

    b comes from arcsin(R[0, 2]); at the gimbal singularity (|R[0, 2]| ~ 1)
    c is fixed to zero and a absorbs the remaining rotation.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValueError(f"rotation must be (3, 3), got {r.shape}")
    s = min(1.0, max(-1.0, float(r[0, 2])))
    b = np.arcsin(s)
    if abs(s) > 1.0 - 1e-10:
        a = np.arctan2(float(r[2, 1]), float(r[1, 1]))
        c = 0.0
    else:
        a = np.arctan2(-float(r[1, 2]), float(r[2, 2]))
        c = np.arctan2(-float(r[0, 1]), float(r[0, 0]))
    return np.array([a, b, c])


def _residuals(src_points, dst_points, pairs, gt: RigidTransform) -> np.ndarray:
    src_points = np.asarray(src_points, dtype=np.float64)
    dst_points = np.asarray(dst_points, dtype=np.float64)
    pairs = np.asarray(pairs, dtype=np.int64)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ValueError(f"pairs must be (n, 2), got {pairs.shape}")
    mapped = gt.apply(src_points[pairs[:, 0]])
    return np.linalg.norm(mapped - dst_points[pairs[:, 1]], axis=1)


def inlier_ratio(src_points, dst_points, pairs, gt: RigidTransform, tau1: float = 0.1) -> float:
    """Fraction of correspondences with residual under gt strictly below tau1.

    An empty correspondence set scores 0 and emits a warning rather than
    raising, so batch evaluation keeps going.
    """
    if not tau1 > 0:
        raise ValueError("tau1 must be positive")
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        warnings.warn("inlier_ratio over an empty correspondence set", RuntimeWarning)
        return 0.0
    res = _residuals(src_points, dst_points, pairs, gt)
    return float((res < tau1).mean())


def feature_match_recall(inlier_ratios, tau2: float = 0.05) -> float:
    """Fraction of pairs whose inlier ratio is strictly above tau2."""
    if not 0 <= tau2 < 1:
        raise ValueError(f"tau2 must be in [0, 1), got {tau2}")
    irs = np.asarray(inlier_ratios, dtype=np.float64)
    if irs.size == 0:
        raise ValueError("no inlier ratios given")
    return float((irs > tau2).mean())


def correspondence_rmse(src_points, dst_points, pairs, transform: RigidTransform) -> float:
    """Root mean square residual of the correspondences under a transform."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise ValueError("empty correspondence set")
    res = _residuals(src_points, dst_points, pairs, transform)
    return float(np.sqrt((res * res).mean()))


def registration_recall(rmses, thresh: float = 0.2) -> float:
    """Fraction of per-pair RMSE values strictly below thresh."""
    if not thresh > 0:
        raise ValueError("thresh must be positive")
    r = np.asarray(rmses, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no RMSE values given")
    return float((r < thresh).mean())


@dataclass(frozen=True)
class PoseErrorSummary:
    """Pooled rotation (Euler degrees) and translation error statistics."""

    rot_rmse: float
    trans_rmse: float
    rot_r2: float
    trans_r2: float
    count: int


def _r2(est: np.ndarray, gt: np.ndarray) -> float:
    ss_res = float(((est - gt) ** 2).sum())
    ss_tot = float(((gt - gt.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else float("nan")
    return 1.0 - ss_res / ss_tot

def pose_errors(estimates, ground_truths) -> PoseErrorSummary:
    """Pooled pose error over aligned (estimate, ground truth) lists.

    Euler angles are compared componentwise in degrees (no wraparound
    handling; the generation protocol keeps angles well inside the principal
    branch). R^2 is computed over the pooled components, 1 - SSres/SStot.
    """
    if len(estimates) != len(ground_truths) or len(estimates) == 0:
        raise ValueError("estimate and ground-truth lists must be non-empty and aligned")
    ang_e, ang_g, tr_e, tr_g = [], [], [], []
    for est, gt in zip(estimates, ground_truths):
        ang_e.append(np.degrees(rot_to_euler_xyz(est.rotation)))
        ang_g.append(np.degrees(rot_to_euler_xyz(gt.rotation)))
        tr_e.append(est.translation)
        tr_g.append(gt.translation)
    ang_e = np.concatenate(ang_e)
    ang_g = np.concatenate(ang_g)
    tr_e = np.concatenate(tr_e)
    tr_g = np.concatenate(tr_g)
    return PoseErrorSummary(
        rot_rmse=float(np.sqrt(((ang_e - ang_g) ** 2).mean())),
        trans_rmse=float(np.sqrt(((tr_e - tr_g) ** 2).mean())),
        rot_r2=_r2(ang_e, ang_g),
        trans_r2=_r2(tr_e, tr_g),
        count=len(estimates),
    )
