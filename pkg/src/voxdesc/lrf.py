"""Local reference frames from patch covariance.

The frame at a keypoint is built from the eigenvectors of the covariance of
the surrounding patch, taken about the keypoint itself (not the patch
centroid). Eigen axes have arbitrary sign, so z and x are disambiguated by a
majority vote over the patch before completing a right-handed basis. The
3x3 symmetric eigensolver is written out here (closed form, with a cyclic
Jacobi fallback near degeneracy) so the frame path has no LAPACK dependency.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud, SpatialIndex, radius_query

__all__ = [
    "DegeneratePatchError",
    "AmbiguousFrameError",
    "LrfFrame",
    "symmetric_eig3",
    "estimate_lrf",
]


class DegeneratePatchError(ValueError):
    """Patch has too few points to define a frame."""


class AmbiguousFrameError(ValueError):
    """Patch covariance is isotropic; no stable frame exists."""


@dataclass(frozen=True)
class LrfFrame:
    """Orthonormal right-handed axes (columns x, y, z) anchored at a keypoint."""

    axes: np.ndarray
    center: np.ndarray
    radius: float

    def __post_init__(self):
        a = np.asarray(self.axes, dtype=np.float64)
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        if a.shape != (3, 3):
            raise ValueError(f"axes must be (3, 3), got {a.shape}")
        dev = np.abs(a.T @ a - np.eye(3)).max()
        if dev > 1e-8:
            raise ValueError(f"axes not orthonormal (max deviation {dev:.3e})")
        if np.linalg.det(a) < 0:
            raise ValueError("axes are left-handed")
        if not self.radius > 0:
            raise ValueError("frame radius must be positive")
        a = a.copy()
        c = c.copy()
        a.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "axes", a)
        object.__setattr__(self, "center", c)


def _jacobi_eig3(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi sweeps; robust for clustered eigenvalues."""
    a = m.copy()
    v = np.eye(3)
    scale = max(np.abs(m).max(), 1e-300)
    for _ in range(30):
        off = abs(a[0, 1]) + abs(a[0, 2]) + abs(a[1, 2])
        if off <= 1e-15 * scale:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p, q]
            if abs(apq) <= 1e-18 * scale:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
            if theta == 0.0:
                t = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = c
            rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            v = v @ rot
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def symmetric_eig3(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigen decomposition of a symmetric 3x3 matrix.

    Returns (eigenvalues descending, eigenvectors as columns). Closed-form
    roots of the characteristic polynomial; eigenvectors from products of
    shifted matrices. When the eigenvalue gaps fall under 1e-10 (relative)
    the closed form loses orthogonality, so a Jacobi iteration takes over.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"expected (3, 3) matrix, got {m.shape}")
    scale = max(np.abs(m).max(), 1.0)
    if np.abs(m - m.T).max() > 1e-12 * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    m = 0.5 * (m + m.T)

    q = np.trace(m) / 3.0
    b = m - q * np.eye(3)
    p2 = (b * b).sum() / 6.0
    p = np.sqrt(p2)
    if p <= 1e-14 * max(abs(q), 1e-300) or p == 0.0:
        # isotropic: every direction is an eigenvector
        return np.full(3, q), np.eye(3)

    r = np.linalg.det(b / p) / 2.0
    r = min(1.0, max(-1.0, r))
    phi = np.arccos(r) / 3.0
    w0 = q + 2.0 * p * np.cos(phi)
    w2 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    w1 = 3.0 * q - w0 - w2
    w = np.array([w0, w1, w2])

    gap_tol = 1e-10 * max(abs(w0), abs(w2), 1e-300)
    if (w0 - w1) < gap_tol or (w1 - w2) < gap_tol:
        return _jacobi_eig3(m)

    vecs = np.empty((3, 3))
    for i in range(3):
        j, k = [x for x in range(3) if x != i]
        prod = (m - w[j] * np.eye(3)) @ (m - w[k] * np.eye(3))
        norms = np.linalg.norm(prod, axis=0)
        col = prod[:, int(np.argmax(norms))]
        nrm = np.linalg.norm(col)
        if nrm <= 1e-12 * scale * scale:
            return _jacobi_eig3(m)
        vecs[:, i] = col / nrm

    # residual guard: fall back rather than return a sloppy basis
    if np.abs(m @ vecs - vecs * w).max() > 1e-9 * scale:
        return _jacobi_eig3(m)
    return w, vecs


def estimate_lrf(
    cloud: PointCloud, index: SpatialIndex, center_idx: int, r_lrf: float
) -> LrfFrame:
    """Local reference frame at cloud point `center_idx` from its r_lrf-ball.

    Covariance is accumulated about the keypoint. z is the least-variance
    eigenvector, flipped so most patch offsets have a positive projection;
    x is the most-variance eigenvector, same vote, then made orthogonal to z;
    y completes the right-handed triple.
    """
    if not 0 <= center_idx < len(cloud):
        raise ValueError(f"center index {center_idx} out of range")
    if not r_lrf > 0:
        raise ValueError("r_lrf must be positive")
    center = cloud.points[center_idx]
    idxs = radius_query(index, center, r_lrf)
    if idxs.size < 5:
        raise DegeneratePatchError(
            f"patch at point {center_idx} has {idxs.size} points, need at least 5"
        )
    rel = cloud.points[idxs] - center
    cov = (rel.T @ rel) / rel.shape[0]
    w, v = symmetric_eig3(cov)
    gap = (w[0] - w[2]) / max(w[0], 1e-300)
    if gap < 1e-6:
        raise AmbiguousFrameError(
            f"patch at point {center_idx} is isotropic (eigenvalue spread {gap:.3e})"
        )

    def _vote(axis: np.ndarray) -> np.ndarray:
        dots = rel @ axis
        if (dots > 0).sum() < (dots < 0).sum():
            return -axis
        return axis

    z = _vote(v[:, 2])
    x = _vote(v[:, 0])
    x = x - (x @ z) * z
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise AmbiguousFrameError(f"patch at point {center_idx}: x axis collapsed onto z")
    x = x / nx
    y = np.cross(z, x)
    axes = np.column_stack([x, y, z])
    return LrfFrame(axes=axes, center=center, radius=float(r_lrf))
