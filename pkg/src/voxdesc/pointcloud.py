"""Point cloud container, exact spatial queries, sampling, and transform algebra.

Clouds are immutable float64 arrays. Spatial queries are backed by a k-d tree
for speed but every result is post-filtered with plain numpy arithmetic, so
the reported sets/orderings are exactly what a brute-force scan would produce.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "PointCloud",
    "RigidTransform",
    "AffineTransform",
    "SpatialIndex",
    "apply_transform",
    "compose",
    "invert_rigid",
    "build_spatial_index",
    "radius_query",
    "knn_query",
    "farthest_point_sample",
]


@dataclass(frozen=True)
class PointCloud:
    """Immutable (n, 3) float64 point set with an identifier."""

    points: np.ndarray
    id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def _check_rotation(r: np.ndarray, tol: float) -> None:
    if r.shape != (3, 3):
        raise ValueError(f"rotation must be (3, 3), got {r.shape}")
    if not np.all(np.isfinite(r)):
        raise ValueError("rotation contains non-finite entries")
    dev = np.abs(r.T @ r - np.eye(3)).max()
    if dev > tol:
        raise ValueError(f"rotation is not orthonormal (max |R^T R - I| = {dev:.3e})")
    det = np.linalg.det(r)
    if abs(det - 1.0) > tol * 10:
        raise ValueError(f"rotation determinant is {det:.12f}, expected +1")


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion p -> R p + t. Validated at construction (tol 1e-9)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(r, 1e-9)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation contains non-finite entries")
        r = r.copy()
        t = t.copy()
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class AffineTransform:
    """General affine map p -> A p + t (no orthonormality requirement)."""

    matrix: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.matrix, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if a.shape != (3, 3):
            raise ValueError(f"matrix must be (3, 3), got {a.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(t))):
            raise ValueError("affine transform contains non-finite entries")
        a = a.copy()
        t = t.copy()
        a.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "matrix", a)
        object.__setattr__(self, "translation", t)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.matrix.T + self.translation

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.matrix
        m[:3, 3] = self.translation
        return m


def _linear_part(t) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(t, RigidTransform):
        return t.rotation, t.translation
    if isinstance(t, AffineTransform):
        return t.matrix, t.translation
    raise TypeError(f"expected RigidTransform or AffineTransform, got {type(t).__name__}")


def apply_transform(t, cloud: PointCloud) -> PointCloud:
    """Transform every point; the id gains a ':t' suffix to mark derivation."""
    a, v = _linear_part(t)
    return PointCloud(cloud.points @ a.T + v, id=cloud.id + ":t")


def compose(a, b) -> AffineTransform:
    """Composition (a o b): apply b first, then a."""
    ma, ta = _linear_part(a)
    mb, tb = _linear_part(b)
    return AffineTransform(ma @ mb, ma @ tb + ta)


def invert_rigid(t: RigidTransform) -> RigidTransform:
    if not isinstance(t, RigidTransform):
        raise TypeError("invert_rigid expects a RigidTransform")
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


# ---------------------------------------------------------------------------
# spatial queries


@dataclass
class SpatialIndex:
    """k-d tree over a cloud; query results are exact under float64 norms."""

    cloud: PointCloud
    tree: cKDTree = field(repr=False)


def build_spatial_index(cloud: PointCloud) -> SpatialIndex:
    return SpatialIndex(cloud=cloud, tree=cKDTree(cloud.points))


def _exact_distances(pts: np.ndarray, center: np.ndarray) -> np.ndarray:
    return np.linalg.norm(pts - center, axis=1)


def radius_query(index: SpatialIndex, center: np.ndarray, radius: float) -> np.ndarray:
    """Indices of points with ||p - center|| <= radius, ascending.

    The tree supplies candidates from a slightly inflated ball; the final
    inclusion test is ||.|| <= radius in our own arithmetic, so boundary
    points are kept exactly.
    """
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    pad = radius * (1.0 + 1e-12) + 1e-300
    cand = np.asarray(index.tree.query_ball_point(center, r=pad), dtype=np.int64)
    if cand.size == 0:
        return cand
    d = _exact_distances(index.cloud.points[cand], center)
    keep = cand[d <= radius]
    keep.sort()
    return keep


def knn_query(index: SpatialIndex, center: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points; ties broken toward the lower index."""
    n = len(index.cloud)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    dk, _ = index.tree.query(center, k=k)
    dk = float(np.atleast_1d(dk)[-1])
    # Candidate ball inflated well past ulp noise, then re-ranked exactly.
    pad = dk * (1.0 + 1e-9) + 1e-12
    cand = np.asarray(index.tree.query_ball_point(center, r=pad), dtype=np.int64)
    d = _exact_distances(index.cloud.points[cand], center)
    order = np.lexsort((cand, d))
    return cand[order[:k]]


def farthest_point_sample(
    cloud: PointCloud, k: int, seed: int, start: int | None = None
) -> np.ndarray:
    """Greedy max-min subsample of k indices.

    The first index is drawn uniformly from the seed (or taken from `start`);
    each following pick maximizes the distance to the chosen set, first-max
    (lowest index) on ties.
    """
    n = len(cloud)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    elif not 0 <= start < n:
        raise ValueError(f"start index {start} out of range [0, {n})")
    pts = cloud.points
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    dists = np.linalg.norm(pts - pts[start], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dists))
        chosen[i] = nxt
        np.minimum(dists, np.linalg.norm(pts - pts[nxt], axis=1), out=dists)
    return chosen
