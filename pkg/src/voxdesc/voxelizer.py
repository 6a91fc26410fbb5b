"""Differentiable voxel occupancy grids over local reference frames.

Each voxel holds a soft occupancy: per point-voxel pair, the signed distance
d to the voxel's inscribed sphere (radius r = support / (2 * resolution)) is
squashed through p = sigmoid(-sign(d) * d^2 / sharpness), and the voxel value
is the noisy-or 1 - prod(1 - p) over points. Both the grid geometry (voxel
centers, sphere radius) and therefore the values depend smoothly on the
support extent, which is the learnable quantity; `voxelize_backward`
propagates an upstream gradient to the support scalar and the point
coordinates.

Pairs whose probability falls below `cutoff` are skipped. A radius prefilter
discards points that cannot reach any voxel above the cutoff; the two tests
agree, so skipped points receive exactly zero gradient. With cutoff = 0 every
pair participates and the accumulation is canonicalized (sorted) so the
result is bit-identical under point permutation; with a positive cutoff a
faster binned accumulation is used (deterministic for a fixed input order).
"""
from __future__ import annotations

from dataclasses import dataclass
from math import log, sqrt

import numpy as np
from scipy.spatial.distance import cdist

from .lrf import LrfFrame
from .pointcloud import PointCloud, SpatialIndex, radius_query

__all__ = [
    "VoxelGridSpec",
    "VoxelGrid",
    "voxel_centers",
    "point_in_voxel_prob",
    "voxelize",
    "voxelize_batch",
    "voxelize_backward",
    "voxelize_backward_batch",
    "dump_voxels",
]

_CLAMP = 1.0 - 1e-15  # keeps log1p(-p) finite when a pair fully saturates


@dataclass(frozen=True)
class VoxelGridSpec:
    """Placement and evaluation settings for one descriptor grid."""

    center: np.ndarray
    frame: LrfFrame
    support: float
    resolution: int
    sharpness: float
    cutoff: float = 1e-6

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(c)):
            raise ValueError("grid center contains non-finite entries")
        if not isinstance(self.frame, LrfFrame):
            raise TypeError("frame must be an LrfFrame")
        if not (np.isfinite(self.support) and self.support > 0):
            raise ValueError(f"support must be positive, got {self.support}")
        if not (isinstance(self.resolution, (int, np.integer)) and self.resolution >= 2):
            raise ValueError(f"resolution must be an integer >= 2, got {self.resolution}")
        if not (np.isfinite(self.sharpness) and self.sharpness > 0):
            raise ValueError(f"sharpness must be positive, got {self.sharpness}")
        if not 0.0 <= self.cutoff <= 1e-3:
            raise ValueError(f"cutoff must be in [0, 1e-3], got {self.cutoff}")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "resolution", int(self.resolution))


@dataclass
class VoxelGrid:
    """Occupancy values, C-ordered (a, b, c) along the frame's x, y, z axes."""

    values: np.ndarray
    spec: VoxelGridSpec


def _unit_offsets(h: int) -> np.ndarray:
    """Per-voxel fractional offsets u with voxel_center = center + axes @ (u * s)."""
    line = (np.arange(h, dtype=np.float64) + 0.5) / h - 0.5
    aa, bb, cc = np.meshgrid(line, line, line, indexing="ij")
    return np.stack([aa, bb, cc], axis=-1).reshape(-1, 3)


def voxel_centers(spec: VoxelGridSpec) -> np.ndarray:
    """World-space voxel centers, shape (h, h, h, 3)."""
    h = spec.resolution
    local = _unit_offsets(h) * spec.support
    world = spec.center + local @ spec.frame.axes.T
    return world.reshape(h, h, h, 3)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def point_in_voxel_prob(point, voxel_center, r: float, sigma: float) -> float:
    """Soft membership of a single point in a voxel's inscribed sphere.

    d = ||point - voxel_center|| - r; returns sigmoid(-sign(d) * d^2 / sigma).
    On the sphere boundary (d = 0) this is exactly 0.5.
    """
    if not r > 0:
        raise ValueError("voxel radius must be positive")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    diff = np.asarray(point, dtype=np.float64) - np.asarray(voxel_center, dtype=np.float64)
    d = float(np.linalg.norm(diff)) - r
    arg = -np.sign(d) * d * d / sigma
    return float(_sigmoid(np.asarray(arg)))


def _prefilter(cloud: PointCloud, spec: VoxelGridSpec, index: SpatialIndex | None) -> np.ndarray:
    """Indices of points that can contribute any pair above the cutoff."""
    n = len(cloud)
    if spec.cutoff <= 0.0:
        return np.arange(n, dtype=np.int64)
    h = spec.resolution
    s = spec.support
    r = s / (2.0 * h)
    tail = sqrt(spec.sharpness * log((1.0 - spec.cutoff) / spec.cutoff))
    reach = (s / 2.0 - r) * sqrt(3.0) + r + tail
    reach = reach * (1.0 + 1e-9) + 1e-12
    if index is not None:
        return radius_query(index, spec.center, reach)
    d = np.linalg.norm(cloud.points - spec.center, axis=1)
    return np.flatnonzero(d <= reach).astype(np.int64)


def _pair_arrays(pts: np.ndarray, centers: np.ndarray, spec: VoxelGridSpec):
    """Distances, signed distances, and sigmoid args for a point chunk.

    Returns (dist (m,k), d (m,k), arg (m,k)) with k = h^3.
    """
    r = spec.support / (2.0 * spec.resolution)
    dist = cdist(pts, centers)
    d = dist - r
    arg = -np.sign(d) * d * d / spec.sharpness
    return dist, d, arg


def _logit(c: float) -> float:
    return log(c / (1.0 - c))


def voxelize(cloud: PointCloud, spec: VoxelGridSpec, index: SpatialIndex | None = None) -> VoxelGrid:
    h = spec.resolution
    k = h * h * h
    centers = voxel_centers(spec).reshape(k, 3)
    sel = _prefilter(cloud, spec, index)
    logs = np.zeros(k, dtype=np.float64)

    if spec.cutoff <= 0.0:
        # exact mode: canonical (voxel, value) ordering makes the sum
        # independent of point order, bit for bit
        _, _, arg = _pair_arrays(cloud.points[sel], centers, spec)
        p = np.minimum(_sigmoid(arg), _CLAMP)
        vals = np.log1p(-p).ravel()
        ks = np.broadcast_to(np.arange(k), p.shape).ravel()
        order = np.lexsort((vals, ks))
        logs = np.bincount(ks[order], weights=vals[order], minlength=k)
    else:
        thr = _logit(spec.cutoff)
        for sta in range(0, sel.size, 256):
            chunk = sel[sta : sta + 256]
            _, _, arg = _pair_arrays(cloud.points[chunk], centers, spec)
            jj, kk = np.nonzero(arg >= thr)
            if jj.size == 0:
                continue
            p = np.minimum(_sigmoid(arg[jj, kk]), _CLAMP)
            logs += np.bincount(kk, weights=np.log1p(-p), minlength=k)

    values = 1.0 - np.exp(logs)
    np.clip(values, 0.0, 1.0, out=values)
    return VoxelGrid(values=values.reshape(h, h, h), spec=spec)


def voxelize_batch(
    cloud: PointCloud,
    specs: list,
    index: SpatialIndex | None = None,
    threads: int = 1,
) -> list:
    """One grid per spec, in order. Each grid is computed independently, so
    the result is identical for any thread count."""
    if threads <= 1:
        return [voxelize(cloud, s, index) for s in specs]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda s: voxelize(cloud, s, index), specs))


def voxelize_backward(
    cloud: PointCloud,
    spec: VoxelGridSpec,
    upstream: np.ndarray,
    index: SpatialIndex | None = None,
    want_points: bool = True,
) -> tuple[float, np.ndarray | None]:
    """Gradients of sum(upstream * grid.values) w.r.t. support and points.

    Recomputes the forward pass with the same settings, so the pair set
    (cutoff mask and prefilter) matches the paired `voxelize` call exactly.
    Returns (d_support, d_points) with d_points shaped like cloud.points.
    """
    h = spec.resolution
    k = h * h * h
    up = np.asarray(upstream, dtype=np.float64).reshape(k)
    centers = voxel_centers(spec).reshape(k, 3)
    sel = _prefilter(cloud, spec, index)
    thr = -np.inf if spec.cutoff <= 0.0 else _logit(spec.cutoff)

    # small-enough problems keep all pair matrices live between the passes
    # instead of recomputing them (identical values either way)
    cache_all = sel.size * k <= 4_000_000
    chunks: list[np.ndarray] = [sel] if (cache_all or spec.cutoff <= 0.0) else [
        sel[i : i + 256] for i in range(0, sel.size, 256)
    ]

    # pass 1: per-voxel log-survival S_k over the masked pairs
    logs = np.zeros(k, dtype=np.float64)
    cached = []
    for chunk in chunks:
        if chunk.size == 0:
            continue
        dist, d, arg = _pair_arrays(cloud.points[chunk], centers, spec)
        if cache_all:
            cached.append((dist, d, arg))
        m = arg >= thr
        p = np.minimum(_sigmoid(arg), _CLAMP)
        logs += np.where(m, np.log1p(-p), 0.0).sum(axis=0)

    # pass 2: d v_k / d arg_jk = exp(S_k) * p_jk, gathered over masked pairs
    surv = np.exp(logs)
    d_points = np.zeros_like(cloud.points) if want_points else None
    d_centers = np.zeros((k, 3), dtype=np.float64)
    dr_acc = 0.0
    for ci, chunk in enumerate(c for c in chunks if c.size):
        pts = cloud.points[chunk]
        if cache_all:
            dist, d, arg = cached[ci]
        else:
            dist, d, arg = _pair_arrays(pts, centers, spec)
        p = _sigmoid(arg)
        jj, kk = np.nonzero((arg >= thr) & (p < _CLAMP))
        if jj.size == 0:
            continue
        darg = up[kk] * surv[kk] * p[jj, kk]
        dd = darg * (-2.0 * np.abs(d[jj, kk]) / spec.sharpness)
        # unit vectors (p_j - o_k)/dist; zero where the pair is coincident
        dl = dist[jj, kk]
        coef = np.where(dl > 0.0, dd / np.where(dl > 0.0, dl, 1.0), 0.0)
        w3 = coef[:, None] * (pts[jj] - centers[kk])
        for ax in range(3):
            d_centers[:, ax] -= np.bincount(kk, weights=w3[:, ax], minlength=k)
            if want_points:
                d_points[chunk, ax] += np.bincount(
                    jj, weights=w3[:, ax], minlength=chunk.size)
        dr_acc += float(-dd.sum())

    # support enters through every voxel center (linear path) and the radius
    u_scaled = (centers - spec.center) / spec.support
    d_support = float((d_centers * u_scaled).sum()) + dr_acc / (2.0 * h)
    return d_support, d_points


def voxelize_backward_batch(
    cloud: PointCloud,
    specs: list,
    upstreams,
    index: SpatialIndex | None = None,
    threads: int = 1,
    want_points: bool = True,
) -> list:
    """Per-spec backward passes, joined in spec order (thread-count invariant)."""
    if len(specs) != len(upstreams):
        raise ValueError(f"{len(specs)} specs for {len(upstreams)} upstream grids")
    if threads <= 1:
        return [
            voxelize_backward(cloud, s, u, index, want_points)
            for s, u in zip(specs, upstreams)
        ]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(
            ex.map(
                lambda su: voxelize_backward(cloud, su[0], su[1], index, want_points),
                zip(specs, upstreams),
            )
        )


def dump_voxels(grid: VoxelGrid, fh) -> int:
    """Write `h a b c value` lines for voxels with value >= 0.01; returns count."""
    h = grid.spec.resolution
    vals = grid.values.reshape(h, h, h)
    idx = np.argwhere(vals >= 0.01)
    for a, b, c in idx:
        fh.write(f"{h} {a} {b} {c} {vals[a, b, c]:.8f}\n")
    return int(idx.shape[0])
