"""Robust rigid registration from descriptor correspondences.

RANSAC over minimal 3-point samples with a rigid fit per hypothesis, strict
inlier counting, adaptive early stopping, and a final refit on the consensus
set. Fully deterministic for a given seed. `register_pair` runs the whole
inference pipeline: keypoints, frames, grids, descriptors, mutual matches,
then RANSAC.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import descriptor as dsc
from .alignment import kabsch_rigid
from .lrf import AmbiguousFrameError, DegeneratePatchError, estimate_lrf
from .matching import mutual_nearest
from .pointcloud import (
    PointCloud,
    RigidTransform,
    build_spatial_index,
    farthest_point_sample,
)
from .voxelizer import VoxelGridSpec, voxelize_batch

__all__ = [
    "RegistrationFailedError",
    "RansacConfig",
    "RegistrationResult",
    "ransac_register",
    "register_pair",
]


class RegistrationFailedError(RuntimeError):
    """No acceptable rigid motion could be established."""


@dataclass(frozen=True)
class RansacConfig:
    inlier_tau: float = 0.1
    max_iters: int = 50000
    confidence: float = 0.999
    seed: int = 0
    refine_rounds: int = 2

    def __post_init__(self):
        if not self.inlier_tau > 0:
            raise ValueError("inlier_tau must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must be in (0, 1)")
        if self.refine_rounds < 0:
            raise ValueError("refine_rounds must be >= 0")


@dataclass
class RegistrationResult:
    transform: RigidTransform
    inliers: np.ndarray
    inlier_rmse: float
    num_iters: int
    n_matches: int
    pairs: np.ndarray | None = field(default=None, repr=False)


def _count_inliers(t: RigidTransform, src, dst, tau):
    res = np.linalg.norm(t.apply(src) - dst, axis=1)
    return res < tau, res


def ransac_register(src_points, dst_points, cfg: RansacConfig) -> RegistrationResult:
    """Best rigid motion under strict inlier threshold cfg.inlier_tau.

    Hypotheses are ranked by inlier count, ties by lower inlier RMSE. Early
    stop once 1 - (1 - ir^3)^k clears cfg.confidence for the best inlier
    ratio seen. Refinement refits on the consensus set for
    cfg.refine_rounds rounds and never accepts a shrunken consensus.
    """
    src = np.asarray(src_points, dtype=np.float64)
    dst = np.asarray(dst_points, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape:
        raise ValueError(f"correspondence arrays must be matching (n, 3), got {src.shape} and {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise RegistrationFailedError(f"need at least 3 correspondences, got {n}")

    rng = np.random.default_rng(cfg.seed)
    best = None  # (count, -rmse, transform, mask)
    iters = 0
    for iters in range(1, cfg.max_iters + 1):
        picks = rng.choice(n, size=3, replace=False)
        try:
            hyp = kabsch_rigid(src[picks], dst[picks])
        except ValueError:
            continue
        mask, res = _count_inliers(hyp, src, dst, cfg.inlier_tau)
        count = int(mask.sum())
        if count < 3:
            continue
        rmse = float(np.sqrt((res[mask] ** 2).mean()))
        key = (count, -rmse)
        if best is None or key > best[0]:
            best = (key, hyp, mask)
            ir = count / n
            if 1.0 - (1.0 - ir ** 3) ** iters >= cfg.confidence:
                break
        else:
            ir = best[0][0] / n
            if 1.0 - (1.0 - ir ** 3) ** iters >= cfg.confidence:
                break

    if best is None:
        raise RegistrationFailedError("no hypothesis reached 3 inliers")

    _, transform, mask = best
    for _ in range(cfg.refine_rounds):
        try:
            refit = kabsch_rigid(src[mask], dst[mask])
        except ValueError:
            break
        new_mask, _ = _count_inliers(refit, src, dst, cfg.inlier_tau)
        if int(new_mask.sum()) < int(mask.sum()):
            break
        transform, mask = refit, new_mask
    _, res = _count_inliers(transform, src, dst, cfg.inlier_tau)
    rmse = float(np.sqrt((res[mask] ** 2).mean()))
    return RegistrationResult(
        transform=transform,
        inliers=np.flatnonzero(mask),
        inlier_rmse=rmse,
        num_iters=iters,
        n_matches=n,
    )


def _keypoint_frames(cloud: PointCloud, kp_count: int, seed: int, r_lrf: float):
    """FPS keypoints and their frames; keypoints without a stable frame drop out."""
    index = build_spatial_index(cloud)
    kp = farthest_point_sample(cloud, min(kp_count, len(cloud)), seed=seed)
    kept, frames = [], []
    for i in kp:
        try:
            frames.append(estimate_lrf(cloud, index, int(i), r_lrf))
        except (DegeneratePatchError, AmbiguousFrameError):
            continue
        kept.append(int(i))
    return index, np.asarray(kept, dtype=np.int64), frames


def extract_descriptors(
    cloud: PointCloud,
    params: dsc.NetworkParams,
    kp_count: int,
    seed: int = 0,
    r_lrf: float = 0.3,
    sharpness: float = 1e-3,
    cutoff: float = 1e-6,
    threads: int = 1,
):
    """Keypoint descriptors for one cloud: (indices, descriptors, grids)."""
    index, kept, frames = _keypoint_frames(cloud, kp_count, seed, r_lrf)
    if kept.size == 0:
        raise RegistrationFailedError("no keypoint admits a stable frame")
    support = params.support
    specs = [
        VoxelGridSpec(
            center=cloud.points[i],
            frame=f,
            support=support,
            resolution=params.resolution,
            sharpness=sharpness,
            cutoff=cutoff,
        )
        for i, f in zip(kept, frames)
    ]
    grids = voxelize_batch(cloud, specs, index=index, threads=threads)
    desc = dsc.forward(grids, params)
    return kept, desc, grids


def register_pair(
    source: PointCloud,
    target: PointCloud,
    params: dsc.NetworkParams,
    kp_count: int,
    cfg: RansacConfig,
    r_lrf: float = 0.3,
    sharpness: float = 1e-3,
    cutoff: float = 1e-6,
    threads: int = 1,
) -> RegistrationResult:
    """Descriptor-based rigid registration of target onto source's frame.

    The returned transform maps source points onto the target cloud. The
    result carries the matched keypoint index pairs for inspection.
    """
    kp_p, desc_p, _ = extract_descriptors(
        source, params, kp_count, cfg.seed, r_lrf, sharpness, cutoff, threads
    )
    kp_q, desc_q, _ = extract_descriptors(
        target, params, kp_count, cfg.seed, r_lrf, sharpness, cutoff, threads
    )
    pairs = mutual_nearest(desc_p, desc_q)
    if pairs.shape[0] < 3:
        raise RegistrationFailedError(f"only {pairs.shape[0]} mutual matches")
    src = source.points[kp_p[pairs[:, 0]]]
    dst = target.points[kp_q[pairs[:, 1]]]
    result = ransac_register(src, dst, cfg)
    result.pairs = np.column_stack([kp_p[pairs[:, 0]], kp_q[pairs[:, 1]]])
    return result
