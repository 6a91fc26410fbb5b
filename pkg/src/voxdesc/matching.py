"""Descriptor matching and correspondence confidence.

A putative correspondence set takes each source keypoint to its nearest
target descriptor (hard argmin, ties to the lower index). Two confidence
signals weight it:

  w_f: the softmax share of the selected target among all targets under
       negative descriptor distance; differentiable, this is where the
       training gradient reaches the network.
  w_sm: geometric consistency from spectral matching. Pairwise length
       preservation scores fill a non-negative compatibility matrix whose
       leading eigenvector (fixed power iteration) scores each
       correspondence; treated as a constant in backprop.

The per-correspondence confidence is their product. Either factor can be
pinned to one for ablations. An optional soft mode also produces
softmax-averaged target positions so positions, too, carry gradient.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

__all__ = [
    "DegenerateSpectrumError",
    "CorrespondenceSet",
    "CompatibilityMatrix",
    "match_descriptors",
    "compatibility_matrix",
    "spectral_weights",
    "confidence",
    "mutual_nearest",
]


class DegenerateSpectrumError(ValueError):
    """Compatibility matrix annihilates the weight vector; no consistent set."""


@dataclass
class CorrespondenceSet:
    """pairs[i] = (source keypoint index, matched target keypoint index)."""

    pairs: np.ndarray
    w_f: np.ndarray
    w_sm: np.ndarray | None = None
    w: np.ndarray | None = None
    w_f_t: Tensor | None = None
    w_t: Tensor | None = None
    soft_targets: np.ndarray | None = None
    soft_targets_t: Tensor | None = None

    def __len__(self) -> int:
        return int(self.pairs.shape[0])


@dataclass(frozen=True)
class CompatibilityMatrix:
    """Symmetric non-negative pairwise consistency scores, zero diagonal."""

    m: np.ndarray
    sigma_d: float

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"compatibility matrix must be square, got {m.shape}")
        if np.abs(m - m.T).max() > 1e-12:
            raise ValueError("compatibility matrix must be symmetric")
        if np.any(m < 0):
            raise ValueError("compatibility matrix must be non-negative")
        if np.abs(np.diag(m)).max() > 0:
            raise ValueError("compatibility matrix must have a zero diagonal")
        object.__setattr__(self, "m", m)


def _dist_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances (len(a), len(b)), chunked over rows."""
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float64)
    for s in range(0, a.shape[0], 128):
        blk = a[s : s + 128, None, :] - b[None, :, :]
        out[s : s + 128] = np.sqrt((blk * blk).sum(axis=2))
    return out


def match_descriptors(
    desc_p,
    desc_q,
    soft_positions: bool = False,
    target_points: np.ndarray | None = None,
) -> CorrespondenceSet:
    """Nearest-descriptor correspondences from every source keypoint.

    Accepts (n_p, d) / (n_q, d) arrays, or Tensors to also build the
    differentiable w_f (and, in soft mode, target-position) graph.
    With soft_positions=True, `target_points` (n_q, 3) must be provided.
    """
    p_t = desc_p if isinstance(desc_p, Tensor) else None
    q_t = desc_q if isinstance(desc_q, Tensor) else None
    pv = np.asarray(p_t.values if p_t is not None else desc_p, dtype=np.float64)
    qv = np.asarray(q_t.values if q_t is not None else desc_q, dtype=np.float64)
    if pv.ndim != 2 or qv.ndim != 2 or pv.shape[1] != qv.shape[1]:
        raise ValueError(f"descriptor batches disagree: {pv.shape} vs {qv.shape}")
    if pv.shape[0] == 0 or qv.shape[0] == 0:
        raise ValueError("empty descriptor batch")
    if soft_positions and target_points is None:
        raise ValueError("soft_positions requires target_points")

    dist = _dist_rows(pv, qv)
    sel = dist.argmin(axis=1)
    pairs = np.column_stack([np.arange(pv.shape[0], dtype=np.int64), sel.astype(np.int64)])

    # softmax of negative distance along each row; plain values
    z = -dist
    e = np.exp(z - z.max(axis=1, keepdims=True))
    soft = e / e.sum(axis=1, keepdims=True)
    w_f = soft[np.arange(pv.shape[0]), sel]
    soft_tp = soft @ np.asarray(target_points, dtype=np.float64) if soft_positions else None

    w_f_t = None
    soft_t = None
    if p_t is not None and q_t is not None:
        tp_leaf = p_t.tape.leaf(target_points) if soft_positions else None
        picks = []
        srows = []
        for i in range(pv.shape[0]):
            arow = ad.softmax_neg_distance(ad.row(p_t, i), q_t)
            picks.append(ad.pick(arow, int(sel[i])))
            if soft_positions:
                srows.append(ad.reshape(ad.matmul(ad.reshape(arow, (1, -1)), tp_leaf), (3,)))
        w_f_t = ad.stack(picks)
        soft_t = ad.stack(srows) if soft_positions else None
    elif (p_t is None) != (q_t is None):
        raise ValueError("descriptor batches must both be Tensors or both arrays")

    return CorrespondenceSet(
        pairs=pairs,
        w_f=w_f,
        w_f_t=w_f_t,
        soft_targets=soft_tp,
        soft_targets_t=soft_t,
    )


def compatibility_matrix(
    corrs: CorrespondenceSet,
    src_points: np.ndarray,
    dst_points: np.ndarray,
    sigma_d: float = 0.1,
) -> CompatibilityMatrix:
    """Length-preservation scores between correspondence pairs.

    Entry (i, j) compares the source-side and target-side distances of the
    two correspondences: max(0, 1 - d_ij^2 / sigma_d^2) with d_ij the length
    difference. Diagonal forced to zero.
    """
    if not sigma_d > 0:
        raise ValueError("sigma_d must be positive")
    src_points = np.asarray(src_points, dtype=np.float64)
    dst_points = np.asarray(dst_points, dtype=np.float64)
    p = src_points[corrs.pairs[:, 0]]
    q = dst_points[corrs.pairs[:, 1]]
    dp = _dist_rows(p, p)
    dq = _dist_rows(q, q)
    d = dp - dq
    m = np.maximum(0.0, 1.0 - (d * d) / (sigma_d * sigma_d))
    np.fill_diagonal(m, 0.0)
    m = 0.5 * (m + m.T)
    return CompatibilityMatrix(m=m, sigma_d=float(sigma_d))


def spectral_weights(cm: CompatibilityMatrix, iters: int = 10) -> np.ndarray:
    """Leading-eigenvector scores by fixed-count power iteration.

    Starts from all ones and renormalizes after every multiply. A vanishing
    iterate means no correspondence is consistent with any other, which is
    reported rather than smoothed over.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    m = cm.m
    w = np.ones(m.shape[0], dtype=np.float64)
    for _ in range(iters):
        w = m @ w
        norm = np.linalg.norm(w)
        if norm <= 0.0 or not np.isfinite(norm):
            raise DegenerateSpectrumError("power iteration collapsed to zero")
        w = w / norm
    return w


def confidence(
    corrs: CorrespondenceSet,
    use_wf: bool = True,
    use_wsm: bool = True,
) -> CorrespondenceSet:
    """Final per-correspondence confidence w = w_f * w_sm.

    Disabled factors are pinned to one. w_sm must have been filled in by
    `spectral_weights` unless use_wsm is False. The tensor product (when the
    matching graph is live) treats w_sm as a constant.
    """
    n = len(corrs)
    wf = corrs.w_f if use_wf else np.ones(n)
    if use_wsm:
        if corrs.w_sm is None:
            raise ValueError("w_sm not computed; run spectral_weights first")
        wsm = corrs.w_sm
    else:
        wsm = np.ones(n)
    w_t = None
    if corrs.w_f_t is not None:
        tape = corrs.w_f_t.tape
        if use_wf:
            w_t = ad.mul(corrs.w_f_t, tape.leaf(wsm))
        else:
            w_t = tape.leaf(wf * wsm)
    return dataclasses.replace(corrs, w_sm=wsm if use_wsm else corrs.w_sm, w=wf * wsm, w_t=w_t)


def mutual_nearest(desc_p: np.ndarray, desc_q: np.ndarray) -> np.ndarray:
    """Pairs (i, j) where i and j are each other's nearest descriptors."""
    pv = np.asarray(desc_p, dtype=np.float64)
    qv = np.asarray(desc_q, dtype=np.float64)
    if pv.ndim != 2 or qv.ndim != 2 or pv.shape[1] != qv.shape[1]:
        raise ValueError(f"descriptor batches disagree: {pv.shape} vs {qv.shape}")
    dist = _dist_rows(pv, qv)
    fwd = dist.argmin(axis=1)
    bwd = dist.argmin(axis=0)
    ii = np.arange(pv.shape[0])
    keep = bwd[fwd] == ii
    return np.column_stack([ii[keep], fwd[keep]]).astype(np.int64)
