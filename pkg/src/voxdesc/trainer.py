"""Weakly supervised training loop.

One step consumes one cloud pair. Keypoints (farthest point sampling) and
local frames are cached per pair; occupancy grids are rebuilt every step
because the learnable support moves. Descriptors for both sides come from
one shared network; correspondences, confidences, and a weighted affine fit
are formed in both directions, and rigidity pressure (orthogonality + cycle
consistency) supplies the loss. No pose supervision is used anywhere.

Backpropagation runs through the tape to the grid inputs, then continues
analytically through the voxelization to the support scalar (chained onto
log(support), which is what the optimizer sees). Parameter updates are Adam.
A step that cannot produce a usable correspondence set raises StepSkipped
and mutates nothing; a full epoch of skips aborts training.
"""
from __future__ import annotations

import csv
import gc
import logging
import os
import zlib
from dataclasses import dataclass, field
from time import perf_counter

import numpy as np

from . import autodiff as ad
from . import descriptor as dsc
from .alignment import LossReport, RankDeficientError, fit_affine_op, loss_ops
from .autodiff import Tape, Tensor
from .lrf import AmbiguousFrameError, DegeneratePatchError, estimate_lrf
from .matching import (
    DegenerateSpectrumError,
    compatibility_matrix,
    confidence,
    match_descriptors,
    spectral_weights,
)
from .pointcloud import PointCloud, build_spatial_index, farthest_point_sample
from .voxelizer import VoxelGridSpec, voxelize_backward_batch, voxelize_batch

__all__ = [
    "StepSkipped",
    "TrainingAborted",
    "TrainConfig",
    "TrainLogRecord",
    "training_step",
    "train",
]

log = logging.getLogger(__name__)


class StepSkipped(Exception):
    """This pair yields no usable training signal right now."""


class TrainingAborted(RuntimeError):
    """An entire epoch produced no usable step."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    kp_per_cloud: int = 128
    lr: float = 1e-3
    lambda_o: float = 1.0
    lambda_c: float = 1.0
    r_lrf: float = 0.3
    sharpness: float = 1e-3
    resolution: int = 16
    descriptor_dim: int = 32
    cutoff: float = 1e-6
    damping: float = 1e-9
    sigma_d: float = 0.1
    power_iters: int = 10
    min_positive: int = 4
    seed: int = 0
    threads: int = 1
    checkpoint_every: int = 500
    fixed_support: bool = False
    no_wf: bool = False
    no_wsm: bool = False
    no_lo: bool = False
    no_lc: bool = False
    soft_positions: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.kp_per_cloud < 4:
            raise ValueError("kp_per_cloud must be >= 4")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lambda_o < 0 or self.lambda_c < 0:
            raise ValueError("loss weights must be non-negative")
        if not (self.r_lrf > 0 and self.sharpness > 0 and self.sigma_d > 0):
            raise ValueError("r_lrf, sharpness, and sigma_d must be positive")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.min_positive < 4:
            raise ValueError("min_positive must be >= 4")


@dataclass
class TrainLogRecord:
    step: int
    l_pcr: float
    l_o: float
    l_c: float
    support: float
    seconds: float
    skipped: bool = False


@dataclass
class _SidePrep:
    index: object
    kp: np.ndarray
    frames: list
    positions: np.ndarray
    n_dropped: int


def _side_seed(base_seed: int, pair_id: str, side: str) -> int:
    return (base_seed * 1000003 + zlib.crc32(f"{pair_id}:{side}".encode())) % (2 ** 32)


def _prepare_side(cloud: PointCloud, cfg: TrainConfig, seed: int) -> _SidePrep:
    index = build_spatial_index(cloud)
    # FPS anchored at the point farthest from the centroid: overlapping crops of
    # the same shape then select mostly coincident keypoints, giving the matcher
    # true correspondences to latch onto from the first step.
    start = int(np.argmax(np.linalg.norm(cloud.points - cloud.points.mean(axis=0), axis=1)))
    kp = farthest_point_sample(cloud, min(cfg.kp_per_cloud, len(cloud)), seed=seed, start=start)
    kept, frames = [], []
    dropped = 0
    for i in kp:
        try:
            frames.append(estimate_lrf(cloud, index, int(i), cfg.r_lrf))
            kept.append(int(i))
        except (DegeneratePatchError, AmbiguousFrameError):
            dropped += 1
    kept = np.asarray(kept, dtype=np.int64)
    return _SidePrep(index, kept, frames, cloud.points[kept], dropped)


def _grid_specs(prep: _SidePrep, support: float, cfg: TrainConfig) -> list[VoxelGridSpec]:
    return [
        VoxelGridSpec(
            center=prep.positions[j],
            frame=prep.frames[j],
            support=support,
            resolution=cfg.resolution,
            sharpness=cfg.sharpness,
            cutoff=cfg.cutoff,
        )
        for j in range(prep.kp.shape[0])
    ]


def _direction(desc_a: Tensor, desc_b: Tensor, pos_a: np.ndarray, pos_b: np.ndarray,
               cfg: TrainConfig) -> Tensor:
    """One directional weighted fit (a -> b); returns the (3, 4) map tensor."""
    corr = match_descriptors(
        desc_a, desc_b,
        soft_positions=cfg.soft_positions,
        target_points=pos_b if cfg.soft_positions else None,
    )
    if not cfg.no_wsm:
        cm = compatibility_matrix(corr, pos_a, pos_b, cfg.sigma_d)
        try:
            corr.w_sm = spectral_weights(cm, cfg.power_iters)
        except DegenerateSpectrumError as e:
            raise StepSkipped(f"spectral matching degenerate: {e}") from e
    corr = confidence(corr, use_wf=not cfg.no_wf, use_wsm=not cfg.no_wsm)
    if int((corr.w > 0).sum()) < cfg.min_positive:
        raise StepSkipped(
            f"only {int((corr.w > 0).sum())} correspondences with positive weight"
        )
    src = pos_a[corr.pairs[:, 0]]
    dst = corr.soft_targets_t if cfg.soft_positions else pos_b[corr.pairs[:, 1]]
    try:
        return fit_affine_op(src, dst, corr.w_t, damping=cfg.damping)
    except RankDeficientError as e:
        raise StepSkipped(f"weighted fit rank-deficient: {e}") from e


def training_step(pair, params: dsc.NetworkParams, cfg: TrainConfig,
                  cache: dict | None = None, dtype=np.float32):
    """Forward + backward on one pair; returns (LossReport, gradients).

    Gradients are a dict over parameter names plus "log_support". Neither
    the params nor any optimizer state is touched here. dtype sets the tape
    precision; float64 is used by the finite-difference checks.
    """
    preps = []
    for side, cloud in (("src", pair.source), ("dst", pair.target)):
        key = (pair.id, side)
        if cache is not None and key in cache:
            preps.append(cache[key])
            continue
        prep = _prepare_side(cloud, cfg, _side_seed(cfg.seed, pair.id, side))
        if prep.n_dropped:
            log.debug("pair %s %s: %d keypoints without stable frames", pair.id, side, prep.n_dropped)
        if cache is not None:
            cache[key] = prep
        preps.append(prep)
    prep_p, prep_q = preps
    if prep_p.kp.shape[0] < cfg.min_positive or prep_q.kp.shape[0] < cfg.min_positive:
        raise StepSkipped(
            f"too few keypoints with stable frames ({prep_p.kp.shape[0]}, {prep_q.kp.shape[0]})"
        )

    support = params.support
    specs_p = _grid_specs(prep_p, support, cfg)
    specs_q = _grid_specs(prep_q, support, cfg)
    grids_p = voxelize_batch(pair.source, specs_p, prep_p.index, cfg.threads)
    grids_q = voxelize_batch(pair.target, specs_q, prep_q.index, cfg.threads)

    tape = Tape(dtype)
    leaves = dsc.materialize(params, tape)
    gp = tape.leaf(np.stack([g.values for g in grids_p])[..., None], requires_grad=True)
    gq = tape.leaf(np.stack([g.values for g in grids_q])[..., None], requires_grad=True)
    desc_p = dsc.forward_ops(gp, leaves)
    desc_q = dsc.forward_ops(gq, leaves)

    xf = _direction(desc_p, desc_q, prep_p.positions, prep_q.positions, cfg)
    xb = _direction(desc_q, desc_p, prep_q.positions, prep_p.positions, cfg)
    l_pcr_t, lo_t, lc_t = loss_ops(
        xf, xb,
        lambda_o=0.0 if cfg.no_lo else cfg.lambda_o,
        lambda_c=0.0 if cfg.no_lc else cfg.lambda_c,
    )
    tape.backward(l_pcr_t)

    grads: dict[str, np.ndarray] = {}
    for name, leaf in leaves.items():
        grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values)

    d_support = 0.0
    if not cfg.fixed_support:
        for cloud, specs, leaf, prep in (
            (pair.source, specs_p, gp, prep_p),
            (pair.target, specs_q, gq, prep_q),
        ):
            if leaf.grad is None:
                continue
            ups = leaf.grad[..., 0].astype(np.float64)
            outs = voxelize_backward_batch(
                cloud, specs, list(ups), prep.index, cfg.threads, want_points=False
            )
            d_support += sum(o[0] for o in outs)
    grads["log_support"] = np.asarray(0.0 if cfg.fixed_support else d_support * support)

    report = LossReport(
        l_pcr=float(l_pcr_t.values),
        l_o=float(lo_t.values),
        l_c=float(lc_t.values),
        lambda_o=0.0 if cfg.no_lo else cfg.lambda_o,
        lambda_c=0.0 if cfg.no_lc else cfg.lambda_c,
    )
    return report, grads


def _master_tensors(params: dsc.NetworkParams):
    """Long-lived optimizer tensors; params arrays are rebound onto their
    buffers so in-place Adam updates are visible everywhere."""
    tape = Tape(np.float32)
    master = dsc.materialize(params, tape)
    for i in range(len(params.conv_kernels)):
        params.conv_kernels[i] = master[f"conv{i}.kernel"].values
    params.linear_weight = master["linear.weight"].values
    params.linear_bias = master["linear.bias"].values
    log_s = Tensor(np.asarray(params.log_support, dtype=np.float64), True, tape)
    return master, log_s


def train(pairs, params: dsc.NetworkParams, cfg: TrainConfig, out_dir=None):
    """Run cfg.steps over the pairs (sequential cycling), updating params.

    Writes train.csv and periodic checkpoints under out_dir when given.
    Returns (params, records).
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no training pairs")
    master, log_s = _master_tensors(params)
    names = dsc.param_names()
    tensors = [master[n] for n in names] + [log_s]
    order = names + ["log_support"]
    state = ad.adam_init(tensors)

    writer = None
    csv_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_fh = open(os.path.join(os.fspath(out_dir), "train.csv"), "w", newline="")
        writer = csv.writer(csv_fh)
        # timing stays out of the file so logs are bit-identical across runs
        writer.writerow(["step", "l_pcr", "l_o", "l_c", "support"])

    records: list[TrainLogRecord] = []
    cache: dict = {}
    epoch_len = len(pairs)
    epoch_skips = 0
    try:
        for step in range(1, cfg.steps + 1):
            pair = pairs[(step - 1) % epoch_len]
            t0 = perf_counter()
            skipped = False
            try:
                report, grads = training_step(pair, params, cfg, cache)
            except StepSkipped as e:
                log.warning("step %d (%s) skipped: %s", step, pair.id, e)
                skipped = True
                rec = TrainLogRecord(step, float("nan"), float("nan"), float("nan"),
                                     params.support, perf_counter() - t0, skipped=True)
            if not skipped:
                glist = []
                for n in order:
                    g = grads.get(n)
                    glist.append(g if g is not None else np.zeros_like(
                        tensors[order.index(n)].values))
                ad.adam_step(tensors, glist, state, lr=cfg.lr)
                params.log_support = float(log_s.values)
                rec = TrainLogRecord(step, report.l_pcr, report.l_o, report.l_c,
                                     params.support, perf_counter() - t0)
            records.append(rec)
            log.debug("step %d: %.3fs", step, rec.seconds)
            if writer is not None:
                writer.writerow([
                    rec.step, f"{rec.l_pcr:.10g}", f"{rec.l_o:.10g}", f"{rec.l_c:.10g}",
                    f"{rec.support:.10g}",
                ])
                csv_fh.flush()

            if step % 10 == 0:
                # skipped steps leave their half-built graph cyclic (no
                # backward ran); sweep so peak memory stays step-sized
                gc.collect()
            epoch_skips = epoch_skips + 1 if skipped else epoch_skips
            if step % epoch_len == 0:
                if epoch_skips == epoch_len:
                    raise TrainingAborted(
                        f"all {epoch_len} steps of the epoch ending at step {step} were skipped"
                    )
                epoch_skips = 0

            if out_dir is not None and step % cfg.checkpoint_every == 0:
                dsc.save_checkpoint(params, os.path.join(os.fspath(out_dir),
                                                         f"checkpoint_{step:06d}.bin"))
        if out_dir is not None:
            dsc.save_checkpoint(params, os.path.join(os.fspath(out_dir), "checkpoint_final.bin"))
    finally:
        if csv_fh is not None:
            csv_fh.close()
    return params, records
