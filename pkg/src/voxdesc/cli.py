"""Command-line drivers for the descriptor and registration pipeline.

Subcommands: synth (pair corpus generation), train, extract, register,
evaluate, gradcheck. All of them honor --seed / --threads / --config /
--json; exit codes are 0 (success), 1 (usage error), 2 (runtime failure).
Outputs are free of wall-clock values, so a fixed seed reproduces every
artifact bit for bit.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from . import autodiff as ad
from . import datagen as dg
from . import descriptor as dsc
from . import metrics as mx
from .alignment import fit_affine_op, loss_ops
from .lrf import LrfFrame
from .matching import (
    compatibility_matrix,
    confidence,
    match_descriptors,
    mutual_nearest,
    spectral_weights,
)
from .pointcloud import PointCloud, RigidTransform, build_spatial_index
from .registration import (
    RansacConfig,
    RegistrationFailedError,
    extract_descriptors,
    ransac_register,
    register_pair,
)
from .trainer import StepSkipped, TrainConfig, train, training_step
from .voxelizer import VoxelGridSpec, dump_voxels, voxelize, voxelize_backward

log = logging.getLogger(__name__)

_RUNTIME_ERRORS = (OSError, ValueError, RuntimeError, StepSkipped, np.linalg.LinAlgError)


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage failures exit 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config files


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _read_config(path) -> dict[str, str]:
    """Flat key=value lines; blank lines and # comments ignored."""
    opts: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep or not key.strip():
                raise ValueError(f"{path}:{ln}: expected key=value, got {line!r}")
            opts[key.strip().replace("-", "_")] = val.strip()
    return opts


def _apply_config(sub: argparse.ArgumentParser, path) -> None:
    """Install file values as defaults on `sub`; explicit flags still win."""
    opts = _read_config(path)
    actions = {a.dest: a for a in sub._actions if a.dest != "help"}
    converted = {}
    for key, val in opts.items():
        act = actions.get(key)
        if act is None:
            raise ValueError(f"{path}: unknown option {key!r} for this subcommand")
        if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            low = val.lower()
            if low in _TRUE:
                converted[key] = True
            elif low in _FALSE:
                converted[key] = False
            else:
                raise ValueError(f"{path}: {key} expects a boolean, got {val!r}")
        elif act.type is not None:
            try:
                converted[key] = act.type(val)
            except (TypeError, ValueError) as e:
                raise ValueError(f"{path}: bad value for {key}: {e}") from e
        else:
            converted[key] = val
    sub.set_defaults(**converted)


# ---------------------------------------------------------------------------
# shared helpers


def _emit(args, payload: dict, human_lines: list[str]) -> None:
    if args.json:
        print(json.dumps(_json_safe(payload), indent=2, sort_keys=True))
    else:
        for line in human_lines:
            print(line)


def _json_safe(obj):
    """Recursively replace non-finite floats (invalid in strict JSON) with None."""
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _derive_seed(base: int, n: int) -> int:
    return (base * 1000003 + n) % (2 ** 32)


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def _transform_rows(t: RigidTransform) -> list[list[float]]:
    m = np.hstack([t.rotation, t.translation[:, None]])
    return [[float(v) for v in row] for row in m]


# ---------------------------------------------------------------------------
# synth


def _cmd_synth(args) -> int:
    if (args.in_dir is None) == (args.gen is None):
        # one source of shapes, not zero, not two
        print("error: exactly one of --in or --gen is required", file=sys.stderr)
        return 1
    shapes = []
    if args.in_dir is not None:
        paths = sorted(
            p for p in os.listdir(args.in_dir)
            if os.path.splitext(p)[1].lower() in (".ply", ".off", ".xyz")
        )
        if not paths:
            print(f"error: no .ply/.off/.xyz files in {args.in_dir}", file=sys.stderr)
            return 2
        failures = []
        for p in paths:
            full = os.path.join(args.in_dir, p)
            try:
                shapes.append(dg.load_point_cloud(full))
            except (OSError, ValueError) as e:
                failures.append(f"{full}: {e}")
        if failures:
            for f in failures:
                print(f"error: {f}", file=sys.stderr)
            return 2
    else:
        if args.gen < 1:
            print("error: --gen must be >= 1", file=sys.stderr)
            return 1
        shapes = [
            dg.make_shape(_derive_seed(args.seed, i), n_points=args.gen_points,
                          radius=args.gen_radius)
            for i in range(args.gen)
        ]

    count = args.count if args.count is not None else len(shapes)
    if count < 1:
        print("error: --count must be >= 1", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    rows = []
    lines = []
    overlaps = []
    for i in range(count):
        shape = shapes[i % len(shapes)]
        base = _derive_seed(args.seed, 10000 + i)
        pair = None
        used = base
        overlap = 0.0
        for attempt in range(args.max_tries):
            used = (base + attempt * 615949) % (2 ** 32)
            cfg = dg.PairGenConfig(
                seed=used, max_rot_deg=args.max_rot, trans_range=args.trans,
                crop_k=args.crop_k, noise_std=args.noise, noise_clip=args.noise_clip,
            )
            cand = dg.make_pair(shape, cfg)
            overlap = dg.overlap_ratio(cand.source, cand.target, cand.transform,
                                       tau=args.overlap_tau)
            if overlap >= args.min_overlap:
                pair = cand
                break
        if pair is None:
            print(
                f"error: pair {i}: overlap {overlap:.3f} below --min-overlap "
                f"{args.min_overlap} after {args.max_tries} attempts",
                file=sys.stderr,
            )
            return 2
        pair.id = f"pair_{i:04d}"
        dg.write_pair_dir(pair, os.path.join(args.out, pair.id))
        rows.append((pair.id, overlap, used))
        overlaps.append(overlap)
        lines.append(f"{pair.id} overlap={overlap:.6f} seed={used}")
    dg.write_manifest(args.out, rows)
    lines.append(f"wrote {count} pairs to {args.out}")
    _emit(args, {
        "command": "synth", "out": args.out, "pairs": count,
        "mean_overlap": float(np.mean(overlaps)),
        "manifest": os.path.join(args.out, "manifest.csv"),
    }, lines)
    return 0


# ---------------------------------------------------------------------------
# train


def _cmd_train(args) -> int:
    pairs = dg.load_pairs(args.pairs)
    if not pairs:
        print(f"error: no pair directories under {args.pairs}", file=sys.stderr)
        return 2
    if args.init_ckpt:
        params = dsc.load_checkpoint(args.init_ckpt)
        if params.resolution != args.resolution or params.descriptor_dim != args.dim:
            print(
                f"error: checkpoint is h={params.resolution}, n={params.descriptor_dim}; "
                f"flags ask for h={args.resolution}, n={args.dim}",
                file=sys.stderr,
            )
            return 2
    else:
        params = dsc.init_network(args.seed, descriptor_dim=args.dim,
                                  resolution=args.resolution, r_lrf=args.r_lrf)
    cfg = TrainConfig(
        steps=args.steps, kp_per_cloud=args.kp, lr=args.lr,
        lambda_o=args.lambda_o, lambda_c=args.lambda_c, r_lrf=args.r_lrf,
        sharpness=args.sharpness, resolution=args.resolution, descriptor_dim=args.dim,
        cutoff=args.cutoff, damping=args.damping, sigma_d=args.sigma_d,
        power_iters=args.power_iters, min_positive=args.min_positive,
        seed=args.seed, threads=args.threads, checkpoint_every=args.checkpoint_every,
        fixed_support=args.fixed_support, no_wf=args.no_wf, no_wsm=args.no_wsm,
        no_lo=args.no_lo, no_lc=args.no_lc, soft_positions=args.soft_positions,
    )
    params, records = train(pairs, params, cfg, out_dir=args.out)
    losses = np.array([r.l_pcr for r in records])
    done = losses[np.isfinite(losses)]
    skipped = int(np.isnan(losses).sum())
    tail = float(done[-min(100, done.size):].mean()) if done.size else float("nan")
    ckpt = os.path.join(args.out, "checkpoint_final.bin")
    _emit(args, {
        "command": "train", "steps": cfg.steps, "skipped": skipped,
        "l_pcr_tail100": tail, "support": params.support,
        "checkpoint": ckpt, "log": os.path.join(args.out, "train.csv"),
    }, [
        f"trained {cfg.steps} steps on {len(pairs)} pairs ({skipped} skipped)",
        f"l_pcr over last 100 unskipped steps: {tail:.6g}",
        f"support: {params.support:.6g}",
        f"checkpoint: {ckpt}",
    ])
    return 0


# ---------------------------------------------------------------------------
# extract


def _cmd_extract(args) -> int:
    params = dsc.load_checkpoint(args.ckpt)
    cloud = dg.load_point_cloud(args.cloud)
    kept, desc, grids = extract_descriptors(
        cloud, params, args.kp, seed=args.seed, r_lrf=args.r_lrf,
        sharpness=args.sharpness, cutoff=args.cutoff, threads=args.threads,
    )
    dsc.write_descriptors(args.out, desc, kept)
    if args.dump_voxels:
        with open(args.dump_voxels, "w", encoding="utf-8") as fh:
            for idx, grid in zip(kept, grids):
                fh.write(f"# keypoint {int(idx)}\n")
                dump_voxels(grid, fh)
    _emit(args, {
        "command": "extract", "cloud": args.cloud, "points": len(cloud),
        "keypoints": int(kept.size), "dim": int(desc.shape[1]), "out": args.out,
    }, [
        f"{args.cloud}: {len(cloud)} points, {kept.size} keypoints, "
        f"dim {desc.shape[1]} -> {args.out}",
    ])
    return 0


# ---------------------------------------------------------------------------
# register


def _dump_corrs(path, source, target, params, args) -> None:
    """Weighted correspondence dump: `i j w_f w_sm w` per line (cloud indices)."""
    kp_p, desc_p, _ = extract_descriptors(
        source, params, args.kp, seed=args.seed, r_lrf=args.r_lrf,
        sharpness=args.sharpness, cutoff=args.cutoff, threads=args.threads)
    kp_q, desc_q, _ = extract_descriptors(
        target, params, args.kp, seed=args.seed, r_lrf=args.r_lrf,
        sharpness=args.sharpness, cutoff=args.cutoff, threads=args.threads)
    corr = match_descriptors(desc_p, desc_q)
    cm = compatibility_matrix(corr, source.points[kp_p], target.points[kp_q],
                              sigma_d=args.sigma_d)
    corr.w_sm = spectral_weights(cm)
    corr = confidence(corr)
    with open(path, "w", encoding="utf-8") as fh:
        for (i, j), wf, wsm, w in zip(corr.pairs, corr.w_f, corr.w_sm, corr.w):
            fh.write(f"{int(kp_p[i])} {int(kp_q[j])} {wf:.10g} {wsm:.10g} {w:.10g}\n")


def _cmd_register(args) -> int:
    params = dsc.load_checkpoint(args.ckpt)
    source = dg.load_point_cloud(args.src)
    target = dg.load_point_cloud(args.dst)
    cfg = RansacConfig(inlier_tau=args.inlier_tau, max_iters=args.max_iters,
                       confidence=args.confidence, seed=args.seed,
                       refine_rounds=args.refine_rounds)
    result = register_pair(
        source, target, params, args.kp, cfg, r_lrf=args.r_lrf,
        sharpness=args.sharpness, cutoff=args.cutoff, threads=args.threads,
    )
    if args.dump_corrs:
        _dump_corrs(args.dump_corrs, source, target, params, args)
    payload = {
        "command": "register", "src": args.src, "dst": args.dst,
        "transform": _transform_rows(result.transform),
        "inliers": int(result.inliers.size),
        "inlier_rmse": float(result.inlier_rmse),
        "num_iters": int(result.num_iters),
        "n_matches": int(result.n_matches),
    }
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(_json_safe(payload), fh, indent=2, sort_keys=True)
            fh.write("\n")
    rows = _transform_rows(result.transform)
    _emit(args, payload, [
        f"matches: {result.n_matches}, inliers: {result.inliers.size}, "
        f"rmse: {result.inlier_rmse:.6g}, iters: {result.num_iters}",
        "transform (3x4, maps src into dst frame):",
        *("  " + " ".join(f"{v: .8f}" for v in row) for row in rows),
    ])
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _gt_keypoint_pairs(src_kp_pts, dst_kp_pts, gt: RigidTransform, tau: float):
    """Mutual nearest keypoint pairs under the ground-truth map, within tau."""
    mapped = gt.apply(src_kp_pts)
    d = np.linalg.norm(mapped[:, None, :] - dst_kp_pts[None, :, :], axis=2)
    fwd = d.argmin(axis=1)
    bwd = d.argmin(axis=0)
    ii = np.arange(src_kp_pts.shape[0])
    keep = (bwd[fwd] == ii) & (d[ii, fwd] < tau)
    return np.column_stack([ii[keep], fwd[keep]]).astype(np.int64)


def _rot_angle_deg(r_est: np.ndarray, r_gt: np.ndarray) -> float:
    c = (np.trace(r_est @ r_gt.T) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def _cmd_evaluate(args) -> int:
    params = dsc.load_checkpoint(args.ckpt)
    pairs = dg.load_pairs(args.pairs)
    if not pairs:
        print(f"error: no pair directories under {args.pairs}", file=sys.stderr)
        return 2
    per_pair = []
    irs, rmses = [], []
    est_list, gt_list = [], []
    failures = 0
    for pair in pairs:
        kp_p, desc_p, _ = extract_descriptors(
            pair.source, params, args.kp, seed=args.seed, r_lrf=args.r_lrf,
            sharpness=args.sharpness, cutoff=args.cutoff, threads=args.threads)
        kp_q, desc_q, _ = extract_descriptors(
            pair.target, params, args.kp, seed=args.seed, r_lrf=args.r_lrf,
            sharpness=args.sharpness, cutoff=args.cutoff, threads=args.threads)
        matches = mutual_nearest(desc_p, desc_q)
        cloud_pairs = np.column_stack([kp_p[matches[:, 0]], kp_q[matches[:, 1]]])
        ir = mx.inlier_ratio(pair.source.points, pair.target.points, cloud_pairs,
                             pair.transform, tau1=args.tau1)
        irs.append(ir)

        gt_kp = _gt_keypoint_pairs(pair.source.points[kp_p], pair.target.points[kp_q],
                                   pair.transform, args.gt_tau)
        gt_cloud_pairs = np.column_stack([kp_p[gt_kp[:, 0]], kp_q[gt_kp[:, 1]]])

        est = None
        rmse = float("inf")
        rot_err = trans_err = float("nan")
        try:
            if matches.shape[0] < 3:
                raise RegistrationFailedError(f"only {matches.shape[0]} mutual matches")
            cfg = RansacConfig(inlier_tau=args.inlier_tau, max_iters=args.max_iters,
                               confidence=args.confidence, seed=args.seed,
                               refine_rounds=args.refine_rounds)
            result = ransac_register(pair.source.points[cloud_pairs[:, 0]],
                                     pair.target.points[cloud_pairs[:, 1]], cfg)
            est = result.transform
        except (RegistrationFailedError, ValueError) as e:
            failures += 1
            log.warning("%s: registration failed: %s", pair.id, e)
        if est is not None:
            if gt_kp.shape[0] >= 1:
                rmse = mx.correspondence_rmse(pair.source.points, pair.target.points,
                                              gt_cloud_pairs, est)
            rot_err = _rot_angle_deg(est.rotation, pair.transform.rotation)
            trans_err = float(np.linalg.norm(est.translation - pair.transform.translation))
            est_list.append(est)
            gt_list.append(pair.transform)
        rmses.append(rmse)
        per_pair.append({
            "pair": pair.id, "n_src_kp": int(kp_p.size), "n_dst_kp": int(kp_q.size),
            "n_matches": int(matches.shape[0]), "inlier_ratio": ir,
            "n_gt_corr": int(gt_kp.shape[0]), "rmse": rmse,
            "rot_err_deg": rot_err, "trans_err": trans_err,
            "registered": int(est is not None),
        })

    fmr = mx.feature_match_recall(irs, tau2=args.tau2)
    rr = mx.registration_recall(rmses, thresh=args.rr_thresh)
    pose = mx.pose_errors(est_list, gt_list) if est_list else None
    if args.out:
        cols = ["pair", "n_src_kp", "n_dst_kp", "n_matches", "inlier_ratio",
                "n_gt_corr", "rmse", "rot_err_deg", "trans_err", "registered"]
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in per_pair:
                w.writerow([_fmt(row[c]) if isinstance(row[c], float) else row[c]
                            for c in cols])
    payload = {
        "command": "evaluate", "pairs": len(pairs), "failed": failures,
        "inlier_ratio_mean": float(np.mean(irs)), "fmr": fmr, "rr": rr,
        "rot_rmse_deg": pose.rot_rmse if pose else float("nan"),
        "trans_rmse": pose.trans_rmse if pose else float("nan"),
        "rot_r2": pose.rot_r2 if pose else float("nan"),
        "trans_r2": pose.trans_r2 if pose else float("nan"),
        "csv": args.out,
    }
    lines = [
        f"pairs: {len(pairs)} ({failures} failed to register)",
        f"inlier ratio (mean over pairs): {np.mean(irs):.6g}",
        f"feature match recall (tau2={args.tau2:g}): {fmr:.6g}",
        f"registration recall (rmse<{args.rr_thresh:g}): {rr:.6g}",
    ]
    if pose:
        lines += [
            f"rotation rmse: {pose.rot_rmse:.6g} deg (R2 {pose.rot_r2:.6g})",
            f"translation rmse: {pose.trans_rmse:.6g} (R2 {pose.trans_r2:.6g})",
        ]
    if args.out:
        lines.append(f"per-pair csv: {args.out}")
    _emit(args, payload, lines)
    return 0


# ---------------------------------------------------------------------------
# gradcheck suites
#
# Each suite returns (name, max relative error, tolerance). Relative error
# uses |a - n| / max(floor, |a| + |n|): central differences of an O(10) loss
# carry ~1e-9 absolute noise, so near-zero gradients need the floor to avoid
# reporting noise as disagreement.


_FD_FLOOR = 1e-4


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(_FD_FLOOR, abs(analytic) + abs(numeric))


def _gc_voxelize(seed: int):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.35, 0.35, size=(40, 3))
    cloud = PointCloud(pts)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    center = pts[0]
    frame = LrfFrame(axes=q, center=center, radius=0.3)
    up = rng.normal(size=(6, 6, 6))

    def value(points: np.ndarray, support: float) -> float:
        spec = VoxelGridSpec(center=points[0], frame=LrfFrame(axes=q, center=points[0], radius=0.3),
                             support=support, resolution=6, sharpness=1e-3, cutoff=0.0)
        grid = voxelize(PointCloud(points), spec)
        return float((up * grid.values).sum())

    spec = VoxelGridSpec(center=center, frame=frame, support=0.35,
                         resolution=6, sharpness=1e-3, cutoff=0.0)
    d_support, d_points = voxelize_backward(cloud, spec, up)
    eps = 1e-6
    worst = _rel_err(d_support, (value(pts, 0.35 + eps) - value(pts, 0.35 - eps)) / (2 * eps))
    # keypoint 0 anchors the grid, so skip it: moving it moves the grid too,
    # which the per-point gradient deliberately does not model
    for flat in rng.choice(np.arange(3, pts.size), size=12, replace=False):
        i, axis = divmod(int(flat), 3)
        dp = pts.copy(); dp[i, axis] += eps
        dm = pts.copy(); dm[i, axis] -= eps
        num = (value(dp, 0.35) - value(dm, 0.35)) / (2 * eps)
        worst = max(worst, _rel_err(float(d_points[i, axis]), num))
    return "voxelize", worst, 1e-4


def _gc_conv(seed: int, step: float, stride: int, name: str):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 5, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=(3,))

    def fn(tape, xt, kt, bt):
        return ad.abs_sum(ad.conv3d(xt, kt, bt, stride=stride, padding=1))

    return name, ad.grad_check(fn, [x, k, b], step=step), 1e-4


def _gc_instnorm(seed: int, step: float):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 4, 4, 4))

    def fn(tape, xt):
        return ad.abs_sum(ad.instance_norm(xt))

    return "instance_norm", ad.grad_check(fn, [x], step=step), 1e-4


def _gc_softmax(seed: int, step: float):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(8,))
    keys = rng.normal(size=(5, 8))

    def fn(tape, qt, kt):
        return ad.pick(ad.softmax_neg_distance(qt, kt), 2)

    return "softmax_neg_distance", ad.grad_check(fn, [q, keys], step=step), 1e-4


def _gc_fit(seed: int, step: float):
    rng = np.random.default_rng(seed)
    src = rng.uniform(-1, 1, size=(10, 3))
    dst = rng.uniform(-1, 1, size=(10, 3))
    w = rng.uniform(0.5, 1.5, size=10)

    def fn(tape, wt):
        return ad.abs_sum(fit_affine_op(src, dst, wt, damping=1e-9))

    return "fit_affine", ad.grad_check(fn, [w], step=step), 1e-4


def _gc_fit_soft(seed: int, step: float):
    rng = np.random.default_rng(seed)
    src = rng.uniform(-1, 1, size=(10, 3))
    dst = rng.uniform(-1, 1, size=(10, 3))
    w = rng.uniform(0.5, 1.5, size=10)

    def fn(tape, wt, dt):
        return ad.abs_sum(fit_affine_op(src, dt, wt, damping=1e-9))

    return "fit_affine_soft_targets", ad.grad_check(fn, [w, dst], step=step), 1e-4


def _fit_pair_graph(tape, w1t, w2t, seed: int):
    rng = np.random.default_rng(seed)
    s1 = rng.uniform(-1, 1, size=(12, 3))
    d1 = rng.uniform(-1, 1, size=(12, 3))
    s2 = rng.uniform(-1, 1, size=(12, 3))
    d2 = rng.uniform(-1, 1, size=(12, 3))
    xf = fit_affine_op(s1, d1, w1t, damping=1e-9)
    xb = fit_affine_op(s2, d2, w2t, damping=1e-9)
    return loss_ops(xf, xb)


def _gc_loss_o(seed: int, step: float):
    rng = np.random.default_rng(seed)
    w1 = rng.uniform(0.5, 1.5, size=12)
    w2 = rng.uniform(0.5, 1.5, size=12)

    def fn(tape, w1t, w2t):
        return _fit_pair_graph(tape, w1t, w2t, seed)[1]

    return "loss_orthogonality", ad.grad_check(fn, [w1, w2], step=step), 1e-4


def _gc_loss_c(seed: int, step: float):
    rng = np.random.default_rng(seed)
    w1 = rng.uniform(0.5, 1.5, size=12)
    w2 = rng.uniform(0.5, 1.5, size=12)

    def fn(tape, w1t, w2t):
        return _fit_pair_graph(tape, w1t, w2t, seed)[2]

    return "loss_cycle", ad.grad_check(fn, [w1, w2], step=step), 1e-4


def _gc_end_to_end(seed: int):
    """Step-loss gradient vs finite differences on an h=8 micro-network.

    Samples a handful of coordinates per parameter tensor; each numeric
    gradient reruns the full voxelize -> descriptor -> match -> fit -> loss
    forward in float64.
    """
    shape = dg.make_shape(_derive_seed(seed, 51), n_points=192, radius=0.4)
    pair = dg.make_pair(shape, dg.PairGenConfig(
        seed=_derive_seed(seed, 52), max_rot_deg=45.0, trans_range=0.5,
        crop_k=160, noise_std=0.003, noise_clip=0.01))
    pair.id = "gradcheck_pair"
    cfg = TrainConfig(steps=1, kp_per_cloud=6, resolution=8, descriptor_dim=8,
                      cutoff=0.0, seed=seed)
    params = dsc.init_network(seed, descriptor_dim=8, resolution=8)
    # float64 weights: perturbing float32 storage would quantize the FD step
    params.conv_kernels = [k.astype(np.float64) for k in params.conv_kernels]
    params.linear_weight = params.linear_weight.astype(np.float64)
    params.linear_bias = params.linear_bias.astype(np.float64)
    cache: dict = {}
    report, grads = training_step(pair, params, cfg, cache, dtype=np.float64)

    def loss() -> float:
        r, _ = training_step(pair, params, cfg, cache, dtype=np.float64)
        return r.l_pcr

    rng = np.random.default_rng(seed)
    # The forward stacks six ReLU layers plus abs-based losses, so the loss is
    # piecewise smooth: along high-sensitivity directions (log_support moves
    # every voxel at once) the nearest kink can sit within 1e-6 of the base
    # point and a wider central difference straddles it.  1e-7 stays below the
    # kink distance while keeping roundoff ~1e-8 absolute for an O(10) loss.
    eps = 1e-7
    worst = 0.0
    for name in dsc.param_names():
        arr = _param_array(params, name)
        flat = arr.reshape(-1)
        n_coords = min(4, flat.size)
        for flat_i in rng.choice(flat.size, size=n_coords, replace=False):
            orig = flat[flat_i]
            flat[flat_i] = orig + eps
            up = loss()
            flat[flat_i] = orig - eps
            down = loss()
            flat[flat_i] = orig
            num = (up - down) / (2 * eps)
            worst = max(worst, _rel_err(float(grads[name].reshape(-1)[flat_i]), num))
    orig = params.log_support
    params.log_support = orig + eps
    up = loss()
    params.log_support = orig - eps
    down = loss()
    params.log_support = orig
    num = (up - down) / (2 * eps)
    worst = max(worst, _rel_err(float(grads["log_support"]), num))
    return "end_to_end_step", worst, 1e-3


def _param_array(params: dsc.NetworkParams, name: str) -> np.ndarray:
    if name.startswith("conv"):
        return params.conv_kernels[int(name[4:name.index(".")])]
    if name == "linear.weight":
        return params.linear_weight
    if name == "linear.bias":
        return params.linear_bias
    raise KeyError(name)


def gradient_suites(mode: str, seed: int, step: float = 1e-5):
    """All finite-difference suites for `gradcheck`; shared with the tests."""
    rows = [
        _gc_voxelize(seed),
        _gc_conv(seed, step, stride=1, name="conv3d"),
        _gc_conv(seed + 1, step, stride=2, name="conv3d_stride2"),
        _gc_instnorm(seed, step),
        _gc_softmax(seed, step),
        _gc_fit(seed, step),
        _gc_loss_o(seed, step),
        _gc_loss_c(seed, step),
    ]
    if mode == "full":
        rows.append(_gc_fit_soft(seed, step))
        rows.append(_gc_end_to_end(seed))
    return rows


def _cmd_gradcheck(args) -> int:
    rows = gradient_suites(args.mode, args.seed, args.step)
    suites = [{"name": n, "rel_err": float(e), "tol": t, "passed": bool(e < t)}
              for n, e, t in rows]
    ok = all(s["passed"] for s in suites)
    lines = [f"{s['name']:<26} {s['rel_err']:.3e}  tol {s['tol']:.0e}  "
             f"{'PASS' if s['passed'] else 'FAIL'}" for s in suites]
    lines.append("all suites passed" if ok else "FAILED")
    _emit(args, {"command": "gradcheck", "mode": args.mode, "suites": suites,
                 "passed": ok}, lines)
    return 0 if ok else 2


# ---------------------------------------------------------------------------
# parser


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--seed", type=int, default=0, help="deterministic run seed")
    sub.add_argument("--threads", type=int, default=1,
                     help="worker threads for voxelization fan-out")
    sub.add_argument("--config", metavar="FILE", default=None,
                     help="flat key=value file; explicit flags override it")
    sub.add_argument("--json", action="store_true",
                     help="machine-readable JSON summary on stdout")


def _add_extraction_flags(sub: argparse.ArgumentParser, kp_default: int = 128) -> None:
    sub.add_argument("--kp", type=int, default=kp_default, help="keypoints per cloud")
    sub.add_argument("--r-lrf", type=float, default=0.3, help="local patch radius")
    sub.add_argument("--sharpness", type=float, default=1e-3,
                     help="occupancy sigmoid sharpness")
    sub.add_argument("--cutoff", type=float, default=1e-6,
                     help="per-point occupancy cutoff (0 = exact)")


def _add_ransac_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--inlier-tau", type=float, default=0.1,
                     help="RANSAC inlier distance threshold")
    sub.add_argument("--max-iters", type=int, default=50000, help="RANSAC iteration cap")
    sub.add_argument("--confidence", type=float, default=0.999,
                     help="early-stop confidence")
    sub.add_argument("--refine-rounds", type=int, default=2,
                     help="inlier re-fit rounds after search")


def _build_parser():
    parser = _Parser(prog="voxdesc",
                     description="Learned 3D local descriptors and registration.")
    parser.add_argument("--version", action="version", version=f"voxdesc {__version__}")
    subs_action = parser.add_subparsers(dest="command", required=True, metavar="COMMAND",
                                        parser_class=_Parser)
    subs: dict[str, argparse.ArgumentParser] = {}

    def add(name, help_text, func):
        sub = subs_action.add_parser(
            name, help=help_text, description=help_text,
            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        sub.set_defaults(func=func)
        subs[name] = sub
        return sub

    s = add("synth", "generate synthetic registration pairs", _cmd_synth)
    s.add_argument("--out", required=True, help="output pair directory")
    s.add_argument("--in", dest="in_dir", default=None, metavar="DIR",
                   help="directory of .ply/.off/.xyz shapes")
    s.add_argument("--gen", type=int, default=None, metavar="K",
                   help="generate K procedural shapes instead of --in")
    s.add_argument("--gen-points", type=int, default=192,
                   help="points per procedural shape")
    s.add_argument("--gen-radius", type=float, default=0.5,
                   help="procedural shape radius")
    s.add_argument("--count", type=int, default=None,
                   help="number of pairs (default: one per shape)")
    s.add_argument("--max-rot", type=float, default=45.0,
                   help="max rotation per axis, degrees")
    s.add_argument("--trans", type=float, default=0.5, help="translation range")
    s.add_argument("--crop-k", type=int, default=768, help="points kept per crop")
    s.add_argument("--noise", type=float, default=0.0, help="Gaussian noise sigma")
    s.add_argument("--noise-clip", type=float, default=None,
                   help="noise truncation bound")
    s.add_argument("--min-overlap", type=float, default=0.0,
                   help="regenerate pairs below this overlap ratio")
    s.add_argument("--overlap-tau", type=float, default=0.05,
                   help="distance threshold for the overlap ratio")
    s.add_argument("--max-tries", type=int, default=32,
                   help="regeneration attempts per pair for --min-overlap")
    _add_common(s)

    t = add("train", "train the descriptor network on a pair corpus", _cmd_train)
    t.add_argument("--pairs", required=True, help="pair corpus directory")
    t.add_argument("--out", required=True, help="run directory (checkpoints + log)")
    t.add_argument("--steps", type=int, default=2000, help="optimizer steps")
    t.add_argument("--kp", type=int, default=128, help="keypoints per cloud")
    t.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    t.add_argument("--lambda-o", type=float, default=1.0,
                   help="orthogonality loss weight")
    t.add_argument("--lambda-c", type=float, default=1.0, help="cycle loss weight")
    t.add_argument("--r-lrf", type=float, default=0.3, help="local patch radius")
    t.add_argument("--sharpness", type=float, default=1e-3,
                   help="occupancy sigmoid sharpness")
    t.add_argument("--resolution", type=int, default=16, help="voxel grid resolution")
    t.add_argument("--dim", type=int, default=32, help="descriptor dimension")
    t.add_argument("--cutoff", type=float, default=1e-6,
                   help="per-point occupancy cutoff (0 = exact)")
    t.add_argument("--sigma-d", type=float, default=0.1,
                   help="spectral compatibility bandwidth")
    t.add_argument("--power-iters", type=int, default=10,
                   help="spectral power iterations")
    t.add_argument("--damping", type=float, default=1e-9,
                   help="normal-equation damping for the weighted fit")
    t.add_argument("--min-positive", type=int, default=4,
                   help="skip steps with fewer positively weighted matches")
    t.add_argument("--checkpoint-every", type=int, default=500,
                   help="checkpoint cadence in steps")
    t.add_argument("--init-ckpt", default=None, help="warm-start checkpoint")
    t.add_argument("--fixed-support", action="store_true",
                   help="freeze the learned support size")
    t.add_argument("--no-wf", action="store_true",
                   help="disable descriptor-softmax confidence weights")
    t.add_argument("--no-wsm", action="store_true",
                   help="disable spectral confidence weights")
    t.add_argument("--no-lo", action="store_true",
                   help="disable the orthogonality loss term")
    t.add_argument("--no-lc", action="store_true",
                   help="disable the cycle-consistency loss term")
    t.add_argument("--soft-positions", action="store_true",
                   help="softmax-weighted target positions instead of argmin")
    _add_common(t)

    e = add("extract", "write keypoint descriptors for one cloud", _cmd_extract)
    e.add_argument("--ckpt", required=True, help="network checkpoint")
    e.add_argument("--cloud", required=True, help="input point cloud file")
    e.add_argument("--out", required=True, help="output descriptor file")
    _add_extraction_flags(e)
    e.add_argument("--dump-voxels", default=None, metavar="FILE",
                   help="text dump of every keypoint's voxel grid")
    _add_common(e)

    r = add("register", "estimate the rigid map between two clouds", _cmd_register)
    r.add_argument("--ckpt", required=True, help="network checkpoint")
    r.add_argument("--src", required=True, help="source cloud file")
    r.add_argument("--dst", required=True, help="target cloud file")
    _add_extraction_flags(r)
    _add_ransac_flags(r)
    r.add_argument("--sigma-d", type=float, default=0.1,
                   help="spectral bandwidth for --dump-corrs weights")
    r.add_argument("--out", default=None, metavar="FILE", help="write JSON report")
    r.add_argument("--dump-corrs", default=None, metavar="FILE",
                   help="text dump of weighted correspondences (i j w_f w_sm w)")
    _add_common(r)

    v = add("evaluate", "metric suite over a pair corpus", _cmd_evaluate)
    v.add_argument("--pairs", required=True, help="pair corpus directory")
    v.add_argument("--ckpt", required=True, help="network checkpoint")
    _add_extraction_flags(v)
    _add_ransac_flags(v)
    v.add_argument("--tau1", type=float, default=0.1,
                   help="inlier distance threshold (inlier ratio)")
    v.add_argument("--tau2", type=float, default=0.05,
                   help="inlier-ratio threshold (feature match recall)")
    v.add_argument("--rr-thresh", type=float, default=0.2,
                   help="RMSE threshold (registration recall)")
    v.add_argument("--gt-tau", type=float, default=0.1,
                   help="keypoint pairing distance under the ground truth")
    v.add_argument("--out", default=None, metavar="FILE", help="per-pair CSV")
    _add_common(v)

    g = add("gradcheck", "finite-difference gradient suites", _cmd_gradcheck)
    g.add_argument("--mode", choices=("quick", "full"), default="quick",
                   help="quick: per-op suites; full: adds the end-to-end step")
    g.add_argument("--step", type=float, default=1e-5,
                   help="central-difference step for the per-op suites")
    _add_common(g)

    return parser, subs


def main(argv=None) -> int:
    parser, subs = _build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    if args.config:
        try:
            _apply_config(subs[args.command], args.config)
        except (OSError, ValueError) as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
        args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _RUNTIME_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
