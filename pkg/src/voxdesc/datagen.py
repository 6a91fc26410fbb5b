"""Dataset generation and point cloud file I/O.

File formats: PLY (ASCII and binary little-endian; big-endian is rejected),
OFF, and plain XYZ text. Parsers are strict and report the line or byte
offset of the first problem. The writer emits ASCII PLY with double
precision coordinates so round trips are exact.

Training pairs follow a fixed protocol: a random rigid motion (per-axis
uniform Euler angles and uniform translation) is applied to a parent cloud,
then each side is cropped to the k nearest neighbors of an independently
drawn center inside the 10%-inflated bounding box. Crops keep ascending
parent point order. All randomness descends from one seed through named
child streams drawn in a fixed order: rotation, translation, source crop,
target crop, source noise, target noise.

A pair directory holds source.ply, target.ply, and gt.txt (12 floats, the
row-major 3x4 transform mapping source onto target).
"""
from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .metrics import euler_xyz_to_rot
from .pointcloud import (
    PointCloud,
    RigidTransform,
    apply_transform,
    build_spatial_index,
    knn_query,
)

__all__ = [
    "PairGenConfig",
    "PairSample",
    "load_point_cloud",
    "save_ply",
    "read_gt",
    "write_gt",
    "write_pair_dir",
    "load_pair_dir",
    "load_pairs",
    "write_manifest",
    "make_shape",
    "make_pair",
    "add_gaussian_noise",
    "overlap_ratio",
]


# ---------------------------------------------------------------------------
# parsing

_PLY_SIZES = {
    "char": 1, "int8": 1, "uchar": 1, "uint8": 1,
    "short": 2, "int16": 2, "ushort": 2, "uint16": 2,
    "int": 4, "int32": 4, "uint": 4, "uint32": 4,
    "float": 4, "float32": 4, "double": 8, "float64": 8,
}
_PLY_NP = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _err(path, line, msg):
    return ValueError(f"{path}:{line}: {msg}")


def _parse_ply(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    # header is ascii regardless of body format
    end = raw.find(b"end_header")
    if end < 0:
        raise ValueError(f"{path}: missing end_header")
    nl = raw.find(b"\n", end)
    if nl < 0:
        raise ValueError(f"{path}: no newline after end_header")
    header_lines = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[nl + 1 :]

    if not header_lines or header_lines[0].strip() != "ply":
        raise _err(path, 1, "not a PLY file (missing 'ply' magic)")
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str, bool]]]] = []
    for ln, line in enumerate(header_lines[1:], start=2):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2:
                raise _err(path, ln, "malformed format line")
            fmt = tok[1]
            if fmt == "binary_big_endian":
                raise _err(path, ln, "big-endian PLY is not supported")
            if fmt not in ("ascii", "binary_little_endian"):
                raise _err(path, ln, f"unknown PLY format {fmt!r}")
        elif tok[0] == "element":
            if len(tok) != 3:
                raise _err(path, ln, "malformed element line")
            try:
                count = int(tok[2])
            except ValueError:
                raise _err(path, ln, f"bad element count {tok[2]!r}") from None
            elements.append((tok[1], count, []))
        elif tok[0] == "property":
            if not elements:
                raise _err(path, ln, "property before any element")
            if len(tok) >= 2 and tok[1] == "list":
                if len(tok) != 5:
                    raise _err(path, ln, "malformed list property")
                elements[-1][2].append((tok[4], tok[3], True))
            else:
                if len(tok) != 3:
                    raise _err(path, ln, "malformed property line")
                if tok[1] not in _PLY_SIZES:
                    raise _err(path, ln, f"unknown property type {tok[1]!r}")
                elements[-1][2].append((tok[2], tok[1], False))
        else:
            raise _err(path, ln, f"unexpected header keyword {tok[0]!r}")
    if fmt is None:
        raise ValueError(f"{path}: header has no format line")

    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise ValueError(f"{path}: no vertex element")
    _, vcount, vprops = vertex
    names = [p[0] for p in vprops]
    for need in ("x", "y", "z"):
        if need not in names:
            raise ValueError(f"{path}: vertex element lacks property {need!r}")
        ptype = vprops[names.index(need)][1]
        if ptype not in ("float", "float32", "double", "float64"):
            raise ValueError(f"{path}: vertex property {need!r} has non-float type {ptype!r}")
    if any(p[2] for p in vprops):
        raise ValueError(f"{path}: list-typed vertex properties are not supported")

    if fmt == "ascii":
        lines = body.decode("ascii", errors="replace").splitlines()
        consumed = 0
        # header_lines excludes the end_header line itself, so the body
        # starts two lines past the last header entry.
        base_line = len(header_lines) + 2
        pts = None
        for name, count, props in elements:
            if name == "vertex":
                rows = np.empty((vcount, 3), dtype=np.float64)
                xi, yi, zi = (names.index(c) for c in ("x", "y", "z"))
                for r in range(vcount):
                    if consumed >= len(lines):
                        raise ValueError(
                            f"{path}: expected {vcount} vertices, file ends after {r}"
                        )
                    tok = lines[consumed].split()
                    consumed += 1
                    if len(tok) != len(props):
                        raise _err(
                            path, base_line + consumed - 1,
                            f"vertex row has {len(tok)} values, expected {len(props)}",
                        )
                    try:
                        rows[r] = (float(tok[xi]), float(tok[yi]), float(tok[zi]))
                    except ValueError:
                        raise _err(
                            path, base_line + consumed - 1, "non-numeric vertex value"
                        ) from None
                pts = rows
                break  # later elements are not needed
            # skip a preceding element row by row (one line per row)
            if consumed + count > len(lines):
                raise ValueError(f"{path}: element {name!r} truncated")
            consumed += count
        assert pts is not None
    else:
        offset = 0
        pts = None
        for name, count, props in elements:
            if name == "vertex":
                dt = np.dtype([(p[0], "<" + _PLY_NP[p[1]]) for p in props])
                need = dt.itemsize * vcount
                if offset + need > len(body):
                    have = (len(body) - offset) // dt.itemsize
                    raise ValueError(
                        f"{path}: expected {vcount} vertices, data ends after {have}"
                        f" (byte offset {offset})"
                    )
                rec = np.frombuffer(body, dtype=dt, count=vcount, offset=offset)
                pts = np.column_stack(
                    [rec["x"].astype(np.float64), rec["y"].astype(np.float64), rec["z"].astype(np.float64)]
                )
                break
            if any(p[2] for p in props):
                raise ValueError(
                    f"{path}: binary element {name!r} with list properties precedes"
                    " the vertex element; unsupported layout"
                )
            offset += count * sum(_PLY_SIZES[p[1]] for p in props)
        assert pts is not None

    if not np.all(np.isfinite(pts)):
        bad = int(np.argwhere(~np.isfinite(pts))[0][0])
        raise ValueError(f"{path}: non-finite coordinate at vertex {bad}")
    return pts


def _parse_off(path: str) -> np.ndarray:
    with open(path) as fh:
        text = fh.read()
    lines = text.splitlines()
    ln = 0

    def next_tokens():
        nonlocal ln
        while ln < len(lines):
            s = lines[ln].split("#", 1)[0].strip()
            ln += 1
            if s:
                return s.split(), ln
        return None, ln

    tok, at = next_tokens()
    if tok is None:
        raise ValueError(f"{path}: empty file")
    if tok[0] != "OFF":
        raise _err(path, at, "missing OFF magic")
    counts = tok[1:]
    if not counts:
        tok, at = next_tokens()
        if tok is None:
            raise ValueError(f"{path}: missing count line")
        counts = tok
    if len(counts) != 3:
        raise _err(path, at, f"count line needs 3 integers, got {len(counts)}")
    try:
        nv = int(counts[0])
    except ValueError:
        raise _err(path, at, f"bad vertex count {counts[0]!r}") from None
    pts = np.empty((nv, 3), dtype=np.float64)
    for r in range(nv):
        tok, at = next_tokens()
        if tok is None:
            raise ValueError(f"{path}: expected {nv} vertices, file ends after {r}")
        if len(tok) < 3:
            raise _err(path, at, f"vertex row has {len(tok)} values, expected 3")
        try:
            pts[r] = (float(tok[0]), float(tok[1]), float(tok[2]))
        except ValueError:
            raise _err(path, at, "non-numeric vertex value") from None
    if not np.all(np.isfinite(pts)):
        bad = int(np.argwhere(~np.isfinite(pts))[0][0])
        raise ValueError(f"{path}: non-finite coordinate at vertex {bad}")
    return pts


def _parse_xyz(path: str) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            tok = s.split()
            if len(tok) != 3:
                raise _err(path, ln, f"expected 3 coordinates, got {len(tok)}")
            try:
                rows.append((float(tok[0]), float(tok[1]), float(tok[2])))
            except ValueError:
                raise _err(path, ln, "non-numeric coordinate") from None
    if not rows:
        raise ValueError(f"{path}: no points")
    pts = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        bad = int(np.argwhere(~np.isfinite(pts))[0][0])
        raise ValueError(f"{path}: non-finite coordinate at point {bad}")
    return pts


def load_point_cloud(path) -> PointCloud:
    """Load .ply, .off, or .xyz by extension."""
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ply":
        pts = _parse_ply(path)
    elif ext == ".off":
        pts = _parse_off(path)
    elif ext == ".xyz":
        pts = _parse_xyz(path)
    else:
        raise ValueError(f"{path}: unsupported extension {ext!r}")
    return PointCloud(pts, id=os.path.splitext(os.path.basename(path))[0])


def save_ply(cloud: PointCloud, path) -> None:
    """ASCII PLY with double-precision x/y/z (round-trip exact)."""
    path = os.fspath(path)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(cloud)}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        fh.write("end_header\n")
        for x, y, z in cloud.points:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")


def read_gt(path) -> RigidTransform:
    """12 whitespace-separated floats: the row-major 3x4 [R | t]."""
    path = os.fspath(path)
    with open(path) as fh:
        tok = fh.read().split()
    if len(tok) != 12:
        raise ValueError(f"{path}: expected 12 values, got {len(tok)}")
    try:
        vals = np.array([float(t) for t in tok], dtype=np.float64).reshape(3, 4)
    except ValueError:
        raise ValueError(f"{path}: non-numeric transform entry") from None
    return RigidTransform(rotation=vals[:, :3], translation=vals[:, 3])


def write_gt(t: RigidTransform, path) -> None:
    m = np.hstack([t.rotation, t.translation[:, None]])
    with open(os.fspath(path), "w") as fh:
        for row in m:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


# ---------------------------------------------------------------------------
# pair protocol


@dataclass(frozen=True)
class PairGenConfig:
    seed: int = 0
    max_rot_deg: float = 45.0
    trans_range: float = 0.5
    crop_k: int = 768
    noise_std: float = 0.0
    noise_clip: float | None = None

    def __post_init__(self):
        if not 0 <= self.max_rot_deg <= 180:
            raise ValueError(f"max_rot_deg must be in [0, 180], got {self.max_rot_deg}")
        if self.trans_range < 0:
            raise ValueError("trans_range must be non-negative")
        if self.crop_k < 4:
            raise ValueError(f"crop_k must be >= 4, got {self.crop_k}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.noise_clip is not None and not self.noise_clip > 0:
            raise ValueError("noise_clip must be positive when set")


@dataclass
class PairSample:
    """Two partially overlapping views and the motion aligning source to target."""

    source: PointCloud
    target: PointCloud
    transform: RigidTransform
    id: str = ""


def add_gaussian_noise(cloud: PointCloud, std: float, clip: float | None = None, seed: int = 0,
                       rng: np.random.Generator | None = None) -> PointCloud:
    """Per-coordinate Gaussian jitter, optionally clipped to [-clip, clip]."""
    if std < 0:
        raise ValueError("std must be non-negative")
    if std == 0:
        return cloud
    if rng is None:
        rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, std, size=cloud.points.shape)
    if clip is not None:
        if not clip > 0:
            raise ValueError("clip must be positive")
        noise = np.clip(noise, -clip, clip)
    return PointCloud(cloud.points + noise, id=cloud.id + ":n")


def _crop(cloud: PointCloud, rng: np.random.Generator, k: int, tag: str) -> PointCloud:
    lo = cloud.points.min(axis=0)
    hi = cloud.points.max(axis=0)
    mid = (lo + hi) / 2.0
    half = (hi - lo) / 2.0 * 1.1
    center = rng.uniform(mid - half, mid + half)
    index = build_spatial_index(cloud)
    idx = knn_query(index, center, min(k, len(cloud)))
    idx = np.sort(idx)
    return PointCloud(cloud.points[idx], id=cloud.id + tag)


def make_pair(cloud: PointCloud, cfg: PairGenConfig) -> PairSample:
    """One training/evaluation pair from a parent cloud.

    Child rng streams, in order: rotation (3 per-axis angles in
    [0, max_rot_deg]), translation (3 uniform in [-trans_range, trans_range]),
    source crop center, target crop center, then per-side noise.
    """
    ss = np.random.SeedSequence(cfg.seed)
    rot_s, trans_s, crop_p_s, crop_q_s, noise_p_s, noise_q_s = ss.spawn(6)
    angles = np.radians(np.random.default_rng(rot_s).uniform(0.0, cfg.max_rot_deg, 3))
    trans = np.random.default_rng(trans_s).uniform(-cfg.trans_range, cfg.trans_range, 3)
    gt = RigidTransform(euler_xyz_to_rot(*angles), trans)

    moved = apply_transform(gt, cloud)
    source = _crop(cloud, np.random.default_rng(crop_p_s), cfg.crop_k, ":src")
    target = _crop(moved, np.random.default_rng(crop_q_s), cfg.crop_k, ":dst")
    if cfg.noise_std > 0:
        source = add_gaussian_noise(source, cfg.noise_std, cfg.noise_clip,
                                    rng=np.random.default_rng(noise_p_s))
        target = add_gaussian_noise(target, cfg.noise_std, cfg.noise_clip,
                                    rng=np.random.default_rng(noise_q_s))
    return PairSample(source=source, target=target, transform=gt, id=f"pair{cfg.seed}")


def make_shape(seed: int, n_points: int = 192, radius: float = 0.5) -> PointCloud:
    """Procedural lumpy closed surface: a sphere modulated by a few random
    low-frequency waves plus a mild anisotropic stretch. Shapes from
    different seeds have distinct local geometry, which is what the
    descriptors need to latch onto."""
    if n_points < 8:
        raise ValueError("n_points must be >= 8")
    if not radius > 0:
        raise ValueError("radius must be positive")
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n_points, 3))
    norms = np.linalg.norm(u, axis=1)
    norms[norms < 1e-12] = 1.0
    u /= norms[:, None]
    r = np.ones(n_points)
    for _ in range(6):
        amp = rng.uniform(0.05, 0.18)
        freq = rng.uniform(1.5, 5.0)
        axis = rng.normal(size=3)
        axis /= max(np.linalg.norm(axis), 1e-12)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        r += amp * np.sin(freq * (u @ axis) * np.pi + phase)
    r = np.maximum(r, 0.25)
    stretch = rng.uniform(0.8, 1.25, size=3)
    pts = (u * (r * radius)[:, None]) * stretch
    return PointCloud(pts, id=f"shape{seed}")


def overlap_ratio(source: PointCloud, target: PointCloud, gt: RigidTransform, tau: float = 0.05) -> float:
    """Fraction of source points that land within tau of the target cloud
    after applying gt (distances recomputed exactly for the reported
    nearest neighbor)."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    mapped = gt.apply(source.points)
    tree = cKDTree(target.points)
    _, nn = tree.query(mapped, k=1)
    d = np.linalg.norm(mapped - target.points[nn], axis=1)
    return float((d <= tau).mean())


# ---------------------------------------------------------------------------
# pair directories


def write_pair_dir(pair: PairSample, dirpath) -> None:
    dirpath = os.fspath(dirpath)
    os.makedirs(dirpath, exist_ok=True)
    save_ply(pair.source, os.path.join(dirpath, "source.ply"))
    save_ply(pair.target, os.path.join(dirpath, "target.ply"))
    write_gt(pair.transform, os.path.join(dirpath, "gt.txt"))


def load_pair_dir(dirpath) -> PairSample:
    dirpath = os.fspath(dirpath)
    source = load_point_cloud(os.path.join(dirpath, "source.ply"))
    target = load_point_cloud(os.path.join(dirpath, "target.ply"))
    gt = read_gt(os.path.join(dirpath, "gt.txt"))
    return PairSample(source=source, target=target, transform=gt,
                      id=os.path.basename(os.path.normpath(dirpath)))


def load_pairs(root) -> list[PairSample]:
    """All pair_NNNN directories under root, in name order."""
    root = os.fspath(root)
    names = sorted(d for d in os.listdir(root) if re.fullmatch(r"pair_\d{4,}", d))
    if not names:
        raise ValueError(f"{root}: no pair_NNNN directories")
    return [load_pair_dir(os.path.join(root, d)) for d in names]


def write_manifest(root, rows: list[tuple]) -> None:
    """manifest.csv next to the pair directories: pair id, overlap, seed."""
    with open(os.path.join(os.fspath(root), "manifest.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "overlap", "seed"])
        for pair_id, overlap, seed in rows:
            w.writerow([pair_id, f"{overlap:.6f}", seed])
