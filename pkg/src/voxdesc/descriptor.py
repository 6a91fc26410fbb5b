"""Descriptor network: six 3x3x3 convolutions over the occupancy grid, each
followed by instance normalization and relu, then a linear projection to a
unit-norm feature vector.

Channel widths are (32, 32, 64, 64, 128, 128) with strides (1, 1, 2, 1, 2, 1)
and padding 1 throughout, so a resolution-16 grid flattens to 4^3 * 128 = 8192
features before the projection. Convolutions carry no bias (instance norm
would cancel it); the projection has one. The learnable support extent of the
voxel grid travels with the network parameters as log(support).

Checkpoints are a small binary container: magic, a JSON header describing the
tensor table, then raw little-endian blobs. Writes are atomic.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from math import log, sqrt

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .voxelizer import VoxelGrid

__all__ = [
    "CONV_CHANNELS",
    "CONV_STRIDES",
    "NetworkParams",
    "Descriptor",
    "CheckpointError",
    "init_network",
    "flat_features",
    "forward",
    "forward_ops",
    "materialize",
    "param_names",
    "save_checkpoint",
    "load_checkpoint",
    "write_descriptors",
    "read_descriptors",
]

CONV_CHANNELS = (32, 32, 64, 64, 128, 128)
CONV_STRIDES = (1, 1, 2, 1, 2, 1)
_K = 3
_PAD = 1

_MAGIC = b"WSDCKPT1"
_VERSION = "1"


class CheckpointError(ValueError):
    pass


@dataclass
class NetworkParams:
    """All learnable state: conv kernels, projection, and log(support)."""

    conv_kernels: list
    linear_weight: np.ndarray
    linear_bias: np.ndarray
    log_support: float
    resolution: int
    descriptor_dim: int
    version: str = _VERSION

    @property
    def support(self) -> float:
        return float(np.exp(self.log_support))


@dataclass(frozen=True)
class Descriptor:
    """Unit-length feature vector for one keypoint."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 1:
            raise ValueError(f"descriptor must be a vector, got {v.shape}")
        n = float(np.linalg.norm(v.astype(np.float64)))
        if abs(n - 1.0) > 1e-5:
            raise ValueError(f"descriptor norm {n} deviates from 1")
        object.__setattr__(self, "values", v)


def flat_features(resolution: int) -> int:
    """Feature count after the conv stack for a given grid resolution."""
    d = resolution
    for s in CONV_STRIDES:
        d = (d + 2 * _PAD - _K) // s + 1
        if d < 1:
            raise ValueError(f"resolution {resolution} collapses inside the conv stack")
    return d ** 3 * CONV_CHANNELS[-1]


def init_network(
    seed: int,
    descriptor_dim: int = 32,
    resolution: int = 16,
    r_lrf: float = 0.3,
) -> NetworkParams:
    """Fan-in scaled normal init; support starts at 2 * r_lrf / sqrt(3)."""
    if descriptor_dim < 2:
        raise ValueError(f"descriptor_dim must be >= 2, got {descriptor_dim}")
    if not r_lrf > 0:
        raise ValueError("r_lrf must be positive")
    flat = flat_features(resolution)
    rng = np.random.default_rng(seed)
    kernels = []
    c_in = 1
    for c_out in CONV_CHANNELS:
        fan_in = c_in * _K ** 3
        std = sqrt(2.0 / fan_in)
        kernels.append(rng.normal(0.0, std, size=(c_out, c_in, _K, _K, _K)).astype(np.float32))
        c_in = c_out
    w = rng.normal(0.0, sqrt(1.0 / flat), size=(descriptor_dim, flat)).astype(np.float32)
    b = np.zeros(descriptor_dim, dtype=np.float32)
    return NetworkParams(
        conv_kernels=kernels,
        linear_weight=w,
        linear_bias=b,
        log_support=log(2.0 * r_lrf / sqrt(3.0)),
        resolution=resolution,
        descriptor_dim=descriptor_dim,
    )


def param_names() -> list[str]:
    """Tensor names in canonical (checkpoint and optimizer) order."""
    return [f"conv{i}.kernel" for i in range(len(CONV_CHANNELS))] + [
        "linear.weight",
        "linear.bias",
    ]


def materialize(params: NetworkParams, tape: Tape) -> dict[str, Tensor]:
    """Trainable leaves for every network tensor on the given tape."""
    out: dict[str, Tensor] = {}
    for i, k in enumerate(params.conv_kernels):
        out[f"conv{i}.kernel"] = tape.leaf(k, requires_grad=True)
    out["linear.weight"] = tape.leaf(params.linear_weight, requires_grad=True)
    out["linear.bias"] = tape.leaf(params.linear_bias, requires_grad=True)
    return out


def _grid_batch(grids, resolution: int) -> np.ndarray:
    """Stack grids into the network's channels-last (B, h, h, h, 1) layout."""
    if isinstance(grids, np.ndarray):
        x = grids
        if x.ndim == 4:
            x = x[..., None]
        if x.ndim != 5 or x.shape[1:4] != (resolution,) * 3 or x.shape[4] != 1:
            raise ValueError(f"grid batch {grids.shape} does not match resolution {resolution}")
        return x
    vals = []
    for g in grids:
        if not isinstance(g, VoxelGrid):
            raise TypeError(f"expected VoxelGrid, got {type(g).__name__}")
        if g.spec.resolution != resolution:
            raise ValueError(
                f"grid resolution {g.spec.resolution} does not match network {resolution}"
            )
        vals.append(g.values)
    if not vals:
        raise ValueError("empty grid batch")
    return np.stack(vals)[..., None]


def forward_ops(x: Tensor, leaves: dict[str, Tensor]) -> Tensor:
    """Tape-recorded forward pass; x is channels-last (B, h, h, h, 1)."""
    t = x
    for i, stride in enumerate(CONV_STRIDES):
        t = ad.conv3d(t, leaves[f"conv{i}.kernel"], stride=stride, padding=_PAD,
                      channels_last=True)
        t = ad.instance_norm(t, channels_last=True)
        t = ad.relu(t)
    t = ad.reshape(t, (t.shape[0], -1))
    t = ad.linear(t, leaves["linear.weight"], leaves["linear.bias"])
    return ad.l2_normalize(t)


def forward(grids, params: NetworkParams, tape: Tape | None = None):
    """Descriptors for a batch of grids.

    Without a tape this runs gradient-free numpy kernels and returns a
    (B, n) float32 array; with a tape it returns the output Tensor of the
    recorded graph (parameter leaves are created on that tape and can be
    reached through it only when the caller used `materialize` -- this
    convenience path is for callers that do not need parameter gradients).
    """
    x = _grid_batch(grids, params.resolution).astype(np.float32)
    if tape is not None:
        leaves = materialize(params, tape)
        return forward_ops(tape.leaf(x), leaves)
    t = x
    for i, stride in enumerate(CONV_STRIDES):
        t = ad._conv3d_fwd(t, params.conv_kernels[i], None, stride, _PAD)
        t, _ = ad._instnorm_fwd(t, 1e-5, (1, 2, 3))
        t = np.where(t > 0, t, 0).astype(np.float32)
    t = t.reshape(t.shape[0], -1)
    t = t @ params.linear_weight.T + params.linear_bias
    norms = np.linalg.norm(t.astype(np.float64), axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("descriptor with near-zero norm before normalization")
    return (t / norms[:, None].astype(np.float32)).astype(np.float32)


# ---------------------------------------------------------------------------
# checkpoint container


def _tensor_table(params: NetworkParams) -> list[tuple[str, np.ndarray]]:
    items = [(f"conv{i}.kernel", k) for i, k in enumerate(params.conv_kernels)]
    items.append(("linear.weight", params.linear_weight))
    items.append(("linear.bias", params.linear_bias))
    items.append(("log_support", np.float64(params.log_support)))
    return items


def save_checkpoint(params: NetworkParams, path) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    path = os.fspath(path)
    table = {}
    blobs = []
    offset = 0
    for name, arr in _tensor_table(params):
        # ascontiguousarray would promote the 0-d log_support to shape (1,)
        arr = np.asarray(arr)
        if arr.ndim:
            arr = np.ascontiguousarray(arr)
        dt = "<f8" if arr.dtype == np.float64 else "<f4"
        raw = arr.astype(dt).tobytes()
        table[name] = {"shape": list(arr.shape), "dtype": dt, "offset": offset}
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": params.version,
        "resolution": params.resolution,
        "descriptor_dim": params.descriptor_dim,
        "tensors": table,
    }
    hraw = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = _MAGIC + np.uint32(len(hraw)).tobytes() + hraw + b"".join(blobs)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _expected_shapes(resolution: int, n: int) -> dict[str, tuple]:
    shapes = {}
    c_in = 1
    for i, c_out in enumerate(CONV_CHANNELS):
        shapes[f"conv{i}.kernel"] = (c_out, c_in, _K, _K, _K)
        c_in = c_out
    shapes["linear.weight"] = (n, flat_features(resolution))
    shapes["linear.bias"] = (n,)
    shapes["log_support"] = ()
    return shapes


def load_checkpoint(path) -> NetworkParams:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:8] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    hlen = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    if 12 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from e
    if header.get("version") != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')!r}")
    try:
        resolution = int(header["resolution"])
        n = int(header["descriptor_dim"])
        tensors = header["tensors"]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed header ({e})") from e

    expected = _expected_shapes(resolution, n)
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"{path}: tensor set mismatch (missing {missing}, extra {extra})")
    data = raw[12 + hlen :]
    loaded = {}
    for name, want in expected.items():
        meta = tensors[name]
        shape = tuple(meta.get("shape", ()))
        dt = meta.get("dtype")
        if shape != want:
            raise CheckpointError(f"{path}: tensor {name} has shape {shape}, expected {want}")
        if dt not in ("<f4", "<f8"):
            raise CheckpointError(f"{path}: tensor {name} has unsupported dtype {dt}")
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = size * (8 if dt == "<f8" else 4)
        off = int(meta.get("offset", -1))
        if off < 0 or off + nbytes > len(data):
            raise CheckpointError(f"{path}: tensor {name} data out of bounds")
        arr = np.frombuffer(data[off : off + nbytes], dtype=dt).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"{path}: tensor {name} contains non-finite values")
        loaded[name] = arr
    return NetworkParams(
        conv_kernels=[loaded[f"conv{i}.kernel"].astype(np.float32) for i in range(len(CONV_CHANNELS))],
        linear_weight=loaded["linear.weight"].astype(np.float32),
        linear_bias=loaded["linear.bias"].astype(np.float32),
        log_support=float(loaded["log_support"]),
        resolution=resolution,
        descriptor_dim=n,
    )


# ---------------------------------------------------------------------------
# descriptor export


def write_descriptors(path, descriptors: np.ndarray, indices) -> None:
    """Binary export: u32 count, u32 dim, float32 rows; keypoint indices go
    to a text sidecar at `<path>.indices.txt`, one per line."""
    path = os.fspath(path)
    d = np.asarray(descriptors, dtype=np.float32)
    if d.ndim != 2:
        raise ValueError(f"descriptors must be (count, dim), got {d.shape}")
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.shape[0] != d.shape[0]:
        raise ValueError(f"{idx.shape[0]} indices for {d.shape[0]} descriptors")
    with open(path, "wb") as fh:
        fh.write(np.array(d.shape, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(d, dtype="<f4").tobytes())
    with open(path + ".indices.txt", "w") as fh:
        for i in idx:
            fh.write(f"{int(i)}\n")


def read_descriptors(path) -> tuple[np.ndarray, np.ndarray]:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated descriptor file")
    count, dim = (int(v) for v in np.frombuffer(raw[:8], dtype="<u4"))
    want = 8 + count * dim * 4
    if len(raw) != want:
        raise ValueError(f"{path}: expected {want} bytes for {count}x{dim}, got {len(raw)}")
    desc = np.frombuffer(raw[8:], dtype="<f4").reshape(count, dim).copy()
    with open(path + ".indices.txt") as fh:
        idx = np.array([int(line) for line in fh.read().split()], dtype=np.int64)
    if idx.shape[0] != count:
        raise ValueError(f"{path}: sidecar has {idx.shape[0]} indices for {count} descriptors")
    return desc, idx
