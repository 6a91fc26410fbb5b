"""Minimal reverse-mode automatic differentiation over numpy arrays.

A `Tape` records one closure per executed operation; `backward` replays them
in reverse execution order exactly once, accumulating gradients on every
tensor that requires them. The op set is exactly what the descriptor network
and the training losses need. Default precision is float32; a float64 tape is
used for finite-difference verification.

Raw numpy kernels (`_conv3d_fwd` and friends) are shared between the recorded
ops and gradient-free inference, so both paths compute identical values.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "add",
    "sub",
    "sub_const",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "slice_cols",
    "row",
    "pick",
    "stack",
    "relu",
    "linear",
    "conv3d",
    "instance_norm",
    "l2_normalize",
    "softmax_neg_distance",
    "abs_sum",
    "AdamState",
    "adam_init",
    "adam_step",
    "grad_check",
]


class Tensor:
    """Value + gradient slot bound to a tape."""

    __slots__ = ("values", "grad", "requires_grad", "tape")

    def __init__(self, values: np.ndarray, requires_grad: bool, tape: "Tape"):
        self.values = values
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape = tape

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered op record; one backward pass per tape."""

    def __init__(self, dtype=np.float32):
        if dtype not in (np.float32, np.float64):
            raise ValueError("tape dtype must be float32 or float64")
        self.dtype = np.dtype(dtype)
        self._ops: list[Callable[[], None]] = []
        self._done = False

    @property
    def n_ops(self) -> int:
        return len(self._ops)

    def leaf(self, values, requires_grad: bool = False) -> Tensor:
        v = np.asarray(values, dtype=self.dtype)
        if not np.all(np.isfinite(v)):
            raise ValueError("leaf contains non-finite values")
        return Tensor(v.copy(), requires_grad, self)

    def record(self, backward_fn: Callable[[], None]) -> None:
        if self._done:
            raise RuntimeError("tape already consumed by backward")
        self._ops.append(backward_fn)

    def backward(self, loss: Tensor) -> None:
        if loss.tape is not self:
            raise ValueError("loss does not belong to this tape")
        if loss.values.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.values.shape}")
        if self._done:
            raise RuntimeError("tape already consumed by backward")
        self._done = True
        loss.grad = np.ones_like(loss.values)
        for fn in reversed(self._ops):
            fn()
        # The closures capture every intermediate tensor while tensors point
        # back at the tape; dropping them here breaks the reference cycle so
        # step-sized graphs free by refcount instead of waiting on gc.
        self._ops.clear()


def _tape_of(*tensors: Tensor) -> Tape:
    tape = None
    for t in tensors:
        if not isinstance(t, Tensor):
            raise TypeError(f"expected Tensor, got {type(t).__name__}")
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ValueError("tensors belong to different tapes")
    assert tape is not None
    return tape


def _out(tape: Tape, values: np.ndarray, *inputs: Tensor) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    return Tensor(np.asarray(values, dtype=tape.dtype), req, tape)


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.values.dtype)
    if g.shape != t.values.shape:
        g = g.reshape(t.values.shape)
    if t.grad is None:
        t.grad = g.copy() if (g.base is not None or not g.flags.writeable) else g
    else:
        t.grad += g


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.values.shape != b.values.shape:
        raise ValueError(f"{op}: shape mismatch {a.values.shape} vs {b.values.shape}")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    _same_shape(a, b, "add")
    out = _out(tape, a.values + b.values, a, b)
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            _acc(a, out.grad)
            _acc(b, out.grad)
        tape.record(bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    _same_shape(a, b, "sub")
    out = _out(tape, a.values - b.values, a, b)
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            _acc(a, out.grad)
            _acc(b, -out.grad)
        tape.record(bwd)
    return out


def sub_const(a: Tensor, c) -> Tensor:
    """a - c with c a plain array or scalar (no gradient into c)."""
    tape = _tape_of(a)
    c = np.asarray(c, dtype=tape.dtype)
    out = _out(tape, a.values - c, a)
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            _acc(a, out.grad)
        tape.record(bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    _same_shape(a, b, "mul")
    av, bv = a.values, b.values
    out = _out(tape, av * bv, a, b)
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            _acc(a, out.grad * bv)
            _acc(b, out.grad * av)
        tape.record(bwd)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    tape = _tape_of(a)
    c = float(c)
    out = _out(tape, a.values * c, a)
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            _acc(a, out.grad * c)
        tape.record(bwd)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.values.shape[1] != b.values.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.values.shape} and {b.values.shape}")
    av, bv = a.values, b.values
    out = _out(tape, av @ bv, a, b)
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            _acc(a, out.grad @ bv.T)
            _acc(b, av.T @ out.grad)
        tape.record(bwd)
    return out


def transpose(a: Tensor) -> Tensor:
    tape = _tape_of(a)
    if a.values.ndim != 2:
        raise ValueError(f"transpose expects a 2-d tensor, got {a.values.shape}")
    out = _out(tape, a.values.T.copy(), a)
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            _acc(a, out.grad.T)
        tape.record(bwd)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    tape = _tape_of(a)
    old = a.values.shape
    out = _out(tape, a.values.reshape(shape).copy(), a)
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            _acc(a, out.grad.reshape(old))
        tape.record(bwd)
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    tape = _tape_of(a)
    if a.values.ndim != 2:
        raise ValueError(f"slice_cols expects a 2-d tensor, got {a.values.shape}")
    if not 0 <= start < stop <= a.values.shape[1]:
        raise ValueError(f"slice_cols: bad range [{start}, {stop}) for {a.values.shape}")
    out = _out(tape, a.values[:, start:stop].copy(), a)
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            g = np.zeros_like(a.values)
            g[:, start:stop] = out.grad
            _acc(a, g)
        tape.record(bwd)
    return out


def row(a: Tensor, i: int) -> Tensor:
    tape = _tape_of(a)
    if a.values.ndim != 2:
        raise ValueError(f"row expects a 2-d tensor, got {a.values.shape}")
    if not 0 <= i < a.values.shape[0]:
        raise ValueError(f"row index {i} out of range for {a.values.shape}")
    out = _out(tape, a.values[i].copy(), a)
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            g = np.zeros_like(a.values)
            g[i] = out.grad
            _acc(a, g)
        tape.record(bwd)
    return out


def pick(a: Tensor, i: int) -> Tensor:
    tape = _tape_of(a)
    if a.values.ndim != 1:
        raise ValueError(f"pick expects a 1-d tensor, got {a.values.shape}")
    if not 0 <= i < a.values.shape[0]:
        raise ValueError(f"pick index {i} out of range for {a.values.shape}")
    out = _out(tape, a.values[i : i + 1].reshape(()), a)
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            g = np.zeros_like(a.values)
            g[i] = out.grad
            _acc(a, g)
        tape.record(bwd)
    return out


def stack(ts: Sequence[Tensor]) -> Tensor:
    if len(ts) == 0:
        raise ValueError("stack needs at least one tensor")
    tape = _tape_of(*ts)
    shapes = {t.values.shape for t in ts}
    if len(shapes) != 1:
        raise ValueError(f"stack: mixed shapes {sorted(shapes)}")
    out = _out(tape, np.stack([t.values for t in ts]), *ts)
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            for i, t in enumerate(ts):
                _acc(t, out.grad[i])
        tape.record(bwd)
    return out


def relu(a: Tensor) -> Tensor:
    tape = _tape_of(a)
    mask = a.values > 0
    out = _out(tape, np.where(mask, a.values, 0), a)
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            _acc(a, out.grad * mask)
        tape.record(bwd)
    return out


def abs_sum(a: Tensor) -> Tensor:
    """Sum of absolute entries; subgradient 0 at exact zeros."""
    tape = _tape_of(a)
    out = _out(tape, np.abs(a.values).sum(), a)
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            _acc(a, out.grad * np.sign(a.values))
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# network layers


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    tape = _tape_of(x, w) if b is None else _tape_of(x, w, b)
    xv = x.values
    squeeze = xv.ndim == 1
    x2 = xv[None, :] if squeeze else xv
    if x2.ndim != 2 or w.values.ndim != 2 or x2.shape[1] != w.values.shape[1]:
        raise ValueError(f"linear: incompatible shapes {xv.shape} and {w.values.shape}")
    y = x2 @ w.values.T
    if b is not None:
        if b.values.shape != (w.values.shape[0],):
            raise ValueError(f"linear: bias shape {b.values.shape} vs {w.values.shape}")
        y = y + b.values
    out = _out(tape, y[0] if squeeze else y, x, w, *([b] if b is not None else []))
    if out.requires_grad:
        wv = w.values
        def bwd():
            if out.grad is None:
                return
            g2 = out.grad[None, :] if squeeze else out.grad
            _acc(x, (g2 @ wv)[0] if squeeze else g2 @ wv)
            _acc(w, g2.T @ x2)
            if b is not None:
                _acc(b, g2.sum(axis=0))
        tape.record(bwd)
    return out


def _im2col(xp: np.ndarray, k: int, stride: int):
    """Sliding k^3 windows of a channels-last volume, flattened to
    (B, positions, k^3*C) rows.

    The (kd, kh, kw, C) minor ordering keeps the materializing copy coalesced
    into k*C-long contiguous runs, which is what makes the im2col strategy
    affordable on CPU."""
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    b, d, h, w, c = win.shape[:5]
    cols = win.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(b, d * h * w, k ** 3 * c)
    return cols, (d, h, w)


def _pad_cl(x5: np.ndarray, p: int) -> np.ndarray:
    if not p:
        return x5
    return np.pad(x5, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))


def _kernel_mat(kern: np.ndarray) -> np.ndarray:
    """(C_out, C_in, k, k, k) -> (k^3*C_in, C_out), matching _im2col columns."""
    co = kern.shape[0]
    return np.ascontiguousarray(kern.transpose(2, 3, 4, 1, 0)).reshape(-1, co)


def _conv3d_fwd(x5: np.ndarray, kern: np.ndarray, bias, stride: int, padding: int):
    """Channels-last (B, D, H, W, C_in) -> (B, D', H', W', C_out)."""
    k, co = kern.shape[2], kern.shape[0]
    cols, (d, h, w) = _im2col(_pad_cl(x5, padding), k, stride)
    b, n_pos, ck = cols.shape
    y = cols.reshape(b * n_pos, ck) @ _kernel_mat(kern)
    if bias is not None:
        y += bias
    return y.reshape(b, d, h, w, co)


def _conv3d_bwd(x5, kern, has_bias, stride, padding, g5, need_dx=True, need_dk=True):
    """Channels-last input/kernel/bias gradients.

    The kernel gradient reuses the forward's im2col in one matmul; the input
    gradient accumulates one batched matmul per kernel offset into strided
    slices of the padded buffer, so no dilated scratch volume is ever built.
    """
    b, d, h, w, co = g5.shape
    ci, k = kern.shape[1], kern.shape[2]
    p = padding
    g2 = g5.reshape(b, d * h * w, co)
    dbias = g2.sum(axis=(0, 1)) if has_bias else None

    dkern = None
    if need_dk:
        cols, _ = _im2col(_pad_cl(x5, p), k, stride)
        n_pos = cols.shape[1]
        dkmat = cols.reshape(b * n_pos, -1).T @ g2.reshape(b * n_pos, co)
        dkern = np.ascontiguousarray(
            dkmat.reshape(k, k, k, ci, co).transpose(4, 3, 0, 1, 2))

    dx = None
    if need_dx:
        dp_, hp_, wp_ = (x5.shape[1] + 2 * p, x5.shape[2] + 2 * p,
                         x5.shape[3] + 2 * p)
        dxp = np.zeros((b, dp_, hp_, wp_, ci), dtype=g5.dtype)
        # 2-d GEMMs against contiguous (C_out, C_in) slices stay on BLAS;
        # strided operands would drop matmul onto its slow generic path.
        kt = np.ascontiguousarray(kern.transpose(2, 3, 4, 0, 1))
        g2f = g2.reshape(b * d * h * w, co)
        prod = np.empty((b * d * h * w, ci), dtype=g5.dtype)
        p5 = prod.reshape(b, d, h, w, ci)
        for a in range(k):
            sa = slice(a, a + (d - 1) * stride + 1, stride)
            for bb in range(k):
                sb = slice(bb, bb + (h - 1) * stride + 1, stride)
                for cc in range(k):
                    sc = slice(cc, cc + (w - 1) * stride + 1, stride)
                    np.matmul(g2f, kt[a, bb, cc], out=prod)
                    dxp[:, sa, sb, sc, :] += p5
        dx = dxp[:, p:dp_ - p, p:hp_ - p, p:wp_ - p, :] if p else dxp
    return dx, dkern, dbias


def _to_cl(x5: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(x5, 1, 4))


def _from_cl(y5: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(y5, 4, 1))


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0,
           channels_last: bool = False) -> Tensor:
    """Cross-correlation with a cubic kernel (C_out, C_in, k, k, k).

    Accepts (C, D, H, W) or batched (B, C, D, H, W) input; with
    ``channels_last`` the channel axis moves to the end instead, which skips
    the internal layout conversions (the compute core is channels-last).
    """
    ins = [x, kernel] + ([bias] if bias is not None else [])
    tape = _tape_of(*ins)
    kv = kernel.values
    if kv.ndim != 5 or not (kv.shape[2] == kv.shape[3] == kv.shape[4]):
        raise ValueError(f"kernel must be (C_out, C_in, k, k, k), got {kv.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"bad stride/padding ({stride}, {padding})")
    xv = x.values
    squeeze = xv.ndim == 4
    x5 = xv[None] if squeeze else xv
    ch_ax = 4 if channels_last else 1
    if x5.ndim != 5 or x5.shape[ch_ax] != kv.shape[1]:
        raise ValueError(f"conv3d: input {xv.shape} does not match kernel {kv.shape}")
    k = kv.shape[2]
    spatial = x5.shape[1:4] if channels_last else x5.shape[2:]
    if min(spatial) + 2 * padding < k:
        raise ValueError(f"conv3d: window {k} exceeds padded input {spatial}")
    bv = bias.values if bias is not None else None
    if bv is not None and bv.shape != (kv.shape[0],):
        raise ValueError(f"conv3d: bias shape {bv.shape} vs kernel {kv.shape}")
    xcl = x5 if channels_last else _to_cl(x5)
    ycl = _conv3d_fwd(xcl, kv, bv, stride, padding)
    y = ycl if channels_last else _from_cl(ycl)
    out = _out(tape, y[0] if squeeze else y, *ins)
    if out.requires_grad:
        need_dx, need_dk = x.requires_grad, kernel.requires_grad
        def bwd():
            if out.grad is None:
                return
            g5 = out.grad[None] if squeeze else out.grad
            gcl = g5 if channels_last else _to_cl(g5)
            dx, dk, db = _conv3d_bwd(xcl, kv, bias is not None, stride, padding,
                                     gcl, need_dx, need_dk)
            if dx is not None:
                dx = dx if channels_last else _from_cl(dx)
                _acc(x, dx[0] if squeeze else dx)
            if dk is not None:
                _acc(kernel, dk)
            if bias is not None:
                _acc(bias, db)
        tape.record(bwd)
    return out


def _instnorm_fwd(x: np.ndarray, eps: float, ax: tuple):
    mu = x.mean(axis=ax, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat, inv


def instance_norm(x: Tensor, eps: float = 1e-5,
                  channels_last: bool = False) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes (no affine).

    Channels sit on axis 1 of the batched input, or on the last axis with
    ``channels_last``.
    """
    tape = _tape_of(x)
    xv = x.values
    squeeze = xv.ndim == 4
    x5 = xv[None] if squeeze else xv
    if x5.ndim != 5:
        raise ValueError(f"instance_norm expects 4-d or 5-d input, got {xv.shape}")
    ax = (1, 2, 3) if channels_last else (2, 3, 4)
    xhat, inv = _instnorm_fwd(x5, eps, ax)
    out = _out(tape, xhat[0] if squeeze else xhat, x)
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            g = out.grad[None] if squeeze else out.grad
            gm = g.mean(axis=ax, keepdims=True)
            gx = (g * xhat).mean(axis=ax, keepdims=True)
            dx = inv * (g - gm - xhat * gx)
            _acc(x, dx[0] if squeeze else dx)
        tape.record(bwd)
    return out


def l2_normalize(x: Tensor) -> Tensor:
    """Scale rows (or a single vector) to unit Euclidean norm."""
    tape = _tape_of(x)
    xv = x.values
    squeeze = xv.ndim == 1
    x2 = xv[None, :] if squeeze else xv
    if x2.ndim != 2:
        raise ValueError(f"l2_normalize expects 1-d or 2-d input, got {xv.shape}")
    norms = np.linalg.norm(x2.astype(np.float64), axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("l2_normalize: vector with near-zero norm")
    norms = norms.astype(x2.dtype)
    y = x2 / norms[:, None]
    out = _out(tape, y[0] if squeeze else y, x)
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            g = out.grad[None, :] if squeeze else out.grad
            dot = (g * y).sum(axis=1, keepdims=True)
            dx = (g - y * dot) / norms[:, None]
            _acc(x, dx[0] if squeeze else dx)
        tape.record(bwd)
    return out


def softmax_neg_distance(query: Tensor, keys: Tensor) -> Tensor:
    """Softmax over -||query - key_j||_2 across the key rows.

    Equidistant keys share weight equally; the max is subtracted before
    exponentiation for stability.
    """
    tape = _tape_of(query, keys)
    qv, kv = query.values, keys.values
    if qv.ndim != 1 or kv.ndim != 2 or kv.shape[1] != qv.shape[0]:
        raise ValueError(f"softmax_neg_distance: shapes {qv.shape} and {kv.shape}")
    diff = qv[None, :] - kv
    dist = np.sqrt((diff * diff).sum(axis=1))
    z = -dist
    e = np.exp(z - z.max())
    a = e / e.sum()
    out = _out(tape, a, query, keys)
    if out.requires_grad:
        def bwd():
            if out.grad is None:
                return
            ga = out.grad
            dz = a * (ga - (ga * a).sum())
            ddist = -dz
            safe = np.where(dist > 1e-12, dist, 1.0)
            u = np.where(dist[:, None] > 1e-12, diff / safe[:, None], 0.0)
            _acc(query, (ddist[:, None] * u).sum(axis=0))
            _acc(keys, -ddist[:, None] * u)
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]


def adam_init(params: Sequence[Tensor]) -> AdamState:
    return AdamState(
        step=0,
        m=[np.zeros_like(p.values) for p in params],
        v=[np.zeros_like(p.values) for p in params],
    )


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected update, in place on every param's values."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads, and state are not aligned")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=p.values.dtype)
        if g.shape != p.values.shape:
            raise ValueError(f"grad {i} shape {g.shape} vs param {p.values.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.values -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.values.dtype)


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(fn, inputs: Sequence[np.ndarray], step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `fn(tape, *tensors)` must build and return a scalar Tensor. Runs in
    float64. Relative error per coordinate is |a - n| / max(1e-8, |a| + |n|).
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    tape = Tape(dtype=np.float64)
    leaves = [tape.leaf(x, requires_grad=True) for x in inputs]
    loss = fn(tape, *leaves)
    tape.backward(loss)
    analytic = [
        np.zeros_like(x) if lf.grad is None else lf.grad.copy()
        for x, lf in zip(inputs, leaves)
    ]

    def value_at(xs) -> float:
        t = Tape(dtype=np.float64)
        ls = [t.leaf(x) for x in xs]
        return fn(t, *ls).values.item()

    worst = 0.0
    for idx in range(len(inputs)):
        flat = inputs[idx].reshape(-1)
        aflat = analytic[idx].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = value_at(inputs)
            flat[j] = orig - step
            fm = value_at(inputs)
            flat[j] = orig
            num = (fp - fm) / (2.0 * step)
            err = abs(aflat[j] - num) / max(1e-8, abs(aflat[j]) + abs(num))
            worst = max(worst, err)
    return worst
