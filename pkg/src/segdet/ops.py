"""Differentiable network layers: convolution, pooling, activations, losses.

Convolutions are evaluated on the flattened padded grid. Every kernel tap is
a fixed offset into the flat input, so one matrix product against the
stacked taps followed by a shifted sum gives the output for all positions at
once; invalid positions (those wrapping past a row end) are cropped away.
"""
from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from . import kernels
from .errors import DimensionError, InputError
from .tensor import Tensor, make_node

IntOrSeq = Union[int, Sequence[int]]


def _tuple(v: IntOrSeq, n: int, what: str) -> tuple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    v = tuple(int(i) for i in v)
    if len(v) != n:
        raise DimensionError(f"{what} needs {n} values, got {len(v)}")
    return v


# Above this many padded voxels one matmul per tap beats the stacked-tap matmul
# plus shift kernel: the stacked intermediate no longer fits in cache.
PER_TAP_MIN_SIZE = 8192


# Gradient entries below this are zeroed before the backward matmuls. A
# confident network produces gradients near the float32 underflow limit, and
# BLAS runs several times slower on subnormal operands and results. Entries
# this small move no parameter: Adam's eps alone is 1e-8.
GRAD_FLUSH_BELOW = 1e-30


def _flush_tiny(a: np.ndarray) -> np.ndarray:
    a[np.abs(a) < GRAD_FLUSH_BELOW] = 0
    return a


def _tap_offsets(kernel: tuple, padded: tuple) -> np.ndarray:
    grid = np.indices(kernel).reshape(len(kernel), -1)
    return np.ravel_multi_index(tuple(grid), padded).astype(np.int64)


def conv(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: IntOrSeq = 1,
    padding: IntOrSeq = 0,
    dims: Optional[int] = None,
) -> Tensor:
    """Cross-correlation of ``x[N, C, *S]`` with ``weight[F, C, *k]``.

    Output extent per axis is ``(S + 2*pad - k) // stride + 1``.
    """
    nd = x.ndim - 2
    if dims is not None and dims != nd:
        raise DimensionError(f"dims={dims} but input has rank {x.ndim}")
    if nd not in (2, 3):
        raise DimensionError(f"conv supports 2D or 3D inputs, got rank {x.ndim}")
    if weight.ndim != x.ndim:
        raise DimensionError(f"weight rank {weight.ndim} does not match input rank {x.ndim}")
    n, c = x.shape[:2]
    f, wc = weight.shape[:2]
    if wc != c:
        raise DimensionError(f"input has {c} channels but weight expects {wc}")
    ksize = tuple(weight.shape[2:])
    stride = _tuple(stride, nd, "stride")
    pad = _tuple(padding, nd, "padding")
    padded = tuple(s + 2 * p for s, p in zip(x.shape[2:], pad))
    if any(p < k for p, k in zip(padded, ksize)):
        raise DimensionError(f"kernel {ksize} larger than padded input {padded}")
    full = tuple(p - k + 1 for p, k in zip(padded, ksize))
    out_sp = tuple((e - 1) // s + 1 for e, s in zip(full, stride))
    crop = tuple(slice(0, e, s) for e, s in zip(full, stride))

    taps = int(np.prod(ksize))
    size = int(np.prod(padded))
    offsets = _tap_offsets(ksize, padded)
    length = size - int(offsets[-1])
    dt = x.dtype

    xp = np.pad(x.data, ((0, 0), (0, 0)) + tuple((p, p) for p in pad))
    xflat = xp.reshape(n, c, size)
    # stacked taps: row block i holds weight[:, :, tap i]
    wst = np.ascontiguousarray(weight.data.reshape(f, c, taps).transpose(2, 0, 1)).reshape(taps * f, c)

    per_tap = size >= PER_TAP_MIN_SIZE
    wtap = wst.reshape(taps, f, c)

    out = np.empty((n, f) + out_sp, dtype=dt)
    for b in range(n):
        yfull = np.zeros((f, size), dtype=dt)
        if per_tap:
            y = yfull[:, :length]
            for i, o in enumerate(offsets):
                y += wtap[i] @ xflat[b][:, o:o + length]
        else:
            z = (wst @ xflat[b]).reshape(taps, f, size)
            yfull[:, :length] = kernels.shift_accumulate(z, offsets, length)
        out[b] = yfull.reshape((f,) + padded)[(slice(None),) + crop]
    if bias is not None:
        out += bias.data.reshape((1, f) + (1,) * nd)

    parents = (x, weight) if bias is None else (x, weight, bias)
    in_sp = x.shape[2:]

    def bw(g):
        gx = np.empty(x.shape, dtype=dt) if x.requires_grad else None
        gw = np.zeros((taps, f, c), dtype=dt) if weight.requires_grad else None
        wstT = np.ascontiguousarray(
            weight.data.reshape(f, c, taps).transpose(2, 1, 0)
        ).reshape(taps * c, f)
        for b in range(n):
            gfull = np.zeros((f,) + padded, dtype=dt)
            gfull[(slice(None),) + crop] = g[b]
            _flush_tiny(gfull)
            gl = gfull.reshape(f, size)[:, :length]
            if gx is not None:
                if per_tap:
                    gxp = np.zeros((c, size), dtype=dt)
                    wT = wstT.reshape(taps, c, f)
                    for i, o in enumerate(offsets):
                        gxp[:, o:o + length] += wT[i] @ gl
                    gxp = gxp.reshape((c,) + padded)
                else:
                    zt = (wstT @ gl).reshape(taps, c, length)
                    gxp = kernels.shift_scatter(zt, offsets, size).reshape((c,) + padded)
                gx[b] = gxp[(slice(None),) + tuple(slice(p, p + s) for p, s in zip(pad, in_sp))]
            if gw is not None:
                xb = xflat[b]
                for i, o in enumerate(offsets):
                    gw[i] += (xb[:, o:o + length] @ gl.T).T
        grads = [gx, None if gw is None else np.ascontiguousarray(gw.transpose(1, 2, 0)).reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0,) + tuple(range(2, 2 + nd)), dtype=np.float64).astype(dt))
        return grads

    return make_node(out, parents, bw)


def conv_transpose(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: IntOrSeq = 2) -> Tensor:
    """Up-convolution of ``x[N, C, D, H, W]`` with ``weight[C, F, k, k, k]``, stride == kernel.

    Each input voxel scatters a ``k^3`` block, so every spatial extent grows
    by the stride factor.
    """
    if x.ndim != 5:
        raise DimensionError(f"transposed conv expects a 5D input, got rank {x.ndim}")
    if weight.ndim != 5 or weight.shape[0] != x.shape[1]:
        raise DimensionError(f"weight {weight.shape} incompatible with input {x.shape}")
    ksize = tuple(weight.shape[2:])
    stride = _tuple(stride, 3, "stride")
    if stride != ksize:
        raise DimensionError(f"only stride == kernel is supported, got stride {stride}, kernel {ksize}")
    n, c, d, h, w = x.shape
    f = weight.shape[1]
    ka, kb, kc = ksize
    taps = ka * kb * kc
    vox = d * h * w
    dt = x.dtype
    wm = weight.data.reshape(c, f * taps)
    out = np.empty((n, f, d * ka, h * kb, w * kc), dtype=dt)
    xm = x.data.reshape(n, c, vox)
    for b in range(n):
        z = (wm.T @ xm[b]).reshape(f, ka, kb, kc, d, h, w)
        out[b] = z.transpose(0, 4, 1, 5, 2, 6, 3).reshape(f, d * ka, h * kb, w * kc)
    if bias is not None:
        out += bias.data.reshape(1, f, 1, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = np.empty(x.shape, dtype=dt) if x.requires_grad else None
        gw = np.zeros((c, f * taps), dtype=dt) if weight.requires_grad else None
        for b in range(n):
            gz = g[b].reshape(f, d, ka, h, kb, w, kc).transpose(0, 2, 4, 6, 1, 3, 5).reshape(f * taps, vox)
            gz = _flush_tiny(np.ascontiguousarray(gz))
            if gx is not None:
                gx[b] = (wm @ gz).reshape(c, d, h, w)
            if gw is not None:
                gw += xm[b] @ gz.T
        grads = [gx, None if gw is None else gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(dt))
        return grads

    return make_node(out, parents, bw)


def maxpool(x: Tensor, window: IntOrSeq = 2, stride: Optional[IntOrSeq] = None, dims: Optional[int] = None) -> Tensor:
    """Non-overlapping max pooling; ties go to the first element in scan order."""
    nd = x.ndim - 2
    if dims is not None and dims != nd:
        raise DimensionError(f"dims={dims} but input has rank {x.ndim}")
    if nd not in (2, 3):
        raise DimensionError(f"maxpool supports 2D or 3D inputs, got rank {x.ndim}")
    window = _tuple(window, nd, "window")
    stride = window if stride is None else _tuple(stride, nd, "stride")
    if stride != window:
        raise DimensionError("maxpool only supports stride equal to the window")
    sp = x.shape[2:]
    for axis, s, k in zip(("D", "H", "W")[3 - nd:], sp, window):
        if s % k:
            raise DimensionError(f"spatial axis {axis} of extent {s} not divisible by pool window {k}")
    win3 = (1,) * (3 - nd) + window
    vol = x.data.reshape((-1,) + (1,) * (3 - nd) + sp)
    y, idx = kernels.maxpool_forward(np.ascontiguousarray(vol), win3)
    out_sp = tuple(s // k for s, k in zip(sp, window))
    out = y.reshape(x.shape[:2] + out_sp)

    def bw(g):
        gv = g.reshape(y.shape)
        return (kernels.maxpool_backward(np.ascontiguousarray(gv), idx, win3).reshape(x.shape),)

    return make_node(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def log_softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels, ignore_label: Optional[int] = None) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over non-ignored positions.

    ``logits`` is ``[N, L, *spatial]``; ``labels`` is an integer array of
    shape ``[N, *spatial]``.
    """
    labels = np.asarray(labels)
    nlab = logits.shape[1]
    if labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = np.ones(labels.shape, dtype=bool) if ignore_label is None else labels != ignore_label
    lv = labels[valid]
    if lv.size and (lv.min() < 0 or lv.max() >= nlab):
        raise InputError(f"labels must lie in [0, {nlab})")
    count = int(valid.sum())
    dt = logits.dtype
    safe = np.where(valid, labels, 0).astype(np.int64)

    lp = log_softmax(logits.data, axis=1)
    picked = np.take_along_axis(lp, safe[:, None], axis=1)[:, 0]
    if count:
        loss = -picked[valid].sum(dtype=np.float64) / count
    else:
        loss = 0.0

    def bw(g):
        if not count:
            return (np.zeros_like(logits.data),)
        grad = np.exp(lp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad -= onehot
        grad *= np.expand_dims(valid, 1)
        grad *= g / count
        return (_flush_tiny(grad.astype(dt)),)

    return make_node(np.asarray(loss, dtype=dt), (logits,), bw)


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Sum of the piecewise loss: ``0.5 d^2`` for ``|d| < 1``, else ``|d| - 0.5``."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if tgt.shape != pred.shape:
        raise DimensionError(f"smooth_l1 shapes differ: {pred.shape} vs {tgt.shape}")
    d = pred.data - tgt
    ad = np.abs(d)
    small = ad < 1.0
    val = np.where(small, 0.5 * d * d, ad - 0.5).sum(dtype=np.float64)
    deriv = np.where(small, d, np.sign(d)).astype(pred.dtype)
    parents = (pred, target) if isinstance(target, Tensor) else (pred,)

    def bw(g):
        gp = deriv * g
        return (gp, -gp) if len(parents) == 2 else (gp,)

    return make_node(np.asarray(val, dtype=pred.dtype), parents, bw)
