"""Pure numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable, and as the
reference the compiled versions are benchmarked and tested against.
"""
import numpy as np


def shift_accumulate(z, offsets, length):
    """Sum shifted windows: ``y[f, n] = sum_i z[i, f, offsets[i] + n]``."""
    k, f, _ = z.shape
    y = np.zeros((f, length), dtype=z.dtype)
    for i in range(k):
        o = int(offsets[i])
        y += z[i, :, o:o + length]
    return y


def shift_scatter(z, offsets, size):
    """Adjoint of :func:`shift_accumulate`: ``x[c, offsets[i] + n] += z[i, c, n]``."""
    k, c, length = z.shape
    x = np.zeros((c, size), dtype=z.dtype)
    for i in range(k):
        o = int(offsets[i])
        x[:, o:o + length] += z[i]
    return x


def _windows(x, window):
    m, d, h, w = x.shape
    wd, wh, ww = window
    v = x.reshape(m, d // wd, wd, h // wh, wh, w // ww, ww)
    v = v.transpose(0, 1, 3, 5, 2, 4, 6)
    return v.reshape(m, d // wd, h // wh, w // ww, wd * wh * ww)


def maxpool_forward(x, window):
    """Non-overlapping max pool over the last three axes of ``x`` (M, D, H, W).

    Returns the pooled array and the in-window argmax (scan order, first
    maximum wins).
    """
    v = _windows(x, window)
    idx = np.argmax(v, axis=-1)
    y = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx.astype(np.int64)


def maxpool_backward(gy, idx, window):
    """Route pooled gradients back to the recorded argmax positions."""
    m, od, oh, ow = gy.shape
    wd, wh, ww = window
    k = wd * wh * ww
    g = np.zeros((m, od, oh, ow, k), dtype=gy.dtype)
    np.put_along_axis(g, idx[..., None], gy[..., None], axis=-1)
    g = g.reshape(m, od, oh, ow, wd, wh, ww).transpose(0, 1, 4, 2, 5, 3, 6)
    return np.ascontiguousarray(g.reshape(m, od * wd, oh * wh, ow * ww))


def nms_sorted(boxes, order, thresh):
    """Greedy suppression over ``boxes`` visited in ``order``.

    A box is dropped when its IoU with an already kept box exceeds ``thresh``.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        iw = np.clip(np.minimum(x2[i], x2) - np.maximum(x1[i], x1), 0.0, None)
        ih = np.clip(np.minimum(y2[i], y2) - np.maximum(y1[i], y1), 0.0, None)
        inter = iw * ih
        union = areas[i] + areas - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            ov = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        suppressed |= ov > thresh
    return np.asarray(keep, dtype=np.int64)
