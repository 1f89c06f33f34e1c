"""Slow, obviously-correct reference implementations used by the tests."""
import itertools

import numpy as np


def conv_naive(x, w, b=None, stride=1, pad=0):
    """Direct loop cross-correlation for 2D or 3D inputs, float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    nd = x.ndim - 2
    xp = np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * nd)
    k = w.shape[2:]
    out_sp = tuple((s + 2 * pad - kk) // stride + 1 for s, kk in zip(x.shape[2:], k))
    out = np.zeros((x.shape[0], w.shape[0]) + out_sp)
    for pos in itertools.product(*(range(o) for o in out_sp)):
        sl = tuple(slice(p * stride, p * stride + kk) for p, kk in zip(pos, k))
        patch = xp[(slice(None), slice(None)) + sl]  # N, C, *k
        axes = list(range(1, 2 + nd))
        out[(slice(None), slice(None)) + pos] = np.tensordot(patch, w, axes=(axes, axes))
    if b is not None:
        out += np.asarray(b, dtype=np.float64).reshape((1, -1) + (1,) * nd)
    return out


def conv_transpose_naive(x, w, b=None, stride=2):
    """Scatter every input voxel times the kernel into the output, float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, d, h, ww = x.shape
    k = w.shape[2]
    out = np.zeros((n, w.shape[1], (d - 1) * stride + k, (h - 1) * stride + k, (ww - 1) * stride + k))
    for bi, ci, z, y, xx in itertools.product(range(n), range(c), range(d), range(h), range(ww)):
        out[bi, :, z * stride:z * stride + k, y * stride:y * stride + k, xx * stride:xx * stride + k] += (
            x[bi, ci, z, y, xx] * w[ci])
    if b is not None:
        out += np.asarray(b, dtype=np.float64).reshape(1, -1, 1, 1, 1)
    return out


def maxpool_naive(x, k):
    x = np.asarray(x)
    nd = x.ndim - 2
    out_sp = tuple(s // k for s in x.shape[2:])
    out = np.zeros(x.shape[:2] + out_sp, dtype=x.dtype)
    for pos in itertools.product(*(range(o) for o in out_sp)):
        sl = tuple(slice(p * k, p * k + k) for p in pos)
        win = x[(slice(None), slice(None)) + sl].reshape(x.shape[:2] + (-1,))
        out[(slice(None), slice(None)) + pos] = win.max(axis=-1)
    return out


def box_iou_pixels(a, b, scale=4):
    """IoU of integer-cornered boxes by enumerating sub-pixel cells on a grid."""
    lo = int(np.floor(min(a[0], a[1], b[0], b[1])))
    hi = int(np.ceil(max(a[2], a[3], b[2], b[3])))
    ticks = (np.arange(lo * scale, hi * scale) + 0.5) / scale
    xx, yy = np.meshgrid(ticks, ticks)

    def inside(bx):
        return (xx >= bx[0]) & (xx < bx[2]) & (yy >= bx[1]) & (yy < bx[3])

    ia, ib = inside(a), inside(b)
    union = np.count_nonzero(ia | ib)
    return 0.0 if union == 0 else np.count_nonzero(ia & ib) / union


def iou_scalar(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def assign_labels_bruteforce(anchors, gts, pos_iou, neg_iou):
    """Per-anchor loops over the labelling rules; returns an int8 label array."""
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int8)
    if len(gts) == 0:
        return labels
    ov = [[iou_scalar(a, g) for g in gts] for a in anchors]
    for i in range(n):
        best = max(ov[i])
        if best > pos_iou:
            labels[i] = 1
        elif best >= neg_iou:
            labels[i] = -1
        else:
            labels[i] = 0
    for j in range(len(gts)):
        best_i, best_v = None, 0.0
        for i in range(n):
            if ov[i][j] > best_v:
                best_i, best_v = i, ov[i][j]
        if best_i is not None:
            labels[best_i] = 1
    return labels


def nms_bruteforce(boxes, scores, thresh):
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(iou_scalar(boxes[i], boxes[j]) <= thresh for j in keep):
            keep.append(i)
    return keep
