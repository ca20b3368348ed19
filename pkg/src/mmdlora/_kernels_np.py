"""Pure-numpy reference implementations of the hot numeric kernels.

These are the fallback backend; `_kernels_nb` mirrors every function with a
numba-compiled version. Both operate on float64 arrays and are deterministic.
"""

import numpy as np


def softmax_rows(x):
    """Row-wise softmax with max subtraction. x: (m, n) -> (m, n)."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_grad(y, g):
    """Backward of row softmax given its output y and upstream g."""
    dot = (g * y).sum(axis=1, keepdims=True)
    return y * (g - dot)


def logsumexp_rows(x):
    """Row-wise log-sum-exp, max-stabilized. x: (m, n) -> (m,)."""
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


def logsumexp_rows_grad(x, lse, g):
    """Backward of row log-sum-exp: softmax(x) scaled by upstream g (m,)."""
    return np.exp(x - lse[:, None]) * g[:, None]


def layernorm_rows(x, gain, bias, eps):
    """Per-row layer norm. Returns (y, xhat, inv_std) with xhat cached for backward."""
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat * gain + bias, xhat, inv_std[:, 0]


def layernorm_rows_grad(xhat, inv_std, gain, g):
    """Backward of layer norm. Returns (dx, dgain, dbias)."""
    n = xhat.shape[1]
    gh = g * gain
    dx = inv_std[:, None] * (
        gh
        - gh.mean(axis=1, keepdims=True)
        - xhat * (gh * xhat).mean(axis=1, keepdims=True)
    )
    dgain = (g * xhat).sum(axis=0)
    dbias = g.sum(axis=0)
    return dx, dgain, dbias


def unit_rows(x, eps):
    """L2-normalize each row; norms below eps are clamped. Returns (y, norms)."""
    norms = np.sqrt((x * x).sum(axis=1))
    safe = np.maximum(norms, eps)
    return x / safe[:, None], safe


def unit_rows_grad(y, norms, g):
    """Backward of row normalization given output y and clamped norms."""
    dot = (g * y).sum(axis=1, keepdims=True)
    return (g - y * dot) / norms[:, None]


def adamw_update(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    """One decoupled-weight-decay Adam step, in place on flat views p, m, v."""
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    p -= lr * weight_decay * p
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def paint_rects(depth, albedo, rects):
    """Paint axis-aligned rectangles into depth (h, w) and albedo (h, w, 3).

    rects rows are (y0, y1, x0, x1, z, r, g, b), pre-sorted far to near so
    later rows occlude earlier ones.
    """
    for k in range(rects.shape[0]):
        y0, y1 = int(rects[k, 0]), int(rects[k, 1])
        x0, x1 = int(rects[k, 2]), int(rects[k, 3])
        depth[y0:y1, x0:x1] = rects[k, 4]
        albedo[y0:y1, x0:x1, 0] = rects[k, 5]
        albedo[y0:y1, x0:x1, 1] = rects[k, 6]
        albedo[y0:y1, x0:x1, 2] = rects[k, 7]


def streak_field(h, w, ys, xs, length, amp):
    """Additive diagonal streak field: each streak walks down-right from (y, x)."""
    field = np.zeros((h, w))
    for s in range(ys.shape[0]):
        for t in range(length):
            y = ys[s] + t
            x = xs[s] + t
            if 0 <= y < h and 0 <= x < w:
                field[y, x] += amp
    return field


def metrics_accum(pred, gt, cap):
    """Masked per-pixel error sums over flat pred/gt.

    Returns [count, sum_absrel, sum_sqrel, sum_sq, d1_count] for pixels with
    0 < gt <= cap; the delta threshold is strict (< 1.25).
    """
    mask = (gt > 0.0) & (gt <= cap)
    p = pred[mask]
    t = gt[mask]
    diff = p - t
    ratio = np.maximum(p / t, t / p)
    out = np.empty(5)
    out[0] = float(p.size)
    out[1] = np.abs(diff / t).sum()
    out[2] = (diff * diff / t).sum()
    out[3] = (diff * diff).sum()
    out[4] = float((ratio < 1.25).sum())
    return out
