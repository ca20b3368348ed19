"""Numba-compiled kernels, mirroring `_kernels_np` function for function.

All loops accumulate left to right so results are reproducible run to run.
fastmath stays off: it would license reassociation and change sums.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def softmax_rows(x):
    m, n = x.shape
    y = np.empty((m, n))
    for i in range(m):
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(n):
            e = np.exp(x[i, j] - mx)
            y[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(n):
            y[i, j] *= inv
    return y


@njit(cache=True)
def softmax_rows_grad(y, g):
    m, n = y.shape
    dx = np.empty((m, n))
    for i in range(m):
        dot = 0.0
        for j in range(n):
            dot += g[i, j] * y[i, j]
        for j in range(n):
            dx[i, j] = y[i, j] * (g[i, j] - dot)
    return dx


@njit(cache=True)
def logsumexp_rows(x):
    m, n = x.shape
    out = np.empty(m)
    for i in range(m):
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(n):
            s += np.exp(x[i, j] - mx)
        out[i] = mx + np.log(s)
    return out


@njit(cache=True)
def logsumexp_rows_grad(x, lse, g):
    m, n = x.shape
    dx = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            dx[i, j] = np.exp(x[i, j] - lse[i]) * g[i]
    return dx


@njit(cache=True)
def layernorm_rows(x, gain, bias, eps):
    m, n = x.shape
    y = np.empty((m, n))
    xhat = np.empty((m, n))
    inv_std = np.empty(m)
    for i in range(m):
        mu = 0.0
        for j in range(n):
            mu += x[i, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mu
            var += d * d
        var /= n
        istd = 1.0 / np.sqrt(var + eps)
        inv_std[i] = istd
        for j in range(n):
            h = (x[i, j] - mu) * istd
            xhat[i, j] = h
            y[i, j] = h * gain[j] + bias[j]
    return y, xhat, inv_std


@njit(cache=True)
def layernorm_rows_grad(xhat, inv_std, gain, g):
    m, n = xhat.shape
    dx = np.empty((m, n))
    dgain = np.zeros(n)
    dbias = np.zeros(n)
    for i in range(m):
        mean_gh = 0.0
        mean_ghx = 0.0
        for j in range(n):
            gh = g[i, j] * gain[j]
            mean_gh += gh
            mean_ghx += gh * xhat[i, j]
        mean_gh /= n
        mean_ghx /= n
        for j in range(n):
            gh = g[i, j] * gain[j]
            dx[i, j] = inv_std[i] * (gh - mean_gh - xhat[i, j] * mean_ghx)
            dgain[j] += g[i, j] * xhat[i, j]
            dbias[j] += g[i, j]
    return dx, dgain, dbias


@njit(cache=True)
def unit_rows(x, eps):
    m, n = x.shape
    y = np.empty((m, n))
    norms = np.empty(m)
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += x[i, j] * x[i, j]
        nrm = np.sqrt(s)
        if nrm < eps:
            nrm = eps
        norms[i] = nrm
        inv = 1.0 / nrm
        for j in range(n):
            y[i, j] = x[i, j] * inv
    return y, norms


@njit(cache=True)
def unit_rows_grad(y, norms, g):
    m, n = y.shape
    dx = np.empty((m, n))
    for i in range(m):
        dot = 0.0
        for j in range(n):
            dot += g[i, j] * y[i, j]
        inv = 1.0 / norms[i]
        for j in range(n):
            dx[i, j] = (g[i, j] - y[i, j] * dot) * inv
    return dx


@njit(cache=True)
def adamw_update(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    for i in range(p.shape[0]):
        p[i] -= lr * weight_decay * p[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        p[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)


@njit(cache=True)
def paint_rects(depth, albedo, rects):
    for k in range(rects.shape[0]):
        y0 = int(rects[k, 0])
        y1 = int(rects[k, 1])
        x0 = int(rects[k, 2])
        x1 = int(rects[k, 3])
        for y in range(y0, y1):
            for x in range(x0, x1):
                depth[y, x] = rects[k, 4]
                albedo[y, x, 0] = rects[k, 5]
                albedo[y, x, 1] = rects[k, 6]
                albedo[y, x, 2] = rects[k, 7]


@njit(cache=True)
def streak_field(h, w, ys, xs, length, amp):
    field = np.zeros((h, w))
    for s in range(ys.shape[0]):
        for t in range(length):
            y = ys[s] + t
            x = xs[s] + t
            if 0 <= y < h and 0 <= x < w:
                field[y, x] += amp
    return field


@njit(cache=True)
def metrics_accum(pred, gt, cap):
    out = np.zeros(5)
    for i in range(pred.shape[0]):
        t = gt[i]
        if t <= 0.0 or t > cap:
            continue
        p = pred[i]
        diff = p - t
        ratio = p / t
        if t / p > ratio:
            ratio = t / p
        out[0] += 1.0
        out[1] += abs(diff) / t
        out[2] += diff * diff / t
        out[3] += diff * diff
        if ratio < 1.25:
            out[4] += 1.0
    return out
