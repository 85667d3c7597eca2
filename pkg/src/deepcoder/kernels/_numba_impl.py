"""Numba-compiled kernels.  Same contracts as _numpy_impl.

Loops are deliberately serial (no prange) so results are bitwise
reproducible regardless of thread count.  fastmath stays off for the
same reason.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def conv2d_forward(x, w, stride, padding):
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    y = np.zeros((n, f, ho, wo))
    for ni in range(n):
        for fi in range(f):
            for oi in range(ho):
                for oj in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(k):
                            ii = oi * stride + ki - padding
                            if ii < 0 or ii >= h:
                                continue
                            for kj in range(k):
                                jj = oj * stride + kj - padding
                                if jj < 0 or jj >= wd:
                                    continue
                                acc += x[ni, ci, ii, jj] * w[fi, ci, ki, kj]
                    y[ni, fi, oi, oj] = acc
    return y


@njit(cache=True)
def conv2d_backward_input(g, w, stride, padding, h, wd):
    n, f, ho, wo = g.shape
    _, c, k, _ = w.shape
    dx = np.zeros((n, c, h, wd))
    for ni in range(n):
        for fi in range(f):
            for oi in range(ho):
                for oj in range(wo):
                    gv = g[ni, fi, oi, oj]
                    for ci in range(c):
                        for ki in range(k):
                            ii = oi * stride + ki - padding
                            if ii < 0 or ii >= h:
                                continue
                            for kj in range(k):
                                jj = oj * stride + kj - padding
                                if jj < 0 or jj >= wd:
                                    continue
                                dx[ni, ci, ii, jj] += gv * w[fi, ci, ki, kj]
    return dx


@njit(cache=True)
def conv2d_backward_kernels(g, x, stride, padding, k):
    n, f, ho, wo = g.shape
    _, c, h, wd = x.shape
    dw = np.zeros((f, c, k, k))
    for ni in range(n):
        for fi in range(f):
            for oi in range(ho):
                for oj in range(wo):
                    gv = g[ni, fi, oi, oj]
                    for ci in range(c):
                        for ki in range(k):
                            ii = oi * stride + ki - padding
                            if ii < 0 or ii >= h:
                                continue
                            for kj in range(k):
                                jj = oj * stride + kj - padding
                                if jj < 0 or jj >= wd:
                                    continue
                                dw[fi, ci, ki, kj] += gv * x[ni, ci, ii, jj]
    return dw


@njit(cache=True)
def maxpool_forward(x, window):
    n, c, h, wd = x.shape
    ho = h // window
    wo = wd // window
    y = np.empty((n, c, ho, wo))
    idx = np.empty((n, c, ho, wo), dtype=np.int64)
    for ni in range(n):
        for ci in range(c):
            for oi in range(ho):
                for oj in range(wo):
                    best = -np.inf
                    besti = 0
                    for ki in range(window):
                        for kj in range(window):
                            v = x[ni, ci, oi * window + ki, oj * window + kj]
                            if v > best:
                                best = v
                                besti = ki * window + kj
                    y[ni, ci, oi, oj] = best
                    idx[ni, ci, oi, oj] = besti
    return y, idx


@njit(cache=True)
def maxpool_backward(g, idx, window, h, wd):
    n, c, ho, wo = g.shape
    dx = np.zeros((n, c, h, wd))
    for ni in range(n):
        for ci in range(c):
            for oi in range(ho):
                for oj in range(wo):
                    p = idx[ni, ci, oi, oj]
                    ki = p // window
                    kj = p % window
                    dx[ni, ci, oi * window + ki, oj * window + kj] += g[ni, ci, oi, oj]
    return dx


@njit(cache=True)
def rbf_forward(a, b, sf2, ls):
    n, d = a.shape
    m = b.shape[0]
    kmat = np.empty((n, m))
    inv_ls2 = 1.0 / (ls * ls)
    for i in range(n):
        for j in range(m):
            q = 0.0
            for dd in range(d):
                diff = a[i, dd] - b[j, dd]
                q += diff * diff * inv_ls2[dd]
            kmat[i, j] = sf2 * np.exp(-0.5 * q)
    return kmat


@njit(cache=True)
def rbf_backward(g, kmat, a, b, ls):
    n, d = a.shape
    m = b.shape[0]
    inv_ls2 = 1.0 / (ls * ls)
    da = np.zeros((n, d))
    db = np.zeros((m, d))
    dlog_sf2 = 0.0
    dlog_ls = np.zeros(d)
    for i in range(n):
        for j in range(m):
            gk = g[i, j] * kmat[i, j]
            dlog_sf2 += gk
            for dd in range(d):
                diff = a[i, dd] - b[j, dd]
                s = gk * diff * inv_ls2[dd]
                da[i, dd] -= s
                db[j, dd] += s
                dlog_ls[dd] += gk * diff * diff * inv_ls2[dd]
    return da, db, dlog_sf2, dlog_ls
