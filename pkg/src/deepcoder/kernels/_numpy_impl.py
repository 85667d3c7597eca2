"""Pure numpy implementations of the hot kernels.

Shapes follow the NCHW convention.  All functions take and return C-ordered
float64 arrays and never mutate their inputs.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x, w, stride, padding):
    """Cross-correlate x [N,C,H,W] with w [F,C,k,k] -> [N,F,Ho,Wo]."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: [N, C, Ho, Wo, k, k]
    return np.ascontiguousarray(
        np.einsum("nchwij,fcij->nfhw", win, w, optimize=True))


def conv2d_backward_input(g, w, stride, padding, h, wd):
    """Gradient of conv2d_forward w.r.t. x.  g is [N,F,Ho,Wo]."""
    n, f, ho, wo = g.shape
    _, c, k, _ = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    dxp = np.zeros((n, c, hp, wp))
    for i in range(k):
        for j in range(k):
            # each kernel tap scatters into a disjoint strided window
            patch = np.einsum("fc,nfhw->nchw", w[:, :, i, j], g, optimize=True)
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += patch
    if padding > 0:
        dxp = dxp[:, :, padding:hp - padding, padding:wp - padding]
    return np.ascontiguousarray(dxp)


def conv2d_backward_kernels(g, x, stride, padding, k):
    """Gradient of conv2d_forward w.r.t. w.  Returns [F,C,k,k]."""
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(
        np.einsum("nfhw,nchwij->fcij", g, win, optimize=True))


def maxpool_forward(x, window):
    """Non-overlapping window x window max pool.

    Returns (y [N,C,Ho,Wo], idx [N,C,Ho,Wo] int64) where idx is the argmax
    position inside each window in row-major order (first hit wins ties).
    """
    n, c, h, wd = x.shape
    ho, wo = h // window, wd // window
    tiles = x.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5)
    flat = np.ascontiguousarray(tiles).reshape(n, c, ho, wo, window * window)
    idx = flat.argmax(axis=-1).astype(np.int64)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool_backward(g, idx, window, h, wd):
    """Scatter g back through the recorded argmax positions."""
    n, c, ho, wo = g.shape
    flat = np.zeros((n, c, ho, wo, window * window))
    np.put_along_axis(flat, idx[..., None], g[..., None], axis=-1)
    dx = flat.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dx).reshape(n, c, h, wd)


def rbf_forward(a, b, sf2, ls):
    """Automatic-relevance RBF gram matrix [n,m].

    K_ij = sf2 * exp(-0.5 * sum_d (a_id - b_jd)^2 / ls_d^2)
    """
    diff = a[:, None, :] - b[None, :, :]
    q = np.einsum("nmd,d->nm", diff * diff, 1.0 / (ls * ls), optimize=True)
    return sf2 * np.exp(-0.5 * q)


def rbf_backward(g, kmat, a, b, ls):
    """Pullbacks of rbf_forward for (a, b, log sf2, log ls).

    Gradients are taken w.r.t. the log parameters directly since the model
    stores them that way.  Returns (da, db, dlog_sf2, dlog_ls).
    """
    gk = g * kmat
    inv_ls2 = 1.0 / (ls * ls)
    diff = a[:, None, :] - b[None, :, :]
    da = -np.einsum("nm,nmd,d->nd", gk, diff, inv_ls2, optimize=True)
    db = np.einsum("nm,nmd,d->md", gk, diff, inv_ls2, optimize=True)
    dlog_sf2 = float(gk.sum())
    dlog_ls = np.einsum("nm,nmd,d->d", gk, diff * diff, inv_ls2, optimize=True)
    return da, db, dlog_sf2, dlog_ls
