"""Pure numpy row kernels.

Reference implementation of the row-wise kernels used by :mod:`arac.tensor`.
The compiled module ``arac._kernels`` exposes the same four functions; the
selection happens in :mod:`arac.kernels`.

All functions operate on the last axis of an array of any rank.
"""
import numpy as np


def softmax_forward(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(s, g):
    return s * (g - (g * s).sum(axis=-1, keepdims=True))


def layer_norm_forward(x, eps):
    """Return ``(xhat, rstd)`` where ``xhat`` is zero-mean/unit-variance per row.

    ``rstd`` keeps a trailing singleton axis so it broadcasts against ``x``.
    """
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd


def layer_norm_backward(xhat, rstd, gxhat):
    mg = gxhat.mean(axis=-1, keepdims=True)
    mgx = (gxhat * xhat).mean(axis=-1, keepdims=True)
    return rstd * (gxhat - mg - xhat * mgx)
