# cython: language_level=3, cdivision=True
"""Compiled row kernels: single-pass softmax and layer norm, forward and backward.

Same contract as ``arac._kernels_py``; inputs of any rank are viewed as
``(rows, last_dim)`` C-contiguous matrices.
"""
import numpy as np
cimport numpy as cnp
cimport cython
from cython cimport floating
from libc.math cimport sqrt

cnp.import_array()


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.initializedcheck(False)
cdef void _shift_rows(floating[:, ::1] x, floating[:, ::1] out) noexcept nogil:
    """out = x - rowmax(x)."""
    cdef Py_ssize_t i, j, n = x.shape[0], d = x.shape[1]
    cdef floating m
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        for j in range(d):
            out[i, j] = x[i, j] - m


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.initializedcheck(False)
cdef void _normalize_rows(floating[:, ::1] e) noexcept nogil:
    cdef Py_ssize_t i, j, n = e.shape[0], d = e.shape[1]
    cdef double s
    cdef floating r
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += e[i, j]
        r = <floating>(1.0 / s)
        for j in range(d):
            e[i, j] = e[i, j] * r


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.initializedcheck(False)
cdef void _softmax_back_rows(floating[:, ::1] s, floating[:, ::1] g,
                             floating[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t i, j, n = s.shape[0], d = s.shape[1]
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(d):
            dot += g[i, j] * s[i, j]
        for j in range(d):
            out[i, j] = <floating>(s[i, j] * (g[i, j] - dot))


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.initializedcheck(False)
cdef void _ln_rows(floating[:, ::1] x, double eps, floating[:, ::1] xhat,
                   floating[:, ::1] rstd) noexcept nogil:
    cdef Py_ssize_t i, j, n = x.shape[0], d = x.shape[1]
    cdef double mu, var, c, r
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / sqrt(var + eps)
        rstd[i, 0] = <floating>r
        for j in range(d):
            xhat[i, j] = <floating>((x[i, j] - mu) * r)


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.initializedcheck(False)
cdef void _ln_back_rows(floating[:, ::1] xhat, floating[:, ::1] rstd,
                        floating[:, ::1] g, floating[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t i, j, n = xhat.shape[0], d = xhat.shape[1]
    cdef double mg, mgx, r
    for i in range(n):
        mg = 0.0
        mgx = 0.0
        for j in range(d):
            mg += g[i, j]
            mgx += g[i, j] * xhat[i, j]
        mg /= d
        mgx /= d
        r = rstd[i, 0]
        for j in range(d):
            out[i, j] = <floating>(r * (g[i, j] - mg - xhat[i, j] * mgx))


def _rows(a):
    return np.ascontiguousarray(a).reshape(-1, a.shape[-1])


def softmax_forward(x):
    # numpy's exp is SIMD-vectorized, so only the max shift and the
    # normalization run here
    x2 = _rows(x)
    out = np.empty_like(x2)
    if x2.dtype == np.float32:
        _shift_rows[float](x2, out)
        np.exp(out, out=out)
        _normalize_rows[float](out)
    else:
        _shift_rows[double](x2, out)
        np.exp(out, out=out)
        _normalize_rows[double](out)
    return out.reshape(x.shape)


def softmax_backward(s, g):
    s2 = _rows(s)
    g2 = _rows(g).astype(s2.dtype, copy=False)
    out = np.empty_like(s2)
    if s2.dtype == np.float32:
        _softmax_back_rows[float](s2, g2, out)
    else:
        _softmax_back_rows[double](s2, g2, out)
    return out.reshape(s.shape)


def layer_norm_forward(x, eps):
    x2 = _rows(x)
    xhat = np.empty_like(x2)
    rstd = np.empty((x2.shape[0], 1), dtype=x2.dtype)
    if x2.dtype == np.float32:
        _ln_rows[float](x2, eps, xhat, rstd)
    else:
        _ln_rows[double](x2, eps, xhat, rstd)
    return xhat.reshape(x.shape), rstd.reshape(x.shape[:-1] + (1,))


def layer_norm_backward(xhat, rstd, gxhat):
    x2 = _rows(xhat)
    r2 = np.ascontiguousarray(rstd).reshape(-1, 1)
    g2 = _rows(gxhat).astype(x2.dtype, copy=False)
    out = np.empty_like(x2)
    if x2.dtype == np.float32:
        _ln_back_rows[float](x2, r2, g2, out)
    else:
        _ln_back_rows[double](x2, r2, g2, out)
    return out.reshape(xhat.shape)
