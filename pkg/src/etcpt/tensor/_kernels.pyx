# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused row-wise kernels for the tensor engine.

Every kernel takes C-contiguous 2-D arrays (rows x width) and writes into
preallocated outputs. The numpy fallback in ``_kernels_py`` has the same
signatures.
"""
from cython cimport floating
from libc.math cimport exp, expf, sqrt, tanh, tanhf

import numpy as np

cdef double GELU_C = 0.7978845608028654  # sqrt(2/pi)
cdef double GELU_A = 0.044715
cdef float GELU_CF = 0.7978845608028654
cdef float GELU_AF = 0.044715


def softmax_fwd(floating[:, ::1] x, floating[:, ::1] out):
    cdef Py_ssize_t n = x.shape[0], w = x.shape[1], i, j
    cdef double mx, s
    cdef float mf, sf
    if floating is float:
        for i in range(n):
            mf = x[i, 0]
            for j in range(1, w):
                if x[i, j] > mf:
                    mf = x[i, j]
            sf = 0.0
            for j in range(w):
                out[i, j] = expf(x[i, j] - mf)
                sf += out[i, j]
            sf = 1.0 / sf
            for j in range(w):
                out[i, j] *= sf
    else:
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, w):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(w):
                out[i, j] = exp(x[i, j] - mx)
                s += out[i, j]
            for j in range(w):
                out[i, j] /= s


def softmax_bwd(floating[:, ::1] y, floating[:, ::1] g, floating[:, ::1] dx):
    cdef Py_ssize_t n = y.shape[0], w = y.shape[1], i, j
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(w):
            dot += g[i, j] * y[i, j]
        for j in range(w):
            dx[i, j] = <floating>(y[i, j] * (g[i, j] - dot))


def layer_norm_fwd(floating[:, ::1] x, floating[::1] gain, floating[::1] bias,
                   double eps, floating[:, ::1] out, floating[:, ::1] xhat,
                   floating[::1] rstd):
    cdef Py_ssize_t n = x.shape[0], w = x.shape[1], i, j
    cdef double mean, var, d, r
    for i in range(n):
        mean = 0.0
        for j in range(w):
            mean += x[i, j]
        mean /= w
        var = 0.0
        for j in range(w):
            d = x[i, j] - mean
            var += d * d
        var /= w
        r = 1.0 / sqrt(var + eps)
        rstd[i] = <floating>r
        for j in range(w):
            d = (x[i, j] - mean) * r
            xhat[i, j] = <floating>d
            out[i, j] = <floating>(d * gain[j] + bias[j])


def layer_norm_bwd(floating[:, ::1] g, floating[:, ::1] xhat, floating[::1] rstd,
                   floating[::1] gain, floating[:, ::1] dx, floating[::1] dgain,
                   floating[::1] dbias):
    cdef Py_ssize_t n = g.shape[0], w = g.shape[1], i, j
    cdef double a, b, gh
    for j in range(w):
        dgain[j] = 0
        dbias[j] = 0
    for i in range(n):
        a = 0.0
        b = 0.0
        for j in range(w):
            gh = g[i, j] * gain[j]
            a += gh
            b += gh * xhat[i, j]
            dgain[j] += g[i, j] * xhat[i, j]
            dbias[j] += g[i, j]
        a /= w
        b /= w
        for j in range(w):
            dx[i, j] = <floating>(rstd[i] * (g[i, j] * gain[j] - a - xhat[i, j] * b))


def gelu_fwd(floating[:, ::1] x, floating[:, ::1] out):
    cdef Py_ssize_t n = x.shape[0], w = x.shape[1], i, j
    cdef double v
    cdef float vf
    if floating is float:
        for i in range(n):
            for j in range(w):
                vf = x[i, j]
                out[i, j] = 0.5 * vf * (1.0 + tanhf(GELU_CF * (vf + GELU_AF * vf * vf * vf)))
    else:
        for i in range(n):
            for j in range(w):
                v = x[i, j]
                out[i, j] = 0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v)))


def gelu_bwd(floating[:, ::1] x, floating[:, ::1] g, floating[:, ::1] dx):
    cdef Py_ssize_t n = x.shape[0], w = x.shape[1], i, j
    cdef double v, t
    cdef float vf, tf
    if floating is float:
        for i in range(n):
            for j in range(w):
                vf = x[i, j]
                tf = tanhf(GELU_CF * (vf + GELU_AF * vf * vf * vf))
                dx[i, j] = g[i, j] * (0.5 * (1.0 + tf) + 0.5 * vf * (1.0 - tf * tf)
                                      * GELU_CF * (1.0 + 3.0 * GELU_AF * vf * vf))
    else:
        for i in range(n):
            for j in range(w):
                v = x[i, j]
                t = tanh(GELU_C * (v + GELU_A * v * v * v))
                dx[i, j] = g[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t)
                                      * GELU_C * (1.0 + 3.0 * GELU_A * v * v))
