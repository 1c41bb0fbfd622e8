"""Pure-numpy versions of the fused row-wise kernels.

Same signatures as the compiled ``_kernels`` module: inputs are C-contiguous
2-D arrays and results are written into the preallocated outputs.
"""
import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2/pi)
GELU_A = 0.044715


def softmax_fwd(x, out):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    np.divide(e, e.sum(axis=1, keepdims=True), out=out)


def softmax_bwd(y, g, dx):
    dot = (g * y).sum(axis=1, keepdims=True)
    np.multiply(y, g - dot, out=dx)


def layer_norm_fwd(x, gain, bias, eps, out, xhat, rstd):
    mean = x.mean(axis=1, keepdims=True)
    d = x - mean
    r = 1.0 / np.sqrt((d * d).mean(axis=1, keepdims=True) + eps)
    rstd[:] = r[:, 0]
    np.multiply(d, r, out=xhat)
    np.add(xhat * gain, bias, out=out)


def layer_norm_bwd(g, xhat, rstd, gain, dx, dgain, dbias):
    gh = g * gain
    a = gh.mean(axis=1, keepdims=True)
    b = (gh * xhat).mean(axis=1, keepdims=True)
    dgain[:] = (g * xhat).sum(axis=0)
    dbias[:] = g.sum(axis=0)
    np.multiply(rstd[:, None], gh - a - xhat * b, out=dx)


def gelu_fwd(x, out):
    t = np.tanh(GELU_C * (x + GELU_A * x * x * x))
    np.multiply(0.5 * x, 1.0 + t, out=out)


def gelu_bwd(x, g, dx):
    t = np.tanh(GELU_C * (x + GELU_A * x * x * x))
    inner = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    np.multiply(g, 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * inner, out=dx)
