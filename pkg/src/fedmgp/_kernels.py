"""Row-wise numeric kernels used by the autodiff ops.

Each kernel has a pure-numpy implementation and a numba ``@njit`` twin.
The numba path is used when numba imports cleanly and the environment
variable ``FEDMGP_DISABLE_NUMBA`` is unset (or "0"). Both paths operate on
C-contiguous float64 2-D arrays of shape (rows, cols).
"""
from __future__ import annotations

import math
import os

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)


# ---------------------------------------------------------------- numpy path

def np_softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def np_softmax_rows_backward(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def np_layernorm_rows(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def np_layernorm_rows_backward(g, xhat, rstd, gamma):
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * gamma
    a = gx.mean(axis=1, keepdims=True)
    b = (gx * xhat).mean(axis=1, keepdims=True)
    dx = (gx - a - xhat * b) * rstd[:, None]
    return dx, dgamma, dbeta


def np_gelu(x):
    """tanh-approximated GELU; returns (y, tanh term) so backward skips the tanh."""
    x2 = x * x
    t = np.tanh(GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * x * (1.0 + t), t


def np_gelu_backward(x, t, g):
    x2 = x * x
    du = GELU_C * (1.0 + 3 * 0.044715 * x2)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def np_cosine_distance_matrix(q, k):
    qn = np.sqrt((q * q).sum(axis=1))
    kn = np.sqrt((k * k).sum(axis=1))
    return 1.0 - (q @ k.T) / (qn[:, None] * kn[None, :])


# ---------------------------------------------------------------- numba path

def _build_numba():
    from numba import njit

    @njit(cache=True)
    def softmax_rows(x):
        r, c = x.shape
        out = np.empty_like(x)
        for i in range(r):
            m = x[i, 0]
            for j in range(1, c):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(c):
                e = math.exp(x[i, j] - m)
                out[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(c):
                out[i, j] *= inv
        return out

    @njit(cache=True)
    def softmax_rows_backward(y, g):
        r, c = y.shape
        out = np.empty_like(y)
        for i in range(r):
            dot = 0.0
            for j in range(c):
                dot += g[i, j] * y[i, j]
            for j in range(c):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @njit(cache=True)
    def layernorm_rows(x, gamma, beta, eps):
        r, c = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(r)
        for i in range(r):
            mu = 0.0
            for j in range(c):
                mu += x[i, j]
            mu /= c
            var = 0.0
            for j in range(c):
                d = x[i, j] - mu
                var += d * d
            var /= c
            rs = 1.0 / math.sqrt(var + eps)
            rstd[i] = rs
            for j in range(c):
                h = (x[i, j] - mu) * rs
                xhat[i, j] = h
                y[i, j] = h * gamma[j] + beta[j]
        return y, xhat, rstd

    @njit(cache=True)
    def layernorm_rows_backward(g, xhat, rstd, gamma):
        r, c = g.shape
        dx = np.empty_like(g)
        dgamma = np.zeros(c)
        dbeta = np.zeros(c)
        for i in range(r):
            a = 0.0
            b = 0.0
            for j in range(c):
                gx = g[i, j] * gamma[j]
                a += gx
                b += gx * xhat[i, j]
                dgamma[j] += g[i, j] * xhat[i, j]
                dbeta[j] += g[i, j]
            a /= c
            b /= c
            for j in range(c):
                dx[i, j] = (g[i, j] * gamma[j] - a - xhat[i, j] * b) * rstd[i]
        return dx, dgamma, dbeta

    @njit(cache=True)
    def _gelu_combine(x, t):
        xf = x.ravel()
        tf = t.ravel()
        out = np.empty_like(xf)
        for i in range(xf.size):
            out[i] = 0.5 * xf[i] * (1.0 + tf[i])
        return out.reshape(x.shape)

    def gelu(x):
        # scalar math.tanh inside njit is ~5x slower than numpy's SIMD ufunc
        t = np.tanh(GELU_C * x * (1.0 + 0.044715 * (x * x)))
        return _gelu_combine(x, t), t

    @njit(cache=True)
    def gelu_backward(x, t, g):
        xf = x.ravel()
        tf = t.ravel()
        gf = g.ravel()
        out = np.empty_like(xf)
        for i in range(xf.size):
            v = xf[i]
            ti = tf[i]
            du = GELU_C * (1.0 + 3 * 0.044715 * v * v)
            out[i] = gf[i] * (0.5 * (1.0 + ti) + 0.5 * v * (1.0 - ti * ti) * du)
        return out.reshape(x.shape)

    @njit(cache=True)
    def cosine_distance_matrix(q, k):
        b, d = q.shape
        m = k.shape[0]
        out = np.empty((b, m))
        kn = np.empty(m)
        for j in range(m):
            s = 0.0
            for t in range(d):
                s += k[j, t] * k[j, t]
            kn[j] = math.sqrt(s)
        for i in range(b):
            s = 0.0
            for t in range(d):
                s += q[i, t] * q[i, t]
            qn = math.sqrt(s)
            for j in range(m):
                dot = 0.0
                for t in range(d):
                    dot += q[i, t] * k[j, t]
                out[i, j] = 1.0 - dot / (qn * kn[j])
        return out

    return {
        "softmax_rows": softmax_rows,
        "softmax_rows_backward": softmax_rows_backward,
        "layernorm_rows": layernorm_rows,
        "layernorm_rows_backward": layernorm_rows_backward,
        "gelu": gelu,
        "gelu_backward": gelu_backward,
        "cosine_distance_matrix": cosine_distance_matrix,
    }


NUMPY_KERNELS = {
    "softmax_rows": np_softmax_rows,
    "softmax_rows_backward": np_softmax_rows_backward,
    "layernorm_rows": np_layernorm_rows,
    "layernorm_rows_backward": np_layernorm_rows_backward,
    "gelu": np_gelu,
    "gelu_backward": np_gelu_backward,
    "cosine_distance_matrix": np_cosine_distance_matrix,
}


def _numba_requested() -> bool:
    return os.environ.get("FEDMGP_DISABLE_NUMBA", "0").strip().lower() in ("", "0", "false", "no")


try:
    NUMBA_KERNELS = _build_numba()
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_KERNELS = None

USE_NUMBA = NUMBA_KERNELS is not None and _numba_requested()
_active = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

softmax_rows = _active["softmax_rows"]
softmax_rows_backward = _active["softmax_rows_backward"]
layernorm_rows = _active["layernorm_rows"]
layernorm_rows_backward = _active["layernorm_rows_backward"]
gelu = _active["gelu"]
gelu_backward = _active["gelu_backward"]
cosine_distance_matrix = _active["cosine_distance_matrix"]


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
