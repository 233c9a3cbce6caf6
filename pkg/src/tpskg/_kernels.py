"""Row-wise numeric kernels with a numba path and a pure-numpy path.

The numba kernels run explicit sequential loops, so every reduction is
accumulated in ascending index order. Set ``TPSKG_NUMBA=0`` to force the
numpy path (useful when numba is unavailable or for comparison runs).

All kernels take 2-D C-contiguous arrays of shape (rows, width).
"""
from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf as _erf

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _env_wants_numba() -> bool:
    return os.environ.get("TPSKG_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


try:
    import numba
except ImportError:  # pragma: no cover - numba is an install requirement
    numba = None

USE_NUMBA = numba is not None and _env_wants_numba()


# --------------------------------------------------------------------- numpy


def np_softmax_fwd(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def np_softmax_bwd(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def np_layernorm_fwd(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def np_layernorm_bwd(gy, xhat, rstd, gain):
    """Returns (gx, ggain, gbias)."""
    g = gy * gain
    gx = (g - g.mean(axis=1, keepdims=True)
          - xhat * (g * xhat).mean(axis=1, keepdims=True)) * rstd[:, None]
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def np_gelu_fwd(x):
    return 0.5 * x * (1.0 + _erf(x * _SQRT1_2))


def np_gelu_bwd(x, gy):
    cdf = 0.5 * (1.0 + _erf(x * _SQRT1_2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return gy * (cdf + x * pdf)


def np_rollout(avg):
    """avg: (L, T, T) head-averaged attention. Returns the layer-L rollout."""
    t = avg.shape[1]
    eye = np.eye(t, dtype=avg.dtype)
    a = avg[0] + eye
    out = a / a.sum(axis=1, keepdims=True)
    for layer in range(1, avg.shape[0]):
        a = avg[layer] + eye
        a = a / a.sum(axis=1, keepdims=True)
        out = a @ out
    return out


# --------------------------------------------------------------------- numba

if numba is not None:
    _jit = numba.njit(cache=True, nogil=True)

    @_jit
    def nb_softmax_fwd(x):
        rows, n = x.shape
        out = np.empty_like(x)
        for i in range(rows):
            m = x[i, 0]
            for j in range(1, n):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(n):
                e = math.exp(x[i, j] - m)
                out[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(n):
                out[i, j] *= inv
        return out

    @_jit
    def nb_softmax_bwd(y, gy):
        rows, n = y.shape
        out = np.empty_like(y)
        for i in range(rows):
            dot = 0.0
            for j in range(n):
                dot += gy[i, j] * y[i, j]
            for j in range(n):
                out[i, j] = y[i, j] * (gy[i, j] - dot)
        return out

    @_jit
    def nb_layernorm_fwd(x, gain, bias, eps):
        rows, n = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows, dtype=x.dtype)
        for i in range(rows):
            s = 0.0
            for j in range(n):
                s += x[i, j]
            mean = s / n
            v = 0.0
            for j in range(n):
                c = x[i, j] - mean
                v += c * c
            r = 1.0 / math.sqrt(v / n + eps)
            rstd[i] = r
            for j in range(n):
                h = (x[i, j] - mean) * r
                xhat[i, j] = h
                out[i, j] = h * gain[j] + bias[j]
        return out, xhat, rstd

    @_jit
    def nb_layernorm_bwd(gy, xhat, rstd, gain):
        rows, n = gy.shape
        gx = np.empty_like(gy)
        ggain = np.zeros(n, dtype=gy.dtype)
        gbias = np.zeros(n, dtype=gy.dtype)
        for i in range(rows):
            s1 = 0.0
            s2 = 0.0
            for j in range(n):
                g = gy[i, j] * gain[j]
                s1 += g
                s2 += g * xhat[i, j]
            m1 = s1 / n
            m2 = s2 / n
            for j in range(n):
                g = gy[i, j] * gain[j]
                gx[i, j] = (g - m1 - xhat[i, j] * m2) * rstd[i]
                ggain[j] += gy[i, j] * xhat[i, j]
                gbias[j] += gy[i, j]
        return gx, ggain, gbias

    @_jit
    def nb_gelu_fwd(x):
        rows, n = x.shape
        out = np.empty_like(x)
        for i in range(rows):
            for j in range(n):
                v = x[i, j]
                out[i, j] = 0.5 * v * (1.0 + math.erf(v * _SQRT1_2))
        return out

    @_jit
    def nb_gelu_bwd(x, gy):
        rows, n = x.shape
        out = np.empty_like(x)
        for i in range(rows):
            for j in range(n):
                v = x[i, j]
                cdf = 0.5 * (1.0 + math.erf(v * _SQRT1_2))
                pdf = math.exp(-0.5 * v * v) * _INV_SQRT_2PI
                out[i, j] = gy[i, j] * (cdf + v * pdf)
        return out

    @_jit
    def nb_rollout(avg):
        layers, t, _ = avg.shape
        cur = np.empty((t, t), dtype=avg.dtype)
        a = np.empty((t, t), dtype=avg.dtype)
        nxt = np.empty((t, t), dtype=avg.dtype)
        for layer in range(layers):
            for i in range(t):
                s = 0.0
                for j in range(t):
                    v = avg[layer, i, j]
                    if i == j:
                        v += 1.0
                    a[i, j] = v
                    s += v
                for j in range(t):
                    a[i, j] /= s
            if layer == 0:
                cur[:, :] = a
            else:
                for i in range(t):
                    for j in range(t):
                        acc = 0.0
                        for k in range(t):
                            acc += a[i, k] * cur[k, j]
                        nxt[i, j] = acc
                cur[:, :] = nxt
        return cur
else:  # pragma: no cover
    nb_softmax_fwd = nb_softmax_bwd = None
    nb_layernorm_fwd = nb_layernorm_bwd = None
    nb_gelu_fwd = nb_gelu_bwd = nb_rollout = None


def _dispatch(name):
    if USE_NUMBA:
        return globals()["nb_" + name]
    return globals()["np_" + name]


softmax_fwd = _dispatch("softmax_fwd")
softmax_bwd = _dispatch("softmax_bwd")
layernorm_fwd = _dispatch("layernorm_fwd")
layernorm_bwd = _dispatch("layernorm_bwd")
gelu_fwd = _dispatch("gelu_fwd")
gelu_bwd = _dispatch("gelu_bwd")
rollout_chain = _dispatch("rollout")

BACKEND = "numba" if USE_NUMBA else "numpy"
