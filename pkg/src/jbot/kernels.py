"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Every kernel exists twice: ``_np_<name>`` (vectorised numpy) and
``_nb_<name>`` (explicit loops compiled with numba). The public name is bound
to one of them by :func:`use_backend`; the default follows
:data:`jbot._accel.NUMBA_ENABLED`.

Row-wise kernels take 2-D arrays; callers reshape ``(..., d)`` to ``(-1, d)``.
"""
import math

import numpy as np
from scipy.special import erf as _erf

from ._accel import NUMBA_AVAILABLE, NUMBA_ENABLED, optional_njit

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# --------------------------------------------------------------------------
# numpy implementations


def _np_layernorm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def _np_layernorm_bwd(g, xhat, rstd, gamma):
    dxhat = g * gamma
    d = xhat.shape[1]
    m1 = dxhat.sum(axis=1, keepdims=True) / d
    m2 = (dxhat * xhat).sum(axis=1, keepdims=True) / d
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def _np_gelu_fwd(x):
    return 0.5 * x * (1.0 + _erf(x * _SQRT1_2))


def _np_gelu_bwd(x, g):
    cdf = 0.5 * (1.0 + _erf(x * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def _np_softmax_fwd(x, allow, inv_t):
    z = x * inv_t
    if allow is not None:
        z = np.where(allow, z, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_bwd(p, g, inv_t):
    s = (g * p).sum(axis=1, keepdims=True)
    return p * (g - s) * inv_t


def _np_pairwise_dist(a, b):
    # direct differences (no a^2+b^2-2ab cancellation); chunked to bound memory
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.result_type(a, b))
    step = max(1, 2_000_000 // max(1, b.shape[0] * a.shape[1]))
    for i in range(0, a.shape[0], step):
        diff = a[i : i + step, None, :] - b[None, :, :]
        out[i : i + step] = np.sqrt((diff * diff).sum(axis=2))
    return out


def _np_prefix_select(pt, target):
    if target <= 0.0 or pt.shape[0] == 0:
        return 0
    cum = np.cumsum(pt)
    hits = np.nonzero(cum >= target)[0]
    if hits.shape[0] == 0:
        return pt.shape[0]
    i = int(hits[0])
    if i == 0:
        return 1
    before, after = cum[i - 1], cum[i]
    return i if abs(before - target) <= abs(after - target) else i + 1


# --------------------------------------------------------------------------
# numba implementations


@optional_njit(cache=True)
def _nb_layernorm_fwd(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n, dtype=x.dtype)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            t = x[i, j] - mu
            var += t * t
        var /= d
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd


@optional_njit(cache=True)
def _nb_layernorm_bwd(g, xhat, rstd, gamma):
    n, d = g.shape
    dx = np.empty_like(g)
    dgamma = np.zeros(d, dtype=g.dtype)
    dbeta = np.zeros(d, dtype=g.dtype)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            dh = g[i, j] * gamma[j]
            m1 += dh
            m2 += dh * xhat[i, j]
            dgamma[j] += g[i, j] * xhat[i, j]
            dbeta[j] += g[i, j]
        m1 /= d
        m2 /= d
        r = rstd[i]
        for j in range(d):
            dx[i, j] = (g[i, j] * gamma[j] - m1 - xhat[i, j] * m2) * r
    return dx, dgamma, dbeta


@optional_njit(cache=True)
def _nb_gelu_fwd(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.shape[0]):
        v = flat[i]
        out[i] = 0.5 * v * (1.0 + math.erf(v * _SQRT1_2))
    return out.reshape(x.shape)


@optional_njit(cache=True)
def _nb_gelu_bwd(x, g):
    xf = x.ravel()
    gf = g.ravel()
    out = np.empty_like(xf)
    for i in range(xf.shape[0]):
        v = xf[i]
        cdf = 0.5 * (1.0 + math.erf(v * _SQRT1_2))
        pdf = _INV_SQRT_2PI * math.exp(-0.5 * v * v)
        out[i] = gf[i] * (cdf + v * pdf)
    return out.reshape(x.shape)


@optional_njit(cache=True)
def _nb_softmax_fwd_masked(x, allow, inv_t):
    n, c = x.shape
    out = np.zeros_like(x)
    for i in range(n):
        m = -np.inf
        for j in range(c):
            if allow[i, j]:
                v = x[i, j] * inv_t
                if v > m:
                    m = v
        s = 0.0
        for j in range(c):
            if allow[i, j]:
                e = math.exp(x[i, j] * inv_t - m)
                out[i, j] = e
                s += e
        for j in range(c):
            out[i, j] /= s
    return out


@optional_njit(cache=True)
def _nb_softmax_fwd_dense(x, inv_t):
    n, c = x.shape
    out = np.empty_like(x)
    for i in range(n):
        m = -np.inf
        for j in range(c):
            v = x[i, j] * inv_t
            if v > m:
                m = v
        s = 0.0
        for j in range(c):
            e = math.exp(x[i, j] * inv_t - m)
            out[i, j] = e
            s += e
        for j in range(c):
            out[i, j] /= s
    return out


def _nb_softmax_fwd(x, allow, inv_t):
    if allow is None:
        return _nb_softmax_fwd_dense(x, inv_t)
    return _nb_softmax_fwd_masked(x, np.ascontiguousarray(allow), inv_t)


@optional_njit(cache=True)
def _nb_softmax_bwd(p, g, inv_t):
    n, c = p.shape
    out = np.empty_like(p)
    for i in range(n):
        s = 0.0
        for j in range(c):
            s += g[i, j] * p[i, j]
        for j in range(c):
            out[i, j] = p[i, j] * (g[i, j] - s) * inv_t
    return out


@optional_njit(cache=True)
def _nb_pairwise_dist(a, b):
    n, d = a.shape
    m = b.shape[0]
    out = np.empty((n, m), dtype=a.dtype)
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(d):
                t = a[i, k] - b[j, k]
                s += t * t
            out[i, j] = math.sqrt(s)
    return out


@optional_njit(cache=True)
def _nb_prefix_select(pt, target):
    n = pt.shape[0]
    if target <= 0.0 or n == 0:
        return 0
    cum = 0.0
    for i in range(n):
        before = cum
        cum += pt[i]
        if cum >= target:
            if i == 0:
                return 1
            if abs(before - target) <= abs(cum - target):
                return i
            return i + 1
    return n


# --------------------------------------------------------------------------
# dispatch

KERNELS = (
    "layernorm_fwd",
    "layernorm_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "pairwise_dist",
    "prefix_select",
)

_IMPLS = {
    "numpy": {name: globals()["_np_" + name] for name in KERNELS},
    "numba": {name: globals()["_nb_" + name] for name in KERNELS},
}

backend = None


def use_backend(name):
    """Bind the public kernel names to ``"numpy"`` or ``"numba"``."""
    global backend
    if name not in _IMPLS:
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not installed")
    g = globals()
    for kname, fn in _IMPLS[name].items():
        g[kname] = fn
    backend = name


def implementation(name, kernel):
    return _IMPLS[name][kernel]


use_backend("numba" if NUMBA_ENABLED else "numpy")
