"""Hot numeric kernels, in two interchangeable implementations.

Every kernel exists as a numba ``@njit`` function (suffix ``_nb``) and as a
pure-numpy function (suffix ``_np``).  The public names bound at the bottom of
this module point at one family, chosen once at import time:

* ``MERA_DISABLE_NUMBA=1`` forces the numpy path;
* a missing numba install falls back to numpy silently.

Both paths store results in the input dtype and accumulate reductions in
float64.  They agree to float32 rounding but are not bitwise identical to each
other; within one backend results are deterministic.
"""
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("MERA_DISABLE_NUMBA", "0") not in ("1", "true", "yes")
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def linear_fwd_np(x, w, b):
    y = x.astype(np.float64) @ w.astype(np.float64) + b
    return y.astype(x.dtype)


def linear_bwd_np(x, w, dy):
    dy64 = dy.astype(np.float64)
    dx = (dy64 @ w.astype(np.float64).T).astype(x.dtype)
    dw = (x.astype(np.float64).T @ dy64).astype(w.dtype)
    db = dy64.sum(axis=0).astype(w.dtype)
    return dx, dw, db


def layernorm_fwd_np(x, g, b, eps):
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * rstd
    y = xhat * g + b
    return y.astype(x.dtype), xhat, rstd[:, 0]


def layernorm_bwd_np(dy, xhat, rstd, g):
    dy64 = dy.astype(np.float64)
    dg = (dy64 * xhat).sum(axis=0)
    db = dy64.sum(axis=0)
    dxhat = dy64 * g
    dx = (dxhat - dxhat.mean(axis=1, keepdims=True)
          - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)) * rstd[:, None]
    return dx.astype(dy.dtype), dg.astype(g.dtype), db.astype(g.dtype)


def xent_fwd_np(logits, labels):
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    logp = z[np.arange(len(labels)), labels] - np.log(s[:, 0])
    return -logp.mean(), probs


def xent_bwd_np(probs, labels, scale):
    d = probs.copy()
    d[np.arange(len(labels)), labels] -= 1.0
    return d * (scale / len(labels))


def adam_update_np(p, g, m, v, lr, b1, b2, eps, step):
    g64 = g.astype(np.float64)
    m64 = b1 * m + (1.0 - b1) * g64
    v64 = b2 * v + (1.0 - b2) * g64 * g64
    mhat = m64 / (1.0 - b1 ** step)
    vhat = v64 / (1.0 - b2 ** step)
    p[...] = (p - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    m[...] = m64
    v[...] = v64


def sgd_update_np(p, g, lr):
    p[...] = (p - lr * g.astype(np.float64)).astype(p.dtype)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    # Row-buffer accumulation keeps the inner loops contiguous and free of a
    # serial add chain, so they vectorize.
    @njit(cache=True)
    def _linear_fwd_nb(x, w, b, out):
        n, k = x.shape
        m = w.shape[1]
        acc = np.empty(m)
        for i in range(n):
            for j in range(m):
                acc[j] = b[j]
            for t in range(k):
                xv = np.float64(x[i, t])
                for j in range(m):
                    acc[j] += xv * w[t, j]
            for j in range(m):
                out[i, j] = acc[j]

    def linear_fwd_nb(x, w, b):
        out = np.empty((x.shape[0], w.shape[1]), dtype=x.dtype)
        _linear_fwd_nb(x, w, b, out)
        return out

    @njit(cache=True)
    def _linear_bwd_nb(x, w, dy, dx, dw, db):
        n, k = x.shape
        m = w.shape[1]
        dw64 = np.zeros((k, m))
        db64 = np.zeros(m)
        wt = np.ascontiguousarray(w.T)
        row = np.empty(k)
        for i in range(n):
            row[:] = 0.0
            for j in range(m):
                gv = np.float64(dy[i, j])
                for t in range(k):
                    row[t] += gv * wt[j, t]
            for t in range(k):
                dx[i, t] = row[t]
            for t in range(k):
                xv = np.float64(x[i, t])
                for j in range(m):
                    dw64[t, j] += xv * dy[i, j]
            for j in range(m):
                db64[j] += dy[i, j]
        for t in range(k):
            for j in range(m):
                dw[t, j] = dw64[t, j]
        for j in range(m):
            db[j] = db64[j]

    def linear_bwd_nb(x, w, dy):
        dx = np.empty_like(x)
        dw = np.empty_like(w)
        db = np.empty(w.shape[1], dtype=w.dtype)
        _linear_bwd_nb(x, w, dy, dx, dw, db)
        return dx, dw, db

    @njit(cache=True)
    def _layernorm_fwd_nb(x, g, b, eps, y, xhat, rstd):
        n, d = x.shape
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += np.float64(x[i, j])
            mu /= d
            var = 0.0
            for j in range(d):
                c = np.float64(x[i, j]) - mu
                var += c * c
            var /= d
            r = 1.0 / np.sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                h = (np.float64(x[i, j]) - mu) * r
                xhat[i, j] = h
                y[i, j] = h * np.float64(g[j]) + np.float64(b[j])

    def layernorm_fwd_nb(x, g, b, eps):
        n, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty((n, d), dtype=np.float64)
        rstd = np.empty(n, dtype=np.float64)
        _layernorm_fwd_nb(x, g, b, eps, y, xhat, rstd)
        return y, xhat, rstd

    @njit(cache=True)
    def _layernorm_bwd_nb(dy, xhat, rstd, g, dx, dg, db):
        n, d = dy.shape
        dg64 = np.zeros(d)
        db64 = np.zeros(d)
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                dyij = np.float64(dy[i, j])
                dg64[j] += dyij * xhat[i, j]
                db64[j] += dyij
                dh = dyij * np.float64(g[j])
                s1 += dh
                s2 += dh * xhat[i, j]
            s1 /= d
            s2 /= d
            for j in range(d):
                dh = np.float64(dy[i, j]) * np.float64(g[j])
                dx[i, j] = (dh - s1 - xhat[i, j] * s2) * rstd[i]
        for j in range(d):
            dg[j] = dg64[j]
            db[j] = db64[j]

    def layernorm_bwd_nb(dy, xhat, rstd, g):
        dx = np.empty_like(dy)
        dg = np.empty_like(g)
        db = np.empty_like(g)
        _layernorm_bwd_nb(dy, xhat, rstd, g, dx, dg, db)
        return dx, dg, db

    @njit(cache=True)
    def _xent_fwd_nb(logits, labels, probs):
        n, c = logits.shape
        total = 0.0
        for i in range(n):
            mx = np.float64(logits[i, 0])
            for j in range(1, c):
                if logits[i, j] > mx:
                    mx = np.float64(logits[i, j])
            s = 0.0
            for j in range(c):
                e = np.exp(np.float64(logits[i, j]) - mx)
                probs[i, j] = e
                s += e
            for j in range(c):
                probs[i, j] /= s
            total -= np.float64(logits[i, labels[i]]) - mx - np.log(s)
        return total / n

    def xent_fwd_nb(logits, labels):
        probs = np.empty(logits.shape, dtype=np.float64)
        loss = _xent_fwd_nb(logits, labels, probs)
        return loss, probs

    @njit(cache=True)
    def xent_bwd_nb(probs, labels, scale):
        n, c = probs.shape
        d = np.empty_like(probs)
        f = scale / n
        for i in range(n):
            for j in range(c):
                d[i, j] = probs[i, j] * f
            d[i, labels[i]] -= f
        return d

    @njit(cache=True)
    def _adam_update_nb(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
        for i in range(p.size):
            gi = np.float64(g[i])
            mi = b1 * m[i] + (1.0 - b1) * gi
            vi = b2 * v[i] + (1.0 - b2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] = np.float64(p[i]) - lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)

    def adam_update_nb(p, g, m, v, lr, b1, b2, eps, step):
        _adam_update_nb(p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                        lr, b1, b2, eps, 1.0 - b1 ** step, 1.0 - b2 ** step)

    @njit(cache=True)
    def _sgd_update_nb(p, g, lr):
        for i in range(p.size):
            p[i] = np.float64(p[i]) - lr * np.float64(g[i])

    def sgd_update_nb(p, g, lr):
        _sgd_update_nb(p.reshape(-1), g.reshape(-1), lr)


def _pick(name):
    if USE_NUMBA:
        return globals()[name + "_nb"]
    return globals()[name + "_np"]


linear_fwd = _pick("linear_fwd")
linear_bwd = _pick("linear_bwd")
layernorm_fwd = _pick("layernorm_fwd")
layernorm_bwd = _pick("layernorm_bwd")
xent_fwd = _pick("xent_fwd")
xent_bwd = _pick("xent_bwd")
adam_update = _pick("adam_update")
sgd_update = _pick("sgd_update")
