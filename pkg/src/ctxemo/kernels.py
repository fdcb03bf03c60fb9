"""Per-token numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import from the ``CTXEMO_NUMBA`` environment
variable (``0``/``false``/``off`` selects numpy; anything else, or unset,
selects numba when it imports cleanly). Both implementations stay reachable
through :data:`NUMPY_KERNELS` and :data:`NUMBA_KERNELS` so the benchmark and
the tests can compare them side by side.
"""

from __future__ import annotations

import math
import os

import numpy as np

_FLAG = os.environ.get("CTXEMO_NUMBA", "1").strip().lower()
_WANT_NUMBA = _FLAG not in ("0", "false", "off", "no")

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

GELU_C = math.sqrt(2.0 / math.pi)


# --------------------------------------------------------------------------
# numpy reference implementations
# --------------------------------------------------------------------------


def _max_pool_np(reps, starts, ends):
    n, d = len(starts), reps.shape[1]
    out = np.empty((n, d), dtype=reps.dtype)
    arg = np.empty((n, d), dtype=np.int64)
    for u in range(n):
        block = reps[starts[u]:ends[u]]
        # argmax returns the first hit, which is the lowest-index tie break
        idx = block.argmax(axis=0)
        arg[u] = idx + starts[u]
        out[u] = block[idx, np.arange(d)]
    return out, arg


def _max_pool_backward_np(grad_out, arg, n_rows):
    grad = np.zeros((n_rows, grad_out.shape[1]), dtype=grad_out.dtype)
    cols = np.broadcast_to(np.arange(grad_out.shape[1]), arg.shape)
    np.add.at(grad, (arg, cols), grad_out)
    return grad


def _mean_pool_np(reps, starts, ends):
    out = np.empty((len(starts), reps.shape[1]), dtype=reps.dtype)
    for u in range(len(starts)):
        out[u] = reps[starts[u]:ends[u]].mean(axis=0)
    return out


def _mean_pool_backward_np(grad_out, starts, ends, n_rows):
    grad = np.zeros((n_rows, grad_out.shape[1]), dtype=grad_out.dtype)
    for u in range(len(starts)):
        grad[starts[u]:ends[u]] += grad_out[u] / (ends[u] - starts[u])
    return grad


def _layer_norm_np(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv[:, 0]


def _layer_norm_backward_np(dy, xhat, inv, gain):
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    d = xhat.shape[1]
    dx = (inv[:, None] / d) * (
        d * dxhat
        - dxhat.sum(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
    )
    return dx, dgain, dbias


def _gelu_np(x):
    # 0.5 * (1 + tanh(z)) == sigmoid(2z)
    z = GELU_C * (x + 0.044715 * x * x * x)
    return x / (1.0 + np.exp(-2.0 * z))


def _gelu_backward_np(dy, x):
    z = GELU_C * (x + 0.044715 * x * x * x)
    s = 1.0 / (1.0 + np.exp(-2.0 * z))
    dz = GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (s + 2.0 * x * s * (1.0 - s) * dz)


def _confusion_np(golds, preds, n):
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (golds, preds), 1)
    return cm


NUMPY_KERNELS = {
    "max_pool": _max_pool_np,
    "max_pool_backward": _max_pool_backward_np,
    "mean_pool": _mean_pool_np,
    "mean_pool_backward": _mean_pool_backward_np,
    "layer_norm": _layer_norm_np,
    "layer_norm_backward": _layer_norm_backward_np,
    "gelu": _gelu_np,
    "gelu_backward": _gelu_backward_np,
    "confusion": _confusion_np,
}


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

NUMBA_KERNELS: dict = {}

if HAVE_NUMBA:

    @njit(cache=True)
    def _max_pool_nb(reps, starts, ends):
        n = starts.shape[0]
        d = reps.shape[1]
        out = np.empty((n, d), dtype=reps.dtype)
        arg = np.empty((n, d), dtype=np.int64)
        for u in range(n):
            s = starts[u]
            for j in range(d):
                best = reps[s, j]
                bi = s
                for t in range(s + 1, ends[u]):
                    # strict > keeps the lowest index on ties
                    if reps[t, j] > best:
                        best = reps[t, j]
                        bi = t
                out[u, j] = best
                arg[u, j] = bi
        return out, arg

    @njit(cache=True)
    def _max_pool_backward_nb(grad_out, arg, n_rows):
        n, d = grad_out.shape
        grad = np.zeros((n_rows, d), dtype=grad_out.dtype)
        for u in range(n):
            for j in range(d):
                grad[arg[u, j], j] += grad_out[u, j]
        return grad

    @njit(cache=True)
    def _mean_pool_nb(reps, starts, ends):
        n = starts.shape[0]
        d = reps.shape[1]
        out = np.zeros((n, d), dtype=reps.dtype)
        for u in range(n):
            for t in range(starts[u], ends[u]):
                for j in range(d):
                    out[u, j] += reps[t, j]
            length = ends[u] - starts[u]
            for j in range(d):
                out[u, j] /= length
        return out

    @njit(cache=True)
    def _mean_pool_backward_nb(grad_out, starts, ends, n_rows):
        n, d = grad_out.shape
        grad = np.zeros((n_rows, d), dtype=grad_out.dtype)
        for u in range(n):
            length = ends[u] - starts[u]
            for t in range(starts[u], ends[u]):
                for j in range(d):
                    grad[t, j] += grad_out[u, j] / length
        return grad

    @njit(cache=True)
    def _layer_norm_nb(x, gain, bias, eps):
        n, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        inv = np.empty(n, dtype=x.dtype)
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
            r = 1.0 / math.sqrt(var + eps)
            inv[i] = r
            for j in range(d):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * gain[j] + bias[j]
        return y, xhat, inv

    @njit(cache=True)
    def _layer_norm_backward_nb(dy, xhat, inv, gain):
        n, d = dy.shape
        dx = np.empty_like(dy)
        dgain = np.zeros(d, dtype=dy.dtype)
        dbias = np.zeros(d, dtype=dy.dtype)
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                g = dy[i, j] * gain[j]
                s1 += g
                s2 += g * xhat[i, j]
                dgain[j] += dy[i, j] * xhat[i, j]
                dbias[j] += dy[i, j]
            for j in range(d):
                g = dy[i, j] * gain[j]
                dx[i, j] = inv[i] / d * (d * g - s1 - xhat[i, j] * s2)
        return dx, dgain, dbias

    @njit(cache=True, fastmath=True)
    def _gelu_nb(x):
        c = x.dtype.type(GELU_C)
        k = x.dtype.type(0.044715)
        one = x.dtype.type(1)
        two = x.dtype.type(2)
        out = np.empty_like(x)
        fi = x.ravel()
        fo = out.ravel()
        for i in range(fi.shape[0]):
            v = fi[i]
            fo[i] = v / (one + math.exp(-two * c * (v + k * v * v * v)))
        return out

    @njit(cache=True, fastmath=True)
    def _gelu_backward_nb(dy, x):
        c = x.dtype.type(GELU_C)
        k = x.dtype.type(0.044715)
        one = x.dtype.type(1)
        two = x.dtype.type(2)
        three = x.dtype.type(3)
        out = np.empty_like(x)
        fi = x.ravel()
        fd = dy.ravel()
        fo = out.ravel()
        for i in range(fi.shape[0]):
            v = fi[i]
            s = one / (one + math.exp(-two * c * (v + k * v * v * v)))
            fo[i] = fd[i] * (s + two * v * s * (one - s) * c * (one + three * k * v * v))
        return out

    @njit(cache=True)
    def _confusion_nb(golds, preds, n):
        cm = np.zeros((n, n), dtype=np.int64)
        for i in range(golds.shape[0]):
            cm[golds[i], preds[i]] += 1
        return cm

    NUMBA_KERNELS = {
        "max_pool": _max_pool_nb,
        "max_pool_backward": _max_pool_backward_nb,
        "mean_pool": _mean_pool_nb,
        "mean_pool_backward": _mean_pool_backward_nb,
        "layer_norm": _layer_norm_nb,
        "layer_norm_backward": _layer_norm_backward_nb,
        "gelu": _gelu_nb,
        "gelu_backward": _gelu_backward_nb,
        "confusion": _confusion_nb,
    }

USING_NUMBA = _WANT_NUMBA and HAVE_NUMBA
BACKEND = "numba" if USING_NUMBA else "numpy"
# numpy's SIMD exp beats a scalar numba loop for the elementwise activation
NUMPY_PREFERRED = ("gelu", "gelu_backward")
_ACTIVE = (
    {**NUMBA_KERNELS, **{k: NUMPY_KERNELS[k] for k in NUMPY_PREFERRED}} if USING_NUMBA else NUMPY_KERNELS
)


def _contig(a):
    return np.ascontiguousarray(a)


def max_pool(reps, starts, ends):
    """Per-span, per-column max. Returns ``(pooled, argmax_rows)``."""
    return _ACTIVE["max_pool"](_contig(reps), _contig(starts), _contig(ends))


def max_pool_backward(grad_out, arg, n_rows):
    return _ACTIVE["max_pool_backward"](_contig(grad_out), _contig(arg), n_rows)


def mean_pool(reps, starts, ends):
    return _ACTIVE["mean_pool"](_contig(reps), _contig(starts), _contig(ends))


def mean_pool_backward(grad_out, starts, ends, n_rows):
    return _ACTIVE["mean_pool_backward"](_contig(grad_out), _contig(starts), _contig(ends), n_rows)


def layer_norm(x, gain, bias, eps):
    """Row-wise layer norm. Returns ``(y, xhat, inv_std)``."""
    return _ACTIVE["layer_norm"](_contig(x), gain, bias, eps)


def layer_norm_backward(dy, xhat, inv, gain):
    return _ACTIVE["layer_norm_backward"](_contig(dy), xhat, inv, gain)


def gelu(x):
    """tanh-approximated GELU."""
    return _ACTIVE["gelu"](_contig(x))


def gelu_backward(dy, x):
    return _ACTIVE["gelu_backward"](_contig(dy), _contig(x))


def confusion(golds, preds, n):
    return _ACTIVE["confusion"](
        _contig(np.asarray(golds, dtype=np.int64)), _contig(np.asarray(preds, dtype=np.int64)), n
    )
