"""Hot kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time from ``AFFORDANCE_BACKEND``
(``numba`` or ``numpy``). When unset, numba is used if it imports.
Both paths perform the same floating-point operations in the same order,
so results agree bitwise; ``tests/test_kernels.py`` checks that.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _select_backend():
    requested = os.environ.get("AFFORDANCE_BACKEND", "").strip().lower()
    if requested not in ("", "numba", "numpy"):
        raise ValueError(
            f"AFFORDANCE_BACKEND must be 'numba' or 'numpy', got {requested!r}"
        )
    if requested == "numpy" or numba is None:
        return "numpy"
    return "numba"


BACKEND = _select_backend()


def conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


# --------------------------------------------------------------------------
# numpy reference path

def im2col_numpy(x, k, stride, pad):
    """(N, C, H, W) -> (N, C*k*k, Ho*Wo) patch matrix."""
    n, c, h, w = x.shape
    ho = conv_out_size(h, k, stride, pad)
    wo = conv_out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, k, k, ho, wo))
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + stride * ho:stride,
                                    kj:kj + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def col2im_numpy(cols, shape, k, stride, pad):
    """Adjoint of :func:`im2col_numpy`; overlapping patches are summed."""
    n, c, h, w = shape
    ho = conv_out_size(h, k, stride, pad)
    wo = conv_out_size(w, k, stride, pad)
    cols = cols.reshape(n, c, k, k, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki:ki + stride * ho:stride,
               kj:kj + stride * wo:stride] += cols[:, :, ki, kj]
    return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])


def adam_update_numpy(p, g, m, v, lr, beta1, beta2, eps, step):
    """Fused in-place Adam update on flat float64 buffers."""
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# --------------------------------------------------------------------------
# numba path

if numba is not None:

    @numba.njit(cache=True)
    def _im2col_nb(xp, k, stride, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        cols = np.empty((n, c, k, k, ho, wo))
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        for i in range(ho):
                            for j in range(wo):
                                cols[b, ch, ki, kj, i, j] = \
                                    xp[b, ch, ki + stride * i, kj + stride * j]
        return cols

    @numba.njit(cache=True)
    def _col2im_nb(cols, xp, k, stride, ho, wo):
        # ki/kj outermost so the summation order matches the numpy path
        n, c = xp.shape[0], xp.shape[1]
        for ki in range(k):
            for kj in range(k):
                for b in range(n):
                    for ch in range(c):
                        for i in range(ho):
                            for j in range(wo):
                                xp[b, ch, ki + stride * i, kj + stride * j] += \
                                    cols[b, ch, ki, kj, i, j]
        return xp

    @numba.njit(cache=True, error_model="numpy")
    def _adam_nb(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
        for i in range(p.shape[0]):
            mi = m[i] * beta1
            mi = mi + (1.0 - beta1) * g[i]
            vi = v[i] * beta2
            vi = vi + (1.0 - beta2) * (g[i] * g[i])
            m[i] = mi
            v[i] = vi
            p[i] = p[i] - lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)


def im2col_numba(x, k, stride, pad):
    n, c, h, w = x.shape
    ho = conv_out_size(h, k, stride, pad)
    wo = conv_out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return _im2col_nb(xp, k, stride, ho, wo).reshape(n, c * k * k, ho * wo)


def col2im_numba(cols, shape, k, stride, pad):
    n, c, h, w = shape
    ho = conv_out_size(h, k, stride, pad)
    wo = conv_out_size(w, k, stride, pad)
    cols = np.ascontiguousarray(cols).reshape(n, c, k, k, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    _col2im_nb(cols, xp, k, stride, ho, wo)
    return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])


def adam_update_numba(p, g, m, v, lr, beta1, beta2, eps, step):
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    _adam_nb(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2)


if BACKEND == "numba":
    im2col, col2im, adam_update = im2col_numba, col2im_numba, adam_update_numba
else:
    im2col, col2im, adam_update = im2col_numpy, col2im_numpy, adam_update_numpy
