"""Numba JIT kernels: direct-loop twins of the NumPy kernels.

Each function matches the corresponding kernels_numpy signature and result
(bit-for-bit for pooling/ELU, up to float summation order for convolutions).
Importing this module requires numba; kernels.py guards the import and falls
back to the NumPy path when numba is unavailable.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, fastmath=True, cache=True)
def conv2d_forward(x, w, b):
    o_ch, c_ch, k, _ = w.shape
    ho, wo = x.shape[1] - k + 1, x.shape[2] - k + 1
    out = np.empty((o_ch, ho, wo), dtype=x.dtype)
    for o in prange(o_ch):
        for y in range(ho):
            for xx in range(wo):
                out[o, y, xx] = b[o]
        for c in range(c_ch):
            for dy in range(k):
                for dx in range(k):
                    wv = w[o, c, dy, dx]
                    for y in range(ho):
                        for xx in range(wo):
                            out[o, y, xx] += wv * x[c, y + dy, xx + dx]
    return out


@njit(parallel=True, fastmath=True, cache=True)
def conv2d_backward_input(gout, w):
    o_ch, c_ch, k, _ = w.shape
    _, ho, wo = gout.shape
    h, w_in = ho + k - 1, wo + k - 1
    gin = np.zeros((c_ch, h, w_in), dtype=gout.dtype)
    for c in prange(c_ch):
        for o in range(o_ch):
            for dy in range(k):
                for dx in range(k):
                    wv = w[o, c, dy, dx]
                    for y in range(ho):
                        for xx in range(wo):
                            gin[c, y + dy, xx + dx] += wv * gout[o, y, xx]
    return gin


@njit(parallel=True, fastmath=True, cache=True)
def conv2d_backward_weight(gout, x, k):
    o_ch, ho, wo = gout.shape
    c_ch = x.shape[0]
    gw = np.empty((o_ch, c_ch, k, k), dtype=gout.dtype)
    for o in prange(o_ch):
        for c in range(c_ch):
            for dy in range(k):
                for dx in range(k):
                    acc = gout.dtype.type(0)
                    for y in range(ho):
                        for xx in range(wo):
                            acc += gout[o, y, xx] * x[c, y + dy, xx + dx]
                    gw[o, c, dy, dx] = acc
    return gw


@njit(parallel=True, fastmath=True, cache=True)
def maxpool_forward(x):
    c_ch, h, w = x.shape
    ho, wo = h // 2, w // 2
    out = np.empty((c_ch, ho, wo), dtype=x.dtype)
    idx = np.empty((c_ch, ho, wo), dtype=np.uint8)
    for c in prange(c_ch):
        for y in range(ho):
            for xx in range(wo):
                v00 = x[c, 2 * y, 2 * xx]
                v01 = x[c, 2 * y, 2 * xx + 1]
                v10 = x[c, 2 * y + 1, 2 * xx]
                v11 = x[c, 2 * y + 1, 2 * xx + 1]
                best = v00
                k = np.uint8(0)
                if v01 > best:
                    best = v01
                    k = np.uint8(1)
                if v10 > best:
                    best = v10
                    k = np.uint8(2)
                if v11 > best:
                    best = v11
                    k = np.uint8(3)
                out[c, y, xx] = best
                idx[c, y, xx] = k
    return out, idx


@njit(parallel=True, fastmath=True, cache=True)
def maxpool_backward(gout, idx):
    c_ch, ho, wo = gout.shape
    gin = np.zeros((c_ch, ho * 2, wo * 2), dtype=gout.dtype)
    for c in prange(c_ch):
        for y in range(ho):
            for xx in range(wo):
                k = idx[c, y, xx]
                gin[c, 2 * y + k // 2, 2 * xx + k % 2] = gout[c, y, xx]
    return gin


@njit(parallel=True, fastmath=True, cache=True)
def elu_forward(x):
    out = np.empty_like(x)
    xf = x.ravel()
    of = out.ravel()
    for i in prange(xf.size):
        v = xf[i]
        of[i] = v if v > 0 else np.expm1(v)
    return out


@njit(parallel=True, fastmath=True, cache=True)
def elu_backward(gout, out):
    gin = np.empty_like(gout)
    gf = gout.ravel()
    of = out.ravel()
    rf = gin.ravel()
    for i in prange(gf.size):
        rf[i] = gf[i] if of[i] > 0 else gf[i] * (of[i] + 1)
    return gin
