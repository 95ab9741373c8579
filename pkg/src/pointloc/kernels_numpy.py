"""Pure NumPy kernels.

Convolutions are evaluated as matrix products over an im2col patch matrix so
the heavy lifting lands in BLAS. The backward-input pass is phrased as a full
correlation of the zero-padded upstream gradient with flipped weights, which
is again a single matrix product (no scatter-add needed).
"""

import numpy as np


def im2col(x, k):
    """Patch matrix of shape (C*k*k, Ho*Wo) for a valid k x k convolution."""
    c, h, w = x.shape
    if k == 1:
        return x.reshape(c, h * w)
    ho, wo = h - k + 1, w - k + 1
    v = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    return np.ascontiguousarray(v.transpose(0, 3, 4, 1, 2)).reshape(c * k * k, ho * wo)


def conv2d_forward(x, w, b):
    o, c, k, _ = w.shape
    ho, wo = x.shape[1] - k + 1, x.shape[2] - k + 1
    out = w.reshape(o, c * k * k) @ im2col(x, k)
    out += b[:, None]
    return out.reshape(o, ho, wo)


def conv2d_backward_input(gout, w):
    """Gradient w.r.t. the conv input (full correlation with flipped kernels)."""
    o, c, k, _ = w.shape
    _, ho, wo = gout.shape
    h, w_in = ho + k - 1, wo + k - 1
    if k == 1:
        gin = w.reshape(o, c).T @ gout.reshape(o, ho * wo)
        return gin.reshape(c, h, w_in)
    gpad = np.zeros((o, ho + 2 * (k - 1), wo + 2 * (k - 1)), dtype=gout.dtype)
    gpad[:, k - 1 : k - 1 + ho, k - 1 : k - 1 + wo] = gout
    cols = im2col(gpad, k)
    wflip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(
        c, o * k * k
    )
    return (wflip @ cols).reshape(c, h, w_in)


def conv2d_backward_weight(gout, x, k):
    o, ho, wo = gout.shape
    c = x.shape[0]
    gw = gout.reshape(o, ho * wo) @ im2col(x, k).T
    return gw.reshape(o, c, k, k)


def maxpool_forward(x):
    """2x2/stride-2 max pool. Returns (out, idx) with idx in {0,1,2,3} encoding
    the in-window argmax in row-major order (ties resolve to the first)."""
    c, h, w = x.shape
    win = np.ascontiguousarray(
        x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4)
    ).reshape(c, h // 2, w // 2, 4)
    idx = win.argmax(axis=3).astype(np.uint8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=3)[..., 0]
    return out, idx


def maxpool_backward(gout, idx):
    c, ho, wo = gout.shape
    win = np.zeros((c, ho, wo, 4), dtype=gout.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), gout[..., None], axis=3)
    return np.ascontiguousarray(
        win.reshape(c, ho, wo, 2, 2).transpose(0, 1, 3, 2, 4)
    ).reshape(c, ho * 2, wo * 2)


def elu_forward(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def elu_backward(gout, out):
    # d/dx elu(x) = 1 for x>0 else exp(x) = elu(x)+1; out>0 iff x>0.
    return gout * np.where(out > 0, out.dtype.type(1), out + 1)
