"""Differentiable operations over Tensor.

Exactly the ops the localization architecture needs: valid convolutions,
2x2 max pooling, ELU, spatial/vector softmax, fully connected layers and the
small pointwise/reduction helpers that glue them into losses. Each op
computes its forward value through the kernels dispatch layer and records a
backward closure on the active tape.
"""

import numpy as np

from . import kernels as K
from .tensor import ShapeError, Tensor, record_op


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def conv2d_valid(x, w, b):
    """Valid (unpadded) 2-D convolution, stride 1.

    x: (C, H, W); w: (O, C, k, k) with k in {1, 3}; b: (O,).
    Output: (O, H-k+1, W-k+1).
    """
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d_valid input must be C x H x W, got shape {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d_valid weight must be O x C x k x k, got shape {w.shape}")
    o, c, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"conv2d_valid kernel must be square, got {k} x {k2}")
    if k not in (1, 3):
        raise ShapeError(f"conv2d_valid kernel size must be 1 or 3, got {k}")
    if x.shape[0] != c:
        raise ShapeError(
            f"conv2d_valid channel mismatch: input has {x.shape[0]} channels, weight expects {c}"
        )
    if x.shape[1] < k or x.shape[2] < k:
        raise ShapeError(
            f"conv2d_valid spatial extent {x.shape[1]} x {x.shape[2]} smaller than kernel {k}"
        )
    if b.shape != (o,):
        raise ShapeError(f"conv2d_valid bias must have shape ({o},), got {b.shape}")

    out = Tensor(K.conv2d_forward(x.data, w.data, b.data))
    xd, wd = x.data, w.data

    def bwd(g):
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=(1, 2)))
        if w.requires_grad:
            w.accumulate_grad(K.conv2d_backward_weight(g, xd, k))
        if x.requires_grad:
            x.accumulate_grad(K.conv2d_backward_input(g, wd))

    return record_op(out, (x, w, b), bwd)


def maxpool2x2(x):
    """2x2 max pooling, stride 2. Gradient routes to the argmax position,
    first in row-major scan on ties."""
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool2x2 input must be C x H x W, got shape {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even extents, got H={h}, W={w}")

    out_data, idx = K.maxpool_forward(x.data)
    out = Tensor(out_data)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(K.maxpool_backward(g, idx))

    return record_op(out, (x,), bwd)


def elu(x):
    """Elementwise x if x > 0 else exp(x) - 1."""
    out_data = K.elu_forward(x.data)
    out = Tensor(out_data)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(K.elu_backward(g, out_data))

    return record_op(out, (x,), bwd)


def spatial_softmax(x):
    """Softmax over all spatial positions of a single-channel map 1 x H x W."""
    if x.data.ndim != 3 or x.shape[0] != 1:
        raise ShapeError(f"spatial_softmax input must be 1 x H x W, got shape {x.shape}")
    flat = x.data.reshape(-1)
    e = np.exp(flat - flat.max())
    y = (e / e.sum()).reshape(x.shape)
    out = Tensor(y)

    def bwd(g):
        if x.requires_grad:
            gy = g * y
            x.accumulate_grad(gy - y * gy.sum())

    return record_op(out, (x,), bwd)


def softmax1d(x):
    """Softmax over a flat vector."""
    if x.data.ndim != 1:
        raise ShapeError(f"softmax1d input must be flat, got shape {x.shape}")
    e = np.exp(x.data - x.data.max())
    y = e / e.sum()
    out = Tensor(y)

    def bwd(g):
        if x.requires_grad:
            gy = g * y
            x.accumulate_grad(gy - y * gy.sum())

    return record_op(out, (x,), bwd)


def affine(x, w, b):
    """w @ x + b for flat x: w is (M, N), x is (N,), b is (M,)."""
    if x.data.ndim != 1:
        raise ShapeError(f"affine input must be flat, got shape {x.shape}")
    if w.data.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(
            f"affine weight columns ({w.shape[1] if w.data.ndim == 2 else w.shape}) "
            f"must equal input length ({x.shape[0]})"
        )
    if b.shape != (w.shape[0],):
        raise ShapeError(f"affine bias must have shape ({w.shape[0]},), got {b.shape}")
    out = Tensor(w.data @ x.data + b.data)
    xd, wd = x.data, w.data

    def bwd(g):
        if b.requires_grad:
            b.accumulate_grad(g)
        if w.requires_grad:
            w.accumulate_grad(np.outer(g, xd))
        if x.requires_grad:
            x.accumulate_grad(wd.T @ g)

    return record_op(out, (x, w, b), bwd)


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return record_op(out, (a, b), bwd)


def sub(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return record_op(out, (a, b), bwd)


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * bd)
        if b.requires_grad:
            b.accumulate_grad(g * ad)

    return record_op(out, (a, b), bwd)


def scale(x, s):
    s = x.dtype.type(s)
    out = Tensor(x.data * s)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * s)

    return record_op(out, (x,), bwd)


def sum_all(x):
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))

    return record_op(out, (x,), bwd)


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))
    orig = x.shape

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(orig))

    return record_op(out, (x,), bwd)


def flatten(x):
    return reshape(x, (-1,))


def channel_weighted_sum(x, attn):
    """out[c] = sum_{i,j} attn[i,j] * x[c,i,j] for x (C,H,W), attn (H,W)."""
    if x.data.ndim != 3:
        raise ShapeError(f"channel_weighted_sum input must be C x H x W, got {x.shape}")
    if attn.shape != x.shape[1:]:
        raise ShapeError(
            f"channel_weighted_sum attention shape {attn.shape} must match spatial extents {x.shape[1:]}"
        )
    c = x.shape[0]
    xmat = x.data.reshape(c, -1)
    aflat = attn.data.reshape(-1)
    out = Tensor(xmat @ aflat)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.outer(g, aflat).reshape(x.shape))
        if attn.requires_grad:
            attn.accumulate_grad((xmat.T @ g).reshape(attn.shape))

    return record_op(out, (x, attn), bwd)


def mse(pred, label):
    """Mean squared difference of two same-shape tensors (scalar output)."""
    d = sub(pred, label)
    return scale(sum_all(mul(d, d)), 1.0 / d.size)
