"""Reverse-mode autodiff core: Tensor values and a linear op Tape.

Tensors are dense row-major float32 buffers (float64 is accepted for the
shadow mode used by gradient checks). Ops in ops.py record one backward
closure per executed op on the active Tape; backward() replays the tape in
reverse. Tape recording and backward are single-threaded per training step;
forward evaluation with no active tape is pure and safe to run concurrently.
"""

import numpy as np

from .errors import ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


_ACTIVE_TAPE = None


class Tape:
    """Ordered record of executed ops; replayed in reverse by backward()."""

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes = []

    def record(self, out, backward_fn):
        self._nodes.append((out, backward_fn))

    def __len__(self):
        return len(self._nodes)

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; nesting is not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


def active_tape():
    return _ACTIVE_TAPE


def record_op(out, inputs, backward_fn):
    """Mark `out` as requiring grad and record `backward_fn` if a tape is
    active and any input participates in differentiation."""
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, backward_fn)
    return out


def backward(loss, tape):
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    Ops recorded after the one producing `loss`, or on dead branches, carry a
    missing upstream gradient and are skipped, so they contribute exactly
    zero.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    else:
        loss.grad.fill(1)
    for out, fn in reversed(tape._nodes):
        if out.grad is None:
            continue
        fn(out.grad)
