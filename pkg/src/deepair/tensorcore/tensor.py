"""Tensors and the reverse-mode gradient tape."""

from __future__ import annotations

import threading

import numpy as np

from ..errors import NonFiniteError, ShapeError, TapeError

_state = threading.local()


def _tapes():
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


class Tensor:
    """A dense array with an optional gradient slot.

    Leaves created with ``requires_grad=True`` receive gradients from
    :func:`backward`; intermediate results never store one.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_leaf")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else None

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        from .ops import add
        return add(self, other)

    def __mul__(self, other):
        from .ops import mul
        return mul(self, other)

    def __sub__(self, other):
        from .ops import sub
        return sub(self, other)

    def __getitem__(self, key):
        from .ops import index
        return index(self, key)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class _Record:
    __slots__ = ("name", "inputs", "outputs", "backward")

    def __init__(self, name, inputs, outputs, backward):
        self.name = name
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


class Tape:
    """Records differentiable ops executed inside ``with Tape():``.

    A tape can be consumed by :func:`backward` exactly once.
    """

    def __init__(self):
        self.records = []
        self.consumed = False

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().remove(self)
        return False

    def __len__(self):
        return len(self.records)


def active_tape():
    stack = _tapes()
    return stack[-1] if stack else None


def check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"op {name} produced a non-finite value")


def record(name, inputs, outputs, backward_fn):
    """Wrap raw output arrays as tensors and log the op on the active tape.

    ``backward_fn`` receives one upstream gradient per output (None where the
    output did not receive any) and returns one gradient per input (None for
    inputs that need none).
    """
    single = not isinstance(outputs, tuple)
    outs = (outputs,) if single else outputs
    check_finite(name, *outs)
    needs = any(t.requires_grad for t in inputs)
    tensors = []
    for o in outs:
        t = Tensor(o)
        t._leaf = False
        t.requires_grad = needs
        t.grad = None
        tensors.append(t)
    tape = active_tape()
    if needs and tape is not None:
        tape.records.append(_Record(name, tuple(inputs), tuple(tensors), backward_fn))
    return tensors[0] if single else tuple(tensors)


def backward(loss, tape):
    """Reverse-mode pass from scalar ``loss``; accumulates into leaf ``grad`` slots."""
    if tape.consumed:
        raise TapeError("tape already consumed; record the forward pass again")
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape.consumed = True
    grads = {id(loss): np.ones_like(loss.data)}
    if loss._leaf:
        if loss.requires_grad:
            loss.grad += 1
        return
    for rec in reversed(tape.records):
        gouts = [grads.pop(id(o), None) for o in rec.outputs]
        if all(g is None for g in gouts):
            continue
        gins = rec.backward(*gouts)
        for inp, g in zip(rec.inputs, gins):
            if g is None or not inp.requires_grad:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient flowing out of op {rec.name}")
            if g.shape != inp.shape:
                raise ShapeError(f"op {rec.name} returned gradient {g.shape} for input {inp.shape}")
            if inp._leaf:
                inp.grad += g.astype(inp.grad.dtype, copy=False)
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = g if prev is None else prev + g
