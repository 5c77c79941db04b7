"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .tensor import Tape, backward


def relative_error(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(loss_fn, tensors, step=1e-3, samples=None, rng=None, floor=1e-6):
    """Compare tape gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild the forward pass on each call and return a scalar
    tensor; ``tensors`` are leaves with ``requires_grad``. With ``samples``
    set, that many coordinates are drawn at random across all tensors,
    otherwise every coordinate is checked.

    Returns
    -------
    float
        Largest relative error seen.
    """
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    analytic = [t.grad.astype(np.float64).copy() for t in tensors]

    coords = [(k, i) for k, t in enumerate(tensors) for i in range(t.size)]
    if samples is not None and samples < len(coords):
        rng = np.random.default_rng(0) if rng is None else rng
        pick = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[j] for j in pick]

    worst = 0.0
    for k, i in coords:
        flat = tensors[k].data.reshape(-1)
        orig = flat[i].copy()
        flat[i] = orig + step
        up = float(np.asarray(loss_fn().data, dtype=np.float64))
        flat[i] = orig - step
        down = float(np.asarray(loss_fn().data, dtype=np.float64))
        flat[i] = orig
        numeric = (up - down) / (2 * step)
        err = float(relative_error(analytic[k].reshape(-1)[i], numeric, floor))
        worst = max(worst, err)
    return worst
