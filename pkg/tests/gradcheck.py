"""Central finite differences of the regularised loss, one entry at a time."""

import numpy as np

from flft import SparseTensor, loss, sgd_step

GROUPS = ("S", "M", "T", "a", "b", "c")


def _touched(model, entry):
    i, j, k, _ = entry
    return {"S": (i,), "M": (j,), "T": (k,), "a": (i,), "b": (j,), "c": (k,)}


def fd_gradients(model, entry, lam, step=1e-6, bias_once=True):
    """Gradient of the single-entry loss on every touched parameter."""
    data = SparseTensor(model.shape, [entry[:3]], [entry[3]])
    grads = {}
    for name, row in _touched(model, entry).items():
        arr = getattr(model, name)
        g = np.zeros(arr[row].shape)
        for pos in np.ndindex(g.shape):
            full = row + pos
            keep = arr[full]
            arr[full] = keep + step
            up = loss(model, data, lam, bias_reg_outside_rank=bias_once)
            arr[full] = keep - step
            down = loss(model, data, lam, bias_reg_outside_rank=bias_once)
            arr[full] = keep
            g[pos] = (up - down) / (2 * step)
        grads[name] = g
    return grads


def update_gradients(model, entry, lam):
    """Gradient implied by one plain SGD step with unit learning rate."""
    before = model.copy()
    trial = model.copy()
    sgd_step(trial, entry, 1.0, lam)
    out = {}
    for name, row in _touched(model, entry).items():
        out[name] = getattr(before, name)[row] - getattr(trial, name)[row]
    return out


def relative_errors(model, entry, lam, step=1e-6):
    fd = fd_gradients(model, entry, lam, step)
    an = update_gradients(model, entry, lam)
    return {g: np.linalg.norm(an[g] - fd[g]) / max(np.linalg.norm(fd[g]), 1e-300) for g in GROUPS}
