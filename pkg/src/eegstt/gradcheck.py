"""Central finite-difference check of reverse-mode gradients.

Both routes run in float64: the analytic route through a :class:`Tape`, the
numeric route through tape-free forward evaluations with one entry perturbed
at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckResult:
    name: str
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def max_rel_error(self):
        return relative_error(self.analytic, self.numeric)


def relative_error(analytic, numeric, floor=1e-6):
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is zero (or below the
    finite-difference noise level) from dividing by ~0.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def analytic_gradients(loss_fn, params):
    tensors = {k: Tensor(v, requires_grad=True, dtype=np.float64) for k, v in params.items()}
    with Tape() as tape:
        loss = loss_fn(tensors)
    grads = backward(loss, tape, params=list(tensors.values()))
    return dict(zip(tensors, grads))


def numeric_gradients(loss_fn, params, h=1e-4, names=None):
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    frozen = {k: Tensor(v, dtype=np.float64) for k, v in base.items()}
    out = {}
    for name in names or list(base):
        arr = base[name]
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            frozen[name] = Tensor(arr, dtype=np.float64)
            up = loss_fn(frozen).item()
            flat[i] = orig - h
            frozen[name] = Tensor(arr, dtype=np.float64)
            down = loss_fn(frozen).item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        frozen[name] = Tensor(arr, dtype=np.float64)
        out[name] = grad
    return out


def gradient_check(loss_fn, params, h=1e-4):
    """Compare tape gradients of ``loss_fn`` with central differences.

    ``loss_fn`` maps a dict of tensors to a scalar tensor. Returns one
    :class:`GradCheckResult` per parameter, in ``params`` order.
    """
    ana = analytic_gradients(loss_fn, params)
    num = numeric_gradients(loss_fn, params, h=h)
    return [GradCheckResult(k, ana[k], num[k]) for k in params]
