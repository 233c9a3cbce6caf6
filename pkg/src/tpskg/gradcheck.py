"""Central finite-difference gradients for checking the tape."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tape, Tensor


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| scaled by the larger of max |n| and ``floor``.

    The floor keeps gradients that are identically zero in exact arithmetic
    (e.g. attention key biases) from turning round-off into huge ratios.
    """
    scale = max(float(np.abs(numeric).max(initial=0.0)), float(np.abs(analytic).max(initial=0.0)), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def check_gradients(loss_fn: Callable[[], Tensor], params: Iterable[tuple[str, Tensor]],
                    h: float = 1e-4) -> dict[str, float]:
    """Relative error of tape gradients vs central differences, per named tensor.

    The default step is larger than ``numerical_grad``'s: whole-model losses
    sum many terms, and round-off in the difference grows like eps / h.
    """
    params = list(params)
    for _, p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {name: np.array(p.grad, dtype=np.float64) for name, p in params}

    def value() -> float:
        return float(loss_fn().data)

    return {name: relative_error(analytic[name], numerical_grad(value, p.data, h)) for name, p in params}
