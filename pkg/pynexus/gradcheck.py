from typing import Callable, Sequence

import numpy as np

from pynexus.tensor import Array, DiffArray, Tape


def numerical_gradient(f: Callable[[], float], values: Array, h: float = 1e-5) -> Array:
    """Central-difference gradient of ``f`` w.r.t. ``values``, perturbed in place."""
    flat = values.reshape(-1)
    if not np.shares_memory(flat, values):
        raise ValueError("Values must be a contiguous array")
    grad = np.zeros(flat.size)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        f_plus = f()
        flat[i] = original - h
        f_minus = f()
        flat[i] = original
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(values.shape)


def relative_error(analytic: Array, numeric: Array, atol: float = 1e-7) -> float:
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if scale <= atol:
        return 0.0 if diff <= atol else float("inf")
    return diff / scale


def check_gradients(
    loss_fn: Callable[[], DiffArray],
    arrays: Sequence[DiffArray],
    *,
    h: float = 1e-5,
    atol: float = 1e-7,
) -> list[float]:
    """Worst-case relative error of the tape gradient of each array in ``arrays``.

    ``loss_fn`` must rebuild the scalar loss from the current values of ``arrays``.
    """
    for array in arrays:
        array.requires_grad = True
        array.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [np.array(a.grad) for a in arrays]

    def value() -> float:
        return loss_fn().item()

    return [
        relative_error(grad, numerical_gradient(value, array.values, h), atol)
        for array, grad in zip(arrays, analytic)
    ]
