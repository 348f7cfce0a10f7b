"""Dense float64 arrays with define-by-run reverse-mode differentiation.

Operations executed inside ``with Tape() as tape:`` are recorded together with
their backward rules; ``backward(loss)`` replays the tape in reverse order and
accumulates gradients into every reachable array that requires them. Outside a
tape nothing is recorded, which is how inference runs.

All operations accept leading batch axes. Sequence operations (``unfold``,
``conv1d``, ``pointwise_conv``) act on the last two axes, ``(time, channel)``.
"""

import contextvars
import itertools
import logging
from dataclasses import dataclass
from types import TracebackType
from typing import Callable, Literal, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import ArrayLike, NDArray
from scipy import special


logger = logging.getLogger("pynexus.tensor")

Array = NDArray[np.float64]
Axes = Union[int, Sequence[int], None]
Operand = Union["DiffArray", ArrayLike]
BackwardRule = Callable[[Array], Sequence[Array | None]]
ConvMode = Literal["full", "depthwise"]

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class ContractError(Exception):
    pass


_node_ids = itertools.count()
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "pynexus_active_tape", default=None
)


class DiffArray:
    def __init__(self, values: ArrayLike, *, requires_grad: bool = False) -> None:
        self.values: Array = np.array(values, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.tape: Tape | None = None
        self._grad: Array | None = None

    @classmethod
    def _wrap(cls, values: Array) -> "DiffArray":
        array = cls.__new__(cls)
        array.values = np.ascontiguousarray(values, dtype=np.float64)
        array.requires_grad = False
        array.node_id = next(_node_ids)
        array.tape = None
        array._grad = None
        return array

    @property
    def grad(self) -> Array | None:
        if self.requires_grad and self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value: Array | None) -> None:
        self._grad = None if value is None else np.array(value, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"Array of shape {self.shape} is not a scalar")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> Array:
        return self.values.copy()

    def zero_grad(self) -> None:
        if self.requires_grad:
            self._grad = np.zeros_like(self.values)

    def detach(self) -> "DiffArray":
        return DiffArray(self.values)

    def _accumulate(self, grad: Array) -> None:
        if self._grad is None:
            self._grad = np.array(grad, dtype=np.float64)
        else:
            self._grad += grad

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray(shape={self.shape}{flag})"

    def __add__(self, other: Operand) -> "DiffArray":
        return add(self, other)

    def __radd__(self, other: Operand) -> "DiffArray":
        return add(other, self)

    def __sub__(self, other: Operand) -> "DiffArray":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "DiffArray":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "DiffArray":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "DiffArray":
        return mul(other, self)

    def __neg__(self) -> "DiffArray":
        return neg(self)

    def __matmul__(self, other: Operand) -> "DiffArray":
        return matmul(self, other)


def parameter(values: ArrayLike) -> DiffArray:
    return DiffArray(values, requires_grad=True)


def as_array(x: Operand) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


@dataclass
class Operation:
    name: str
    inputs: tuple[DiffArray, ...]
    output: DiffArray
    backward: BackwardRule


class Tape:
    """Ordered record of the operations of one forward pass.

    Recording order is topological by construction. With ``retain_grads=False``
    only leaf arrays (those not produced by a recorded operation) keep their
    gradients after ``backward``, which halves the memory of a training step.
    """

    def __init__(self, *, retain_grads: bool = True) -> None:
        self.operations: list[Operation] = []
        self.retain_grads = retain_grads
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        tb: TracebackType | None,
    ) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.operations)

    def record(self, operation: Operation) -> None:
        self.operations.append(operation)

    def backward(self, loss: DiffArray) -> None:
        if loss.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {loss.shape}"
            )
        if loss.tape is not self:
            raise ContractError("The loss was not produced on this tape")
        pending: dict[int, Array] = {loss.node_id: np.ones_like(loss.values)}
        leaves: dict[int, DiffArray] = {}
        for op in reversed(self.operations):
            grad = pending.pop(op.output.node_id, None)
            if grad is None:
                continue
            leaves.pop(op.output.node_id, None)
            if self.retain_grads:
                op.output._accumulate(grad)
            for array, array_grad in zip(op.inputs, op.backward(grad)):
                if array_grad is None or not array.requires_grad:
                    continue
                if array.node_id in pending:
                    pending[array.node_id] = pending[array.node_id] + array_grad
                else:
                    pending[array.node_id] = array_grad
                    leaves[array.node_id] = array
        for node_id, grad in pending.items():
            leaves[node_id]._accumulate(grad)
        logger.debug(f"Backward pass over {len(self.operations)} operations")


def backward(loss: DiffArray) -> None:
    if loss.tape is None:
        raise ContractError("The loss was computed outside of a Tape")
    loss.tape.backward(loss)


def _record(
    name: str, values: Array, inputs: tuple[DiffArray, ...], rule: BackwardRule
) -> DiffArray:
    out = DiffArray._wrap(values)
    tape = _active_tape.get()
    if tape is not None and any(a.requires_grad for a in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.record(Operation(name, inputs, out, rule))
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axes: Axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def add(a: Operand, b: Operand) -> DiffArray:
    a, b = as_array(a), as_array(b)

    def rule(g: Array) -> tuple[Array, Array]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.values + b.values, (a, b), rule)


def sub(a: Operand, b: Operand) -> DiffArray:
    a, b = as_array(a), as_array(b)

    def rule(g: Array) -> tuple[Array, Array]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.values - b.values, (a, b), rule)


def mul(a: Operand, b: Operand) -> DiffArray:
    a, b = as_array(a), as_array(b)

    def rule(g: Array) -> tuple[Array, Array]:
        return (
            _unbroadcast(g * b.values, a.shape),
            _unbroadcast(g * a.values, b.shape),
        )

    return _record("mul", a.values * b.values, (a, b), rule)


def neg(x: Operand) -> DiffArray:
    x = as_array(x)
    return _record("neg", -x.values, (x,), lambda g: (-g,))


def square(x: Operand) -> DiffArray:
    x = as_array(x)
    return _record("square", x.values**2, (x,), lambda g: (2.0 * g * x.values,))


def reshape(x: Operand, shape: Sequence[int]) -> DiffArray:
    x = as_array(x)
    try:
        values = x.values.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"Cannot reshape {x.shape} into {tuple(shape)}") from None
    return _record("reshape", values, (x,), lambda g: (g.reshape(x.shape),))


def take(x: Operand, index: int, axis: int) -> DiffArray:
    x = as_array(x)
    axis %= x.ndim

    def rule(g: Array) -> tuple[Array]:
        out = np.zeros_like(x.values)
        where: list[slice | int] = [slice(None)] * x.ndim
        where[axis] = index
        out[tuple(where)] = g
        return (out,)

    return _record("take", np.take(x.values, index, axis=axis), (x,), rule)


def reduce_sum(x: Operand, axes: Axes = None, *, keepdims: bool = False) -> DiffArray:
    x = as_array(x)
    norm = _normalize_axes(axes, x.ndim)

    def rule(g: Array) -> tuple[Array]:
        if not keepdims:
            g = np.expand_dims(g, norm)
        return (np.broadcast_to(g, x.shape),)

    return _record("sum", x.values.sum(axis=norm, keepdims=keepdims), (x,), rule)


def global_pool(x: Operand, axes: Axes = None, *, keepdims: bool = False) -> DiffArray:
    """Arithmetic mean over ``axes``."""
    x = as_array(x)
    norm = _normalize_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in norm]))

    def rule(g: Array) -> tuple[Array]:
        if not keepdims:
            g = np.expand_dims(g, norm)
        return (np.broadcast_to(g / count, x.shape),)

    values = x.values.mean(axis=norm, keepdims=keepdims)
    return _record("global_pool", values, (x,), rule)


def matmul(a: Operand, b: Operand) -> DiffArray:
    a, b = as_array(a), as_array(b)
    ranks_ok = (a.ndim == b.ndim == 2) or (
        a.ndim == b.ndim == 3 and a.shape[0] == b.shape[0]
    )
    if not ranks_ok or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"Cannot multiply {a.shape} by {b.shape}")

    def rule(g: Array) -> tuple[Array, Array]:
        return g @ np.swapaxes(b.values, -1, -2), np.swapaxes(a.values, -1, -2) @ g

    return _record("matmul", a.values @ b.values, (a, b), rule)


def pointwise_conv(x: Operand, w: Operand) -> DiffArray:
    """1×1 convolution: mixes the channel axis independently at every position."""
    x, w = as_array(x), as_array(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"Cannot mix channels of {x.shape} with weights {w.shape}")
    c_in, c_out = w.shape

    def rule(g: Array) -> tuple[Array, Array]:
        gx = g @ w.values.T
        gw = x.values.reshape(-1, c_in).T @ g.reshape(-1, c_out)
        return gx, gw

    return _record("pointwise_conv", x.values @ w.values, (x, w), rule)


def unfold(x: Operand, p: int, s: int) -> DiffArray:
    """Overlapping temporal patches: ``(..., T, D) -> (..., T', p*D)``.

    Patch ``i`` covers steps ``[i*s, i*s + p)`` with features laid out time-major.
    """
    x = as_array(x)
    if x.ndim < 2:
        raise ShapeError(f"unfold needs a (..., T, D) array, got {x.shape}")
    t, d = x.shape[-2:]
    if p < 1 or s < 1:
        raise ConfigurationError(f"Patch length {p} and stride {s} must be positive")
    if p > t:
        raise ConfigurationError(f"Patch length {p} exceeds sequence length {t}")
    n_patches = (t - p) // s + 1
    windows = sliding_window_view(x.values, p, axis=-2)[..., ::s, :, :]
    values = np.swapaxes(windows, -1, -2).reshape(*x.shape[:-2], n_patches, p * d)

    def rule(g: Array) -> tuple[Array]:
        g = g.reshape(*x.shape[:-2], n_patches, p, d)
        out = np.zeros_like(x.values)
        last = s * (n_patches - 1) + 1
        for j in range(p):
            out[..., j : j + last : s, :] += g[..., :, j, :]
        return (out,)

    return _record("unfold", values, (x,), rule)


def conv1d(x: Operand, kernel: Operand, mode: ConvMode = "depthwise") -> DiffArray:
    """Zero-padded "same" temporal cross-correlation over axis -2.

    Depthwise kernels are ``(W, C)`` (or ``(W,)``, shared by all channels); full
    kernels are ``(W, C_in, C_out)``.
    """
    x, kernel = as_array(x), as_array(kernel)
    if x.ndim < 2:
        raise ShapeError(f"conv1d needs a (..., T, C) array, got {x.shape}")
    width = kernel.shape[0] if kernel.ndim else 0
    if width < 1 or width % 2 == 0:
        raise ConfigurationError(f"Kernel width must be odd, got {width}")
    if mode == "depthwise":
        if kernel.ndim not in (1, 2) or (
            kernel.ndim == 2 and kernel.shape[1] != x.shape[-1]
        ):
            raise ShapeError(
                f"Depthwise kernel {kernel.shape} does not match input {x.shape}"
            )
    elif mode == "full":
        if kernel.ndim != 3 or kernel.shape[1] != x.shape[-1]:
            raise ShapeError(
                f"Full kernel {kernel.shape} does not match input {x.shape}"
            )
    else:
        raise ConfigurationError(f"Unknown convolution mode {mode!r}")

    t = x.shape[-2]
    pad = (width - 1) // 2
    padding = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.values, padding)
    shared = kernel.ndim == 1
    taps = kernel.values[:, None] if shared else kernel.values

    if mode == "depthwise":
        values = np.zeros_like(x.values)
        for k in range(width):
            values += xp[..., k : k + t, :] * taps[k]
    else:
        values = np.zeros((*x.shape[:-1], kernel.shape[2]))
        for k in range(width):
            values += xp[..., k : k + t, :] @ taps[k]

    def rule(g: Array) -> tuple[Array, Array]:
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(taps)
        for k in range(width):
            window = xp[..., k : k + t, :]
            if mode == "depthwise":
                gxp[..., k : k + t, :] += g * taps[k]
                per_channel = (window * g).reshape(-1, window.shape[-1]).sum(axis=0)
                gk[k] = per_channel.sum(keepdims=True) if shared else per_channel
            else:
                gxp[..., k : k + t, :] += g @ taps[k].T
                flat = window.reshape(-1, window.shape[-1])
                gk[k] = flat.T @ g.reshape(-1, g.shape[-1])
        return gxp[..., pad : pad + t, :], gk.reshape(kernel.shape)

    return _record(f"conv1d_{mode}", values, (x, kernel), rule)


def sigmoid(x: Operand) -> DiffArray:
    x = as_array(x)
    s = special.expit(x.values)
    return _record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x: Operand) -> DiffArray:
    x = as_array(x)
    return _record(
        "relu", np.maximum(x.values, 0.0), (x,), lambda g: (g * (x.values > 0.0),)
    )


def softmax(x: Operand, axis: int) -> DiffArray:
    x = as_array(x)
    s = special.softmax(x.values, axis=axis)

    def rule(g: Array) -> tuple[Array]:
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record("softmax", s, (x,), rule)


def layer_norm(x: Operand, axis: int = -1, eps: float = LAYER_NORM_EPS) -> DiffArray:
    x = as_array(x)
    n = x.shape[axis]
    if n < 2:
        raise DegenerateInputError(
            f"layer_norm needs at least 2 elements along axis {axis}, got {n}"
        )
    centered = x.values - x.values.mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=axis, keepdims=True) + eps)
    normed = centered * inv_std

    def rule(g: Array) -> tuple[Array]:
        g_sum = g.sum(axis=axis, keepdims=True)
        gn_sum = (g * normed).sum(axis=axis, keepdims=True)
        return (inv_std / n * (n * g - g_sum - normed * gn_sum),)

    return _record("layer_norm", normed, (x,), rule)


def dropout(
    x: Operand, rate: float, training: bool, rng: np.random.Generator | None
) -> DiffArray:
    x = as_array(x)
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"Dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("Dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record("dropout", x.values * mask, (x,), lambda g: (g * mask,))
