from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Sequence

import numpy as np

from .tensor import AutodiffError, Tape, Tensor, as_tensor


class ParameterStore(OrderedDict):
    """Ordered name -> Tensor map of learnable weights."""

    def __setitem__(self, name, value):
        if not isinstance(value, Tensor):
            value = Tensor(value)
        value.requires_grad = True
        value.name = name
        super().__setitem__(name, value)

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.items())

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for k, v in self.items():
            out[k] = Tensor(v.data.copy())
        return out

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore()
        for k, v in self.items():
            out[k] = Tensor(np.asarray(v.data, dtype=dtype))
        return out

    def load_arrays(self, arrays: dict) -> None:
        for k, arr in arrays.items():
            self[k] = Tensor(np.array(arr, dtype=self[k].dtype if k in self else np.float32))

    def num_elements(self) -> int:
        return int(sum(v.data.size for v in self.values()))


def _dual_inputs(inputs, tangents) -> list:
    if len(inputs) != len(tangents):
        raise ValueError("jvp needs one tangent per input")
    duals = []
    for x, v in zip(inputs, tangents):
        x = as_tensor(x)
        v = np.asarray(v, dtype=x.dtype)
        if v.shape != x.shape:
            v = np.broadcast_to(v, x.shape) if v.ndim == 0 else v
        if v.shape != x.shape:
            raise ValueError(f"tangent shape {v.shape} does not match input shape {x.shape}")
        dual = Tensor(x.data, tangent=np.array(v), requires_grad=x.requires_grad)
        duals.append(dual)
    return duals


def jvp(f: Callable, inputs: Sequence, tangents: Sequence):
    """Evaluate ``f(*inputs)`` and its directional derivative along ``tangents``.

    Returns ``(value, directional_derivative)`` where ``value`` is the output
    Tensor (recorded on any active tape, so it can still be differentiated
    in reverse mode) and the derivative is a plain array.
    """
    out = f(*_dual_inputs(inputs, tangents))
    tangent = out.tangent if out.tangent is not None else np.zeros_like(out.data)
    return out, tangent


def grad(loss_fn: Callable, params: "ParameterStore"):
    """Gradient of a scalar ``loss_fn(params)`` for every parameter.

    Returns ``(loss_value, {name: gradient})``.
    """
    with Tape() as tape:
        loss = loss_fn(params)
    if loss.data.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
    names = list(params.keys())
    grads = tape.gradient(loss, [params[n] for n in names])
    return float(loss.data), OrderedDict(zip(names, grads))


def finite_diff_directional(f: Callable, inputs: Sequence, tangents: Sequence, h: float = 1e-3):
    """Central-difference estimate (f(x + h v) - f(x - h v)) / 2h.

    ``f`` maps Tensors to a Tensor; evaluation happens in the inputs' dtype.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    plus, minus = [], []
    for x, v in zip(inputs, tangents):
        xd = as_tensor(x).data
        v = np.asarray(v, dtype=xd.dtype)
        plus.append(Tensor(xd + h * v))
        minus.append(Tensor(xd - h * v))
    fp = f(*plus).data
    fm = f(*minus).data
    return (fp - fm) / (2.0 * h)


def relative_error(a, b) -> float:
    """Norm-wise relative error ||a - b|| / max(||b||, tiny)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30))
