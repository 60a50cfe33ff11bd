"""Tensor container, the reverse-mode tape, and the primitive-application hook.

A ``Tensor`` carries a primal buffer and, optionally, a tangent buffer of the
same shape. Tangents propagate eagerly (dual numbers); reverse-mode gradients
are recorded on the innermost active ``Tape``.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class AutodiffError(RuntimeError):
    pass


class UnsupportedPrimitiveError(AutodiffError):
    """Raised when a primitive lacks the derivative rule a pass needs."""

    def __init__(self, primitive: str, mode: str):
        self.primitive = primitive
        self.mode = mode
        super().__init__(f"primitive {primitive!r} has no {mode} rule")


class NonFiniteError(AutodiffError):
    def __init__(self, primitive: str):
        self.primitive = primitive
        super().__init__(f"non-finite values produced by primitive {primitive!r}")


_FLOAT_TYPES = (np.float32, np.float64)

# Checking every op for NaN/Inf costs roughly 10% of a training step; it is on
# by default and can be toggled with ``check_finite``.
_CHECK_FINITE = [True]


class check_finite:
    """Context manager toggling the per-primitive finiteness check."""

    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __enter__(self):
        self._prev = _CHECK_FINITE[0]
        _CHECK_FINITE[0] = self.enabled

    def __exit__(self, *exc):
        _CHECK_FINITE[0] = self._prev


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in _FLOAT_TYPES and isinstance(value, np.ndarray):
        return arr
    return arr.astype(np.float32)


class Tensor:
    """Float buffer with an optional tangent and a gradient-tracking flag.

    Buffers are float32 unless a float64 ndarray is passed in explicitly,
    which the finite-difference oracles use.
    """

    __slots__ = ("data", "tangent", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, tangent=None, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        if tangent is not None:
            tangent = _as_array(tangent, self.data.dtype)
            if tangent.shape != self.data.shape:
                raise ValueError(
                    f"tangent shape {tangent.shape} does not match primal shape {self.data.shape}"
                )
        self.tangent = tangent
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        extra = ", dual" if self.tangent is not None else ""
        extra += ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{extra})"

    def __len__(self):
        return self.data.shape[0]

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(_as_array(value, dtype))


class _Node:
    __slots__ = ("primitive", "out", "inputs", "vjp")

    def __init__(self, primitive, out, inputs, vjp):
        self.primitive = primitive
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_TAPES: list["Tape"] = []


class Tape:
    """Records primitive applications made while it is the active tape.

    Nodes are appended in execution order, so every node's inputs precede it
    and a reverse sweep over the list is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._closed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.reverse()
        _TAPES.remove(self)
        _TAPES.reverse()
        self._closed = True

    def __len__(self):
        return len(self.nodes)

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None) -> list:
        """Vector-Jacobian product of ``target`` w.r.t. ``sources``.

        ``seed`` defaults to ones for a scalar target. Sources that the target
        does not depend on receive zero arrays.
        """
        if seed is None:
            if target.data.size != 1:
                raise AutodiffError(
                    f"gradient needs a scalar target or an explicit seed, got shape {target.shape}"
                )
            seed = np.ones_like(target.data)
        grads = {id(target): np.asarray(seed, dtype=target.data.dtype)}
        wanted = {id(s) for s in sources}
        keep = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if id(node.out) in wanted:
                keep[id(node.out)] = g
            in_grads = node.vjp(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        keep.update({k: v for k, v in grads.items() if k in wanted})
        out = []
        for s in sources:
            g = keep.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else g.reshape(s.shape))
        return out


class no_grad:
    """Suspend recording on every tape inside the block."""

    def __enter__(self):
        _TAPES.append(None)

    def __exit__(self, *exc):
        _TAPES.pop()


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def apply(
    primitive: str,
    inputs: Sequence[Tensor],
    out: np.ndarray,
    jvp: Optional[Callable] = None,
    vjp: Optional[Callable] = None,
) -> Tensor:
    """Wrap a primitive's primal result, propagating tangents and recording vjp.

    ``jvp`` receives the input tangents (``None`` meaning zero) and returns the
    output tangent; it is only called when some input carries a tangent.
    """
    if _CHECK_FINITE[0] and not np.all(np.isfinite(out)):
        raise NonFiniteError(primitive)
    tangent = None
    tangents = [t.tangent for t in inputs]
    if any(t is not None for t in tangents):
        if jvp is None:
            raise UnsupportedPrimitiveError(primitive, "jvp")
        tangent = jvp(tangents)
        if tangent is not None:
            tangent = np.asarray(tangent, dtype=out.dtype)
            if tangent.shape != out.shape:
                tangent = np.broadcast_to(tangent, out.shape).copy()
    requires_grad = any(t.requires_grad for t in inputs)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.tangent = tangent
    result.requires_grad = False
    result.name = None
    tape = active_tape()
    if requires_grad and tape is not None:
        if vjp is None:
            raise UnsupportedPrimitiveError(primitive, "vjp")
        result.requires_grad = True
        tape.nodes.append(_Node(primitive, result, tuple(inputs), vjp))
    return result
