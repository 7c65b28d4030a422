"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

Values are always 2-D ``numpy`` arrays. Batched quantities keep the batch
along the rows, so a weight matrix ``W`` (out x in) acts on a batch ``X``
(B x in) as ``X @ W.T``.

Operations record onto the tape that is active in the current context
(``with Tape() as tape:``). Outside of a tape, operations are evaluated
eagerly without recording, which is what forward-only evaluation uses.

Example
-------
>>> w = Tensor([[3.0]], requires_grad=True)
>>> with Tape() as tape:
...     out = (w * w).sum()
>>> backward(tape, out)[w]
array([[6.]])
"""

from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "ShapeError",
    "NonFiniteError",
    "backward",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "affine",
    "transpose",
    "leaky_relu",
    "relu",
    "square",
    "sqrt",
    "sum",
    "mean",
    "concat",
    "slice2d",
    "clamp_min",
    "det",
    "axpy",
    "lincomb",
    "residual_mlp",
]

LEAKY_SLOPE = 0.01

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "sdnid_active_tape", default=None
)


class ShapeError(ValueError):
    """Operand shapes are incompatible with a primitive."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(map(str, shapes))}")


class NonFiniteError(FloatingPointError):
    """A forward value or gradient on the tape is NaN or infinite."""

    def __init__(self, node_id: int, op: str, where: str = "forward value"):
        self.node_id = node_id
        self.op = op
        super().__init__(f"non-finite {where} at tape node {node_id} ({op})")


class Tensor:
    """A 2-D float64 array, optionally a trainable leaf."""

    __slots__ = ("value", "requires_grad", "name", "_recorded")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError("tensor", arr.shape)
        self.value = arr
        self.requires_grad = requires_grad
        self.name = name
        self._recorded = False

    @classmethod
    def _wrap(cls, value: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.value = value
        t.requires_grad = requires_grad
        t.name = None
        t._recorded = requires_grad
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self._recorded

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.value, False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        rows, cols = key if isinstance(key, tuple) else (key, slice(None))
        return slice2d(self, rows, cols)

    def sum(self) -> "Tensor":
        return sum(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class _Node:
    __slots__ = ("op", "inputs", "out", "vjp")

    def __init__(self, op, inputs, out, vjp):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


class Tape:
    """Define-by-run record of primitive operations.

    A tape is finalized by :func:`backward` and must be :meth:`reset`
    before it records again.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.finalized = False
        self._token = None

    def __enter__(self) -> "Tape":
        if self.finalized:
            raise RuntimeError("tape was finalized by backward(); call reset() first")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self.finalized = False

    def record(self, op: str, inputs, out: Tensor, vjp) -> None:
        if self.finalized:
            raise RuntimeError("cannot record on a finalized tape")
        self.nodes.append(_Node(op, inputs, out, vjp))


class Gradients(dict):
    """Mapping from leaf :class:`Tensor` to its gradient array."""

    def __missing__(self, key):
        raise KeyError(f"no gradient recorded for {key!r}")

    def by_name(self) -> dict[str, np.ndarray]:
        return {t.name: g for t, g in self.items() if t.name is not None}

    def all_finite(self) -> bool:
        return all(np.isfinite(g).all() for g in self.values())

    # Tensors hash by identity, which is what a gradient map needs.


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: tuple[Tensor, ...], value: np.ndarray, vjp) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor._wrap(value, False)
    out = Tensor._wrap(value, True)
    tape.record(op, inputs, out, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    (ra, ca), (rb, cb) = a.shape, b.shape
    if (ra == rb or ra == 1 or rb == 1) and (ca == cb or ca == 1 or cb == 1):
        return
    raise ShapeError(op, a.shape, b.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit(
        "add", (a, b), a.value + b.value,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit(
        "sub", (a, b), a.value - b.value,
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a, b) -> Tensor:
    """Elementwise product with row/column broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return _emit(
        "mul", (a, b), av * bv,
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _emit(
        "div", (a, b), out,
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.value, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant."""
    c = float(c)
    return _emit("scale", (a,), a.value * c, lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _emit("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-batched dense layer ``x @ w.T + b``; ``b`` is a (1, out) row."""
    x = as_tensor(x)
    if x.shape[1] != w.shape[1]:
        raise ShapeError("affine", x.shape, w.shape)
    xv, wv = x.value, w.value
    out = xv @ wv.T
    if b is None:
        return _emit("affine", (x, w), out, lambda g: (g @ wv, g.T @ xv))
    if b.shape != (1, w.shape[0]):
        raise ShapeError("affine", x.shape, w.shape, b.shape)
    out += b.value
    return _emit(
        "affine", (x, w, b), out,
        lambda g: (g @ wv, g.T @ xv, g.sum(axis=0, keepdims=True)),
    )


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", (a,), a.value.T.copy(), lambda g: (g.T,))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    v = a.value
    mask = v > 0
    d = np.where(mask, 1.0, slope)
    return _emit("leaky_relu", (a,), v * d, lambda g: (g * d,))


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


def square(a: Tensor) -> Tensor:
    v = a.value
    return _emit("square", (a,), v * v, lambda g: (2.0 * g * v,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)
    return _emit("sqrt", (a,), out, lambda g: (0.5 * g / out,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _emit(
        "sum", (a,), np.array([[a.value.sum()]]),
        lambda g: (np.full(shape, g[0, 0]),),
    )


def mean(a: Tensor) -> Tensor:
    shape = a.shape
    n = a.value.size
    return _emit(
        "mean", (a,), np.array([[a.value.mean()]]),
        lambda g: (np.full(shape, g[0, 0] / n),),
    )


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    other = 1 - axis
    if any(p.shape[other] != parts[0].shape[other] for p in parts):
        raise ShapeError("concat", *(p.shape for p in parts))
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]
    value = np.concatenate([p.value for p in parts], axis=axis)
    return _emit(
        "concat", parts, value,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def slice2d(a: Tensor, rows=slice(None), cols=slice(None)) -> Tensor:
    """Basic (non-fancy) 2-D slicing; integer indices keep the axis."""
    if isinstance(rows, int):
        rows = slice(rows, rows + 1 if rows != -1 else None)
    if isinstance(cols, int):
        cols = slice(cols, cols + 1 if cols != -1 else None)
    shape = a.shape
    value = a.value[rows, cols]

    def vjp(g):
        full = np.zeros(shape)
        full[rows, cols] = g
        return (full,)

    return _emit("slice", (a,), value, vjp)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(floor, a)``.

    The subgradient is 1 where ``a > floor`` and 0 otherwise, including at
    the kink.
    """
    v = a.value
    mask = v > floor
    # np.maximum propagates NaN, so a corrupted raw value is not silently clamped
    return _emit("clamp_min", (a,), np.maximum(v, floor), lambda g: (g * mask,))


def _cofactors(m: np.ndarray) -> np.ndarray:
    n = m.shape[0]
    if n == 1:
        return np.ones((1, 1))
    cof = np.empty_like(m)
    for i in range(n):
        for j in range(n):
            minor = np.delete(np.delete(m, i, axis=0), j, axis=1)
            cof[i, j] = (-1) ** (i + j) * np.linalg.det(minor)
    return cof


def det(a: Tensor) -> Tensor:
    """Determinant of a square matrix; gradient is the cofactor matrix."""
    if a.shape[0] != a.shape[1]:
        raise ShapeError("det", a.shape)
    v = a.value
    return _emit(
        "det", (a,), np.array([[np.linalg.det(v)]]),
        lambda g: (g[0, 0] * _cofactors(v),),
    )


def axpy(x: Tensor, c, k: Tensor) -> Tensor:
    """``x + c * k`` where ``c`` is a float or a broadcastable tensor."""
    if not isinstance(c, Tensor):
        c = float(c)
        if x.shape != k.shape:
            raise ShapeError("axpy", x.shape, k.shape)
        return _emit("axpy", (x, k), x.value + c * k.value, lambda g: (g, c * g))
    _broadcast_shape("axpy", c, k)
    cv, kv = c.value, k.value
    return _emit(
        "axpy", (x, c, k), x.value + cv * kv,
        lambda g: (g, _unbroadcast(g * kv, cv.shape), g * cv),
    )


def lincomb(coeffs: Sequence[float], terms: Sequence[Tensor]) -> Tensor:
    """Constant-coefficient sum ``sum_i coeffs[i] * terms[i]`` of equal shapes."""
    coeffs = [float(c) for c in coeffs]
    shape = terms[0].shape
    if len(coeffs) != len(terms) or any(t.shape != shape for t in terms):
        raise ShapeError("lincomb", *(t.shape for t in terms))
    out = coeffs[0] * terms[0].value
    for c, t in zip(coeffs[1:], terms[1:]):
        out = out + c * t.value
    return _emit("lincomb", tuple(terms), out, lambda g: tuple(c * g for c in coeffs))


def residual_mlp(
    parts: Sequence[Tensor],
    hidden: Sequence[tuple[Tensor, Tensor]],
    w_out: Tensor,
    b_out: Tensor | None = None,
    lin: Tensor | None = None,
    slope: float = LEAKY_SLOPE,
) -> Tensor:
    """Fused residual network on the column-concatenation ``z`` of ``parts``.

    Computes ``lin z + w_out s(... s(z W^T + b) ...) + b_out`` in one tape
    node, equal to the composition of ``concat``, ``affine`` and
    ``leaky_relu``.
    """
    parts = tuple(as_tensor(p) for p in parts)
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise ShapeError("residual_mlp", *(p.shape for p in parts))
    z = parts[0].value if len(parts) == 1 else np.concatenate([p.value for p in parts], axis=1)
    width = z.shape[1]
    if hidden[0][0].shape[1] != width or (lin is not None and lin.shape[1] != width):
        raise ShapeError("residual_mlp", z.shape, hidden[0][0].shape)
    pres = []
    acts = [z]
    h = z
    for W, b in hidden:
        pre = h @ W.value.T
        pre += b.value
        h = np.maximum(pre, slope * pre) if 0.0 <= slope <= 1.0 else np.where(pre > 0, pre, slope * pre)
        pres.append(pre)
        acts.append(h)
    out = h @ w_out.value.T
    if b_out is not None:
        out += b_out.value
    if lin is not None:
        out += z @ lin.value.T
    if _ACTIVE_TAPE.get() is None:
        return Tensor._wrap(out, False)

    inputs = list(parts)
    for W, b in hidden:
        inputs += [W, b]
    inputs.append(w_out)
    if b_out is not None:
        inputs.append(b_out)
    if lin is not None:
        inputs.append(lin)
    splits = [p.shape[1] for p in parts]

    def vjp(g):
        gw_out = g.T @ acts[-1]
        gh = g @ w_out.value
        hidden_grads = []
        for i in range(len(hidden) - 1, -1, -1):
            pre = pres[i]
            gpre = np.where(pre > 0, gh, slope * gh)
            hidden_grads.append((gpre.T @ acts[i], gpre.sum(axis=0, keepdims=True)))
            gh = gpre @ hidden[i][0].value
        gz = gh
        extra = []
        if b_out is not None:
            extra.append(g.sum(axis=0, keepdims=True))
        if lin is not None:
            gz = gz + g @ lin.value
            extra.append(g.T @ z)
        if len(parts) == 1:
            out_grads = [gz]
        else:
            out_grads, start = [], 0
            for w in splits:
                out_grads.append(gz[:, start : start + w])
                start += w
        for gW, gb in reversed(hidden_grads):
            out_grads += [gW, gb]
        out_grads.append(gw_out)
        return tuple(out_grads + extra)

    return _emit("residual_mlp", tuple(inputs), out, vjp)


def backward(
    tape: Tape, output: Tensor, wrt: Iterable[Tensor] | None = None
) -> Gradients:
    """Accumulate adjoints of ``output`` back to the trainable leaves.

    Parameters
    ----------
    tape
        The tape ``output`` was recorded on. It is finalized afterwards.
    output
        A (1, 1) tensor.
    wrt
        Leaves to report. Leaves that do not influence ``output`` get an
        exactly-zero gradient. Defaults to every trainable leaf on the tape.
    """
    if output.shape != (1, 1):
        raise ShapeError("backward (non-scalar output)", output.shape)
    tape.finalized = True
    nodes = tape.nodes
    if not np.isfinite(output.value).all():
        _raise_first_nonfinite(nodes)

    leaves: dict[int, Tensor] = {}
    if wrt is None:
        for node in nodes:
            for t in node.inputs:
                if t.requires_grad and t.is_leaf:
                    leaves[id(t)] = t
    else:
        for t in wrt:
            leaves[id(t)] = t

    adj: dict[int, np.ndarray] = {id(output): np.ones((1, 1))}
    for node in reversed(nodes):
        g = adj.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if not t.requires_grad:
                continue
            key = id(t)
            prev = adj.get(key)
            adj[key] = gi if prev is None else prev + gi

    grads = Gradients()
    for key, t in leaves.items():
        g = adj.get(key)
        grads[t] = np.zeros_like(t.value) if g is None else g
    if not grads.all_finite():
        _raise_first_nonfinite(nodes)
        raise NonFiniteError(-1, "backward", "gradient")
    return grads


def _raise_first_nonfinite(nodes) -> None:
    for i, node in enumerate(nodes):
        if not np.isfinite(node.out.value).all():
            raise NonFiniteError(i, node.op)


def value_and_grad(
    fn: Callable[[], Tensor], wrt: Sequence[Tensor]
) -> tuple[float, Gradients]:
    """Evaluate ``fn`` on a fresh tape and differentiate it."""
    with Tape() as tape:
        out = fn()
    return out.item(), backward(tape, out, wrt)
