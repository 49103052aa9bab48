"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` is an immutable wrapper around a numpy array. Operations run
eagerly; when a :class:`Tape` is active and at least one input requires a
gradient, the op is appended to the tape together with a closure computing the
vector-Jacobian product. :func:`backward` replays the tape in reverse.

No tape active means no recording, which is how inference runs.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "hadamard",
    "elementwise",
    "sigmoid",
    "tanh",
    "leaky_relu",
    "activation",
    "absolute",
    "square",
    "sum_all",
    "concat",
    "concat_channels",
    "stack",
    "slice_axis",
    "reshape",
]


class NonFiniteError(FloatingPointError):
    """Raised as soon as an op produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

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

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable ops executed while the tape is active.

    Use as a context manager::

        with Tape() as tape:
            loss = model_loss(params)
        grads = backward(tape, loss, params)

    A tape belongs to one computation; do not share it across threads.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def _as_tensor(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    # any NaN/Inf makes the sum non-finite; the exact test only runs on that path
    with np.errstate(over="ignore", invalid="ignore"):
        total = arr.sum()
    if not np.isfinite(total) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    if _TAPES and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        _TAPES[-1].nodes.append(_Node(out, inputs, vjp))
        return out
    return Tensor(data)


def backward(
    tape: Tape,
    loss: Tensor,
    params: Mapping[str, Tensor] | None = None,
) -> dict:
    """Reverse-mode sweep over ``tape`` from the scalar ``loss``.

    With ``params`` given, returns ``{name: gradient array}`` for every entry,
    zeros for parameters that did not participate. Without it, returns a dict
    keyed by ``id(leaf)`` for every ``requires_grad`` leaf reached.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    for node in reversed(tape.nodes):
        produced.add(id(node.out))
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for arr in grads.values():
        _check_finite(arr, "backward")
    if params is None:
        return {k: v for k, v in grads.items() if k not in produced}
    out = {}
    for name, p in params.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else g.reshape(p.shape)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "data", None))
    b = _as_tensor(b, a.data)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "data", None))
    b = _as_tensor(b, a.data)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "data", None))
    b = _as_tensor(b, a.data)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), vjp, "mul")


hadamard = mul


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def elementwise(a, b, op: str) -> Tensor:
    """Same-shape elementwise ``add``, ``sub`` or ``hadamard``."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    try:
        fn = {"add": add, "sub": sub, "hadamard": mul}[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


# activations ---------------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    # exp of a non-positive argument only, so no overflow warnings
    xd = x.data
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    xd = x.data
    pos = xd > 0
    y = np.where(pos, xd, slope * xd)
    return _make(y, (x,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def activation(x: Tensor, kind: str, slope: float = 0.01) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    raise ValueError(f"unknown activation {kind!r}")


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    # sign(0) == 0 gives the zero subgradient at the kink
    return _make(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


# reductions and structure -------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    dtype = x.dtype
    return _make(
        np.asarray(x.data.sum(), dtype=dtype),
        (x,),
        lambda g: (np.broadcast_to(g, shape).astype(dtype),),
        "sum",
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def vjp(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                out.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make(data, tensors, vjp, "concat")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ValueError(f"cannot concat channels of {ref} and {t.shape}")
    return concat(tensors, axis=1)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(tensors)
    data = np.stack([t.data for t in tensors], axis=0)
    return _make(data, tensors, lambda g: tuple(g[i] for i in range(len(tensors))), "stack")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(x.data[idx], (x,), vjp, "slice")


def reshape(x: Tensor, shape: Iterable[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(old),), "reshape")
