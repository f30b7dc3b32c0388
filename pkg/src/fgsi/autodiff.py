"""Dense float64 tensors with a recording tape and reverse-mode gradients.

Every differentiable quantity in the model is built from the primitives in
this module.  Arrays are numpy ``float64``; integer index arrays used for
gathers and segment reductions are plain numpy and never differentiated.

Usage::

    x = Tensor([0.3, -1.2], requires_grad=True)
    with Tape() as tape:
        loss = sum_all(tanh(x))
    grads = backward(tape, loss)
    grads[x]
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operands do not conform to the primitive's shape rule."""

    def __init__(self, kind: str, *shapes):
        self.kind = kind
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{kind}: incompatible shapes {joined}")


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A float64 array plus a flag saying whether gradients should reach it."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> list[float]:
        return self.data.ravel().tolist()

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; each maps onto a recorded primitive
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as primitives run, so inputs always precede the node
    that consumes them.  Use as a context manager to make it the active tape.
    """

    nodes: list[Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("fgsi_tape", default=None)


class no_grad:
    """Suspend recording inside the block (forward passes for evaluation)."""

    def __enter__(self):
        self._token = _ACTIVE.set(None)

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)


def _emit(kind: str, inputs: tuple[Tensor, ...], out: np.ndarray, grad_fn) -> Tensor:
    out = np.asarray(out, dtype=DTYPE)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{kind}: non-finite output")
    tape = _ACTIVE.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.requires_grad = needs
    result.name = None
    if needs:
        tape.nodes.append(Node(kind, inputs, result, grad_fn))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _emit("exp", (a,), y, lambda g: (g * y,))


def log(a, floor: float = 0.0) -> Tensor:
    """Natural log; values below ``floor`` are clamped and get zero gradient."""
    a = as_tensor(a)
    x = a.data
    clamped = x < floor
    safe = np.where(clamped, floor, x)
    return _emit("log", (a,), np.log(safe), lambda g: (np.where(clamped, 0.0, g / safe),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def grad_fn(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2:  # matrix @ vector
            return np.outer(g, bd), ad.T @ g
        if bd.ndim == 2:  # vector @ matrix
            return bd @ g, np.outer(ad, g)
        return g * bd, g * ad

    return _emit("matmul", (a, b), ad @ bd, grad_fn)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _emit("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError("dot", a.shape, b.shape)
    return matmul(a, b)


# ---------------------------------------------------------------- shape plumbing


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(old),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = np.argsort(axes)
    return _emit("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inverse),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(p.shape for p in parts)) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _emit("concat", parts, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_rows(a, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the first axis."""
    a = as_tensor(a)
    n = a.shape[0]
    if not 0 <= start <= stop <= n:
        raise ShapeError("slice", a.shape, (start, stop))
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _emit("slice", (a,), a.data[start:stop].copy(), grad_fn)


def take_rows(table, index) -> Tensor:
    """Gather rows of ``table`` (embedding lookup); ``index`` may be any int array."""
    table = as_tensor(table)
    idx = np.asarray(index, dtype=np.intp)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError("take_rows", table.shape, idx.shape)
    shape = table.shape

    def grad_fn(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("take_rows", (table,), table.data[idx], grad_fn)


# ---------------------------------------------------------------- normalizers


def softmax(a) -> Tensor:
    """Softmax along the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    y = ez / ez.sum(axis=-1, keepdims=True)
    return _emit("softmax", (a,), y,
                 lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax(a) -> Tensor:
    """Log-softmax along the last axis, computed without forming tiny probabilities."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _emit("log_softmax", (a,), y, lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def cosine(a, b) -> Tensor:
    """Row-wise cosine similarity of two equally shaped arrays (last axis).

    A zero vector on either side yields 0 with zero gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("cosine", a.shape, b.shape)
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=-1))
    nb = np.sqrt((bd * bd).sum(axis=-1))
    ok = (na > 0) & (nb > 0)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    dots = (ad * bd).sum(axis=-1)
    y = np.where(ok, dots / (na_s * nb_s), 0.0)

    def grad_fn(g):
        gg = np.where(ok, g, 0.0)[..., None]
        inv = 1.0 / (na_s * nb_s)
        ga = gg * (bd * inv[..., None] - ad * (y / (na_s * na_s))[..., None])
        gb = gg * (ad * inv[..., None] - bd * (y / (nb_s * nb_s))[..., None])
        return ga, gb

    return _emit("cosine", (a, b), y, grad_fn)


# ---------------------------------------------------------------- segment reductions
#
# ``segments`` assigns each row of the input to one of ``count`` output rows.
# Rows may arrive in any order; empty segments produce zeros.


def _check_segments(kind: str, a: Tensor, segments, count: int) -> np.ndarray:
    seg = np.asarray(segments, dtype=np.intp)
    if seg.shape != a.shape[:1] or (seg.size and (seg.min() < 0 or seg.max() >= count)):
        raise ShapeError(kind, a.shape, seg.shape)
    return seg


def segment_sum(a, segments, count: int) -> Tensor:
    a = as_tensor(a)
    seg = _check_segments("segment_sum", a, segments, count)
    out = np.zeros((count,) + a.shape[1:])
    np.add.at(out, seg, a.data)
    return _emit("segment_sum", (a,), out, lambda g: (g[seg],))


def segment_mean(a, segments, count: int) -> Tensor:
    """Mean of the rows in each segment (mean over a token range)."""
    a = as_tensor(a)
    seg = _check_segments("segment_mean", a, segments, count)
    sizes = np.bincount(seg, minlength=count).astype(DTYPE)
    inv = np.where(sizes > 0, 1.0 / np.maximum(sizes, 1.0), 0.0)
    inv_b = inv.reshape((count,) + (1,) * (a.data.ndim - 1))
    out = np.zeros((count,) + a.shape[1:])
    np.add.at(out, seg, a.data)
    out *= inv_b
    return _emit("segment_mean", (a,), out, lambda g: ((g * inv_b)[seg],))


def segment_max(a, segments, count: int) -> Tensor:
    """Column-wise max over the rows of each segment.

    Gradient flows to the first row (in input order) attaining the max;
    empty segments yield 0 and pass no gradient.
    """
    a = as_tensor(a)
    seg = _check_segments("segment_max", a, segments, count)
    x = a.data
    if x.ndim == 1:
        x = x[:, None]
    rows, cols = x.shape
    out = np.full((count, cols), -np.inf)
    np.maximum.at(out, seg, x)
    empty = np.isneginf(out)
    # first row index per (segment, column) reaching the max
    hit = x == out[seg]
    row_ids = np.where(hit, np.arange(rows)[:, None], rows)
    first = np.full((count, cols), rows)
    np.minimum.at(first, seg, row_ids)
    out[empty] = 0.0
    col_ids = np.broadcast_to(np.arange(cols), (count, cols))
    valid = first < rows
    src_r, src_c = first[valid], col_ids[valid]
    in_shape = a.shape

    def grad_fn(g):
        g2 = g.reshape(count, cols)
        full = np.zeros((rows, cols))
        full[src_r, src_c] = g2[valid]
        return (full.reshape(in_shape),)

    return _emit("segment_max", (a,), out.reshape((count,) + in_shape[1:]), grad_fn)


def segment_softmax(a, segments, count: int) -> Tensor:
    """Softmax of a vector taken independently within each segment."""
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError("segment_softmax", a.shape)
    seg = _check_segments("segment_softmax", a, segments, count)
    x = a.data
    peak = np.full(count, -np.inf)
    np.maximum.at(peak, seg, x)
    ez = np.exp(x - peak[seg])
    denom = np.zeros(count)
    np.add.at(denom, seg, ez)
    y = ez / denom[seg]

    def grad_fn(g):
        inner = np.zeros(count)
        np.add.at(inner, seg, g * y)
        return (y * (g - inner[seg]),)

    return _emit("segment_softmax", (a,), y, grad_fn)


def range_max(a, start: int, stop: int) -> Tensor:
    """Max over rows ``start..stop-1`` (a masked range); empty range gives 0."""
    a = as_tensor(a)
    n = a.shape[0]
    seg = np.where((np.arange(n) >= start) & (np.arange(n) < stop), 0, 1)
    return take_rows(segment_max(a, seg, 2), [0])


def range_mean(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    n = a.shape[0]
    seg = np.where((np.arange(n) >= start) & (np.arange(n) < stop), 0, 1)
    return take_rows(segment_mean(a, seg, 2), [0])


# ---------------------------------------------------------------- reverse sweep


class Gradients:
    """Gradients from one backward sweep, looked up by tensor."""

    def __init__(self, table: dict[int, np.ndarray]):
        self._table = table

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._table.get(id(t))
        if g is None:
            return np.zeros(t.shape)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._table


def backward(tape: Tape, loss: Tensor, store: "ParamStore | None" = None) -> Gradients:
    """Reverse sweep over ``tape`` from the scalar ``loss``.

    When ``store`` is given, each parameter's gradient is added to its
    accumulator; parameters the loss does not reach receive nothing.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    table: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    if loss.requires_grad and not any(n.output is loss for n in reversed(tape.nodes)):
        raise ValueError("backward: loss was not produced on this tape")
    for node in reversed(tape.nodes):
        g = table.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.grad_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = table.get(id(inp))
            table[id(inp)] = gi if prev is None else prev + gi
    if store is not None:
        store.accumulate(table)
    return Gradients(table)


class ParamStore:
    """Named parameter tensors with gradient accumulators of matching shape."""

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self.params: dict[str, Tensor] = {}
        self.grads: dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        self.grads[name] = np.zeros(t.shape)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def items(self):
        return self.params.items()

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, table: dict[int, np.ndarray]) -> None:
        for name, t in self.params.items():
            g = table.get(id(t))
            if g is not None:
                self.grads[name] += g

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.data.copy() for k, v in self.params.items()})

    def num_elements(self) -> int:
        return sum(t.data.size for t in self.params.values())


# ---------------------------------------------------------------- gradient check


@dataclass
class ElementCheck:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float
    ok: bool
    note: str = ""


@dataclass
class GradCheckReport:
    elements: list[ElementCheck]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e.ok for e in self.elements)

    def failures(self) -> list[ElementCheck]:
        return [e for e in self.elements if not e.ok]

    def by_param(self) -> dict[str, tuple[bool, float]]:
        """Per parameter: (all elements ok, worst relative error)."""
        out: dict[str, tuple[bool, float]] = {}
        for e in self.elements:
            ok, worst = out.get(e.name, (True, 0.0))
            out[e.name] = (ok and e.ok, max(worst, e.rel_error))
        return out


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(closure: Callable[[], Tensor], store: ParamStore, h: float = 1e-5,
               tol: float = 1e-4, names: Sequence[str] | None = None) -> GradCheckReport:
    """Compare tape gradients of ``closure()`` with central differences.

    ``closure`` must rebuild the scalar loss from ``store`` deterministically.
    Parameters are perturbed in place and restored afterwards.
    """
    store_names = list(names) if names is not None else store.names()
    with Tape() as tape:
        loss = closure()
    grads = backward(tape, loss)
    elements = []
    for name in store_names:
        param = store[name]
        analytic = grads[param]
        flat = param.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            note = ""
            try:
                with no_grad():
                    flat[k] = orig + h
                    up = closure().item()
                    flat[k] = orig - h
                    down = closure().item()
                numeric = (up - down) / (2 * h)
                if not np.isfinite(numeric):
                    raise NonFiniteError("non-finite difference")
            except (NonFiniteError, FloatingPointError) as err:
                numeric = float("nan")
                note = f"non-finite loss under perturbation: {err}"
            finally:
                flat[k] = orig
            a = float(analytic.reshape(-1)[k])
            rel = relative_error(a, numeric) if not note else float("inf")
            index = tuple(int(i) for i in np.unravel_index(k, param.shape))
            elements.append(ElementCheck(name, index, a, numeric,
                                         rel, rel <= tol, note))
    return GradCheckReport(elements, tol)
