"""Small reverse-mode autodiff over numpy arrays.

Every differentiable operation builds a node whose backward rule is itself
written with :class:`Tensor` operations. Calling :func:`grad` with
``create_graph=True`` therefore records the backward pass as a new graph, which
is what one-step MAML and the adversarial task loss need (grad-of-grad).
With ``create_graph=False`` the backward pass runs with recording switched off
and returns plain constants.

All values are float64.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "DiffContext",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "sin",
    "cos",
    "sqrt",
    "relu",
    "clip",
    "matmul",
    "reduce_sum",
    "mean",
    "amax",
    "reshape",
    "swapaxes",
    "broadcast_to",
    "sum_to",
    "concat",
    "take",
    "softmax",
    "log_softmax",
    "norm",
    "record",
    "Optimizer",
    "sgd",
    "adam",
    "step",
]


class _Mode(threading.local):
    def __init__(self) -> None:
        self.enabled = True
        self.depth = 0


_mode = _Mode()


def is_grad_enabled() -> bool:
    return _mode.enabled


@contextmanager
def _set_mode(enabled: bool):
    prev = _mode.enabled
    _mode.enabled = enabled
    try:
        yield
    finally:
        _mode.enabled = prev


def no_grad():
    """Context in which operations are not recorded."""
    return _set_mode(False)


def enable_grad():
    return _set_mode(True)


class DiffContext:
    """Scope that records operations and drops its graph on exit.

    Tensors created inside keep their values; leaving the context detaches
    every tensor registered through :meth:`keep`, so nothing recorded inside
    outlives the scope.
    """

    def __init__(self) -> None:
        self.depth = 0
        self._kept: list[Tensor] = []
        self._prev = True

    def __enter__(self) -> "DiffContext":
        self._prev = _mode.enabled
        _mode.enabled = True
        _mode.depth += 1
        self.depth = _mode.depth
        return self

    def keep(self, t: "Tensor") -> "Tensor":
        self._kept.append(t)
        return t

    def __exit__(self, *exc) -> None:
        for t in self._kept:
            t._parents = ()
            t._backward = None
        self._kept.clear()
        _mode.depth -= 1
        _mode.enabled = self._prev


class Tensor:
    """A float64 array that may participate in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return amax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    if _mode.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# shape helpers
# ---------------------------------------------------------------------------

def _broadcast_shape(a: tuple, b: tuple, opname: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ValueError(f"{opname}: shapes {a} and {b} do not broadcast") from None


def _sum_to_array(x: np.ndarray, shape: tuple) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    out = x.sum(axis=axes, keepdims=True)
    if lead:
        out = out.reshape(out.shape[lead:])
    return out.reshape(shape)


def sum_to(a, shape: tuple) -> Tensor:
    """Sum a broadcast array back down to ``shape`` (adjoint of broadcast_to)."""
    a = _as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    in_shape = a.shape
    return _node(
        _sum_to_array(a.data, shape), (a,), lambda g: (broadcast_to(g, in_shape),)
    )


def broadcast_to(a, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ValueError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    in_shape = a.shape
    return _node(data, (a,), lambda g: (sum_to(g, in_shape),))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(neg(g), sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    sa, sb = a.shape, b.shape
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (
            sum_to(mul(g, b), sa) if a.requires_grad else None,
            sum_to(mul(g, a), sb) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = sum_to(div(g, b), sa) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), sb) if b.requires_grad else None
        return ga, gb

    return _node(a.data / b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (neg(g),))


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    if p == 2.0:
        return _node(a.data * a.data, (a,), lambda g: (mul(g, mul(a, 2.0)),))
    return _node(a.data**p, (a,), lambda g: (mul(g, mul(power(a, p - 1.0), p)),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = _node(np.exp(a.data), (a,), lambda g: (mul(g, out),))
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (div(g, a),))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    return _node(np.sin(a.data), (a,), lambda g: (mul(g, cos(a)),))


def cos(a) -> Tensor:
    a = _as_tensor(a)
    return _node(np.cos(a.data), (a,), lambda g: (neg(mul(g, sin(a))),))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = _node(np.sqrt(a.data), (a,), lambda g: (div(mul(g, 0.5), out),))
    return out


def relu(a) -> Tensor:
    """max(x, 0); the subgradient at 0 is 0."""
    a = _as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _node(a.data * mask, (a,), lambda g: (mul(g, mask),))


def clip(a, lo, hi) -> Tensor:
    """Elementwise clamp to ``[lo, hi]`` (constants); no gradient outside the range."""
    a = _as_tensor(a)
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    mask = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (mul(g, mask),))


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = sum_to(matmul(g, swapaxes(b, -1, -2)), sa)
        if b.requires_grad:
            if len(sb) == 2 and len(sa) > 2:
                # shared weight: contract the batch axes in one 2-D product
                a2 = reshape(a, (-1, sa[-1]))
                gb = matmul(swapaxes(a2, -1, -2), reshape(g, (-1, sb[-1])))
            else:
                gb = sum_to(matmul(swapaxes(a, -1, -2), g), sb)
        return ga, gb

    return _node(_matmul_array(a.data, b.data), (a, b), backward)


def _matmul_array(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.shape[-1] == 1:
        return x * y  # outer product; np.matmul is slow for this case
    if y.ndim == 2 and x.ndim > 2:
        return (x.reshape(-1, x.shape[-1]) @ y).reshape(x.shape[:-1] + (y.shape[-1],))
    return np.matmul(x, y)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _keepdims_shape(shape: tuple, axes: tuple) -> tuple:
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    in_shape = a.shape
    kd = _keepdims_shape(in_shape, axes)

    def backward(g):
        return (broadcast_to(reshape(g, kd), in_shape),)

    return _node(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(reduce_sum(a, axes, keepdims), 1.0 / count)


def amax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum along axes; gradient goes to the first maximal entry."""
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    in_shape = a.shape
    kd = _keepdims_shape(in_shape, axes)
    # move reduced axes to the back so argmax finds the lowest flat index
    keep = [i for i in range(a.ndim) if i not in axes]
    moved = np.transpose(a.data, keep + list(axes))
    flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
    idx = flat.argmax(axis=-1)
    onehot = np.zeros_like(flat)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    onehot = onehot.reshape(moved.shape)
    mask = np.transpose(onehot, np.argsort(keep + list(axes)))
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = out.reshape(kd) if keepdims else out

    def backward(g):
        return (mul(broadcast_to(reshape(g, kd), in_shape), mask),)

    return _node(out, (a,), backward)


def reshape(a, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    in_shape = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {in_shape} to {shape}") from None
    return _node(data, (a,), lambda g: (reshape(g, in_shape),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = _as_tensor(a)
    return _node(np.swapaxes(a.data, i, j), (a,), lambda g: (swapaxes(g, i, j),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: need at least one tensor")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts:
        if t.ndim != nd or any(
            t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax
        ):
            raise ValueError(
                f"concat: shapes {[t.shape for t in ts]} disagree off axis {axis}"
            )
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        out = []
        for k, t in enumerate(ts):
            if not t.requires_grad:
                out.append(None)
                continue
            sl = [slice(None)] * nd
            sl[ax] = slice(int(bounds[k]), int(bounds[k + 1]))
            out.append(take(g, tuple(sl)))
        return tuple(out)

    return _node(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), backward)


def take(a, idx) -> Tensor:
    """Basic or advanced indexing; the adjoint scatters with accumulation."""
    a = _as_tensor(a)
    in_shape = a.shape
    return _node(a.data[idx], (a,), lambda g: (_scatter(g, idx, in_shape),))


def _scatter(g: Tensor, idx, shape: tuple) -> Tensor:
    out = np.zeros(shape)
    np.add.at(out, idx, g.data)
    return _node(out, (g,), lambda gg: (take(gg, idx),))


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shift = np.max(a.data, axis=axis, keepdims=True)
    e = exp(sub(a, shift))
    return div(e, reduce_sum(e, axis, keepdims=True))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = sub(a, np.max(a.data, axis=axis, keepdims=True))
    return sub(shifted, log(reduce_sum(exp(shifted), axis, keepdims=True)))


def norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; gradient 0 where the norm is 0."""
    a = _as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis))
    in_shape = a.shape
    kd = _keepdims_shape(in_shape, _norm_axes(axis, a.ndim))
    out = Tensor(n)
    safe = np.where(n > 0, 0.0, 1.0).reshape(kd)

    def backward(g):
        denom = add(reshape(out, kd), safe)
        return (mul(broadcast_to(reshape(g, kd), in_shape), div(a, denom)),)

    if _mode.enabled and a.requires_grad:
        out.requires_grad = True
        out._parents = (a,)
        out._backward = backward
    return out


_PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "reduce-sum": reduce_sum,
    "relu": relu,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "slice": take,
    "softmax": softmax,
    "mean": mean,
}


def record(op: str, *inputs, **kwargs) -> Tensor:
    """Apply a named primitive, e.g. ``record("relu", x)``."""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown operation {op!r}; known: {sorted(_PRIMITIVES)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    wrt: Sequence[Tensor] | Tensor,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of a single-element ``output`` with respect to ``wrt``.

    Tensors that do not influence ``output`` get a zero gradient. With
    ``create_graph`` the returned gradients are themselves differentiable.
    """
    if output.size != 1:
        raise ValueError(f"grad: output must have one element, got shape {output.shape}")
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    want = {id(t): k for k, t in enumerate(targets)}
    result: list[Tensor | None] = [None] * len(targets)

    if output.requires_grad:
        order = _topo_order(output)
        grads: dict[int, Tensor] = {id(output): Tensor(np.ones(output.shape))}
        _mode.depth += 1
        try:
            with _set_mode(create_graph):
                for node in reversed(order):
                    g = grads.pop(id(node), None)
                    if g is None:
                        continue
                    k = want.get(id(node))
                    if k is not None:
                        result[k] = g
                    if node._backward is None:
                        continue
                    for p, pg in zip(node._parents, node._backward(g)):
                        if pg is None or not p.requires_grad:
                            continue
                        prev = grads.get(id(p))
                        grads[id(p)] = pg if prev is None else add(prev, pg)
        finally:
            _mode.depth -= 1

    out = [
        r if r is not None else Tensor(np.zeros(t.shape)) for r, t in zip(result, targets)
    ]
    if not create_graph:
        out = [o.detach() if o.requires_grad else o for o in out]
    return out


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class Optimizer:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")


def sgd(lr: float) -> Optimizer:
    return Optimizer("sgd", lr)


def adam(lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> Optimizer:
    return Optimizer("adam", lr, betas[0], betas[1], eps)


def step(
    opt: Optimizer,
    params: dict[str, Tensor],
    grads: dict[str, Tensor | np.ndarray],
) -> dict[str, Tensor]:
    """Apply one optimizer update; parameter arrays are replaced, not mutated."""
    garr = {}
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        garr[name] = g

    opt.t += 1
    if opt.kind == "sgd":
        for name, p in params.items():
            p.data = p.data - opt.lr * garr[name]
        return params

    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**opt.t
    c2 = 1.0 - b2**opt.t
    for name, p in params.items():
        g = garr[name]
        if name not in opt.m:
            opt.m[name] = np.zeros_like(g)
            opt.v[name] = np.zeros_like(g)
        # moments are owned by the optimizer, so they are updated in place
        m, v = opt.m[name], opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        tmp = np.multiply(g, g, out=np.empty_like(g))
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += opt.eps
        upd = m * (opt.lr / c1)
        upd /= tmp
        p.data = p.data - upd
    return params


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
