"""Dense reverse-mode automatic differentiation on numpy float64 arrays.

Operations record themselves on the innermost active :class:`Tape` whenever one
of their operands requires a gradient.  Outside of a tape every operation is a
plain numpy computation, which is how evaluation and finite differences run.

    tape = Tape()
    with tape:
        P = tape.watch_all(params)
        loss = model_loss(P, batch)
    grads = tape.backward(loss)
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError, ValidationError

_ACTIVE: list["Tape"] = []


def _current_tape() -> "Tape | None":
    return _ACTIVE[-1] if _ACTIVE else None


class Value:
    """A tensor payload with a gradient slot, possibly recorded on a tape."""

    __slots__ = ("data", "requires_grad", "node_id", "name", "_grad")
    __array_ufunc__ = None  # make ``ndarray op Value`` dispatch to Value

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = None
        self._grad = None
        tape = _current_tape()
        if tape is not None and requires_grad:
            self.node_id = tape._new_id()

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(f"item() needs a single-element value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def lift(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.records: list[tuple[Value, tuple[Value, ...], Callable]] = []
        self.params: dict[str, Value] = {}
        self._ids = itertools.count()
        self._done = False

    def _new_id(self) -> int:
        return next(self._ids)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def watch(self, name: str, array) -> Value:
        if name in self.params:
            raise ValidationError(f"parameter {name!r} watched twice")
        v = Value(np.array(array, dtype=np.float64), requires_grad=True, name=name)
        if v.node_id is None:
            v.node_id = self._new_id()
        self.params[name] = v
        return v

    def watch_all(self, params: Mapping[str, np.ndarray]) -> dict[str, Value]:
        return {name: self.watch(name, arr) for name, arr in params.items()}

    def record(self, out: Value, inputs: tuple[Value, ...], backward: Callable) -> None:
        if self._done:
            raise ValidationError("tape already consumed by backward(); start a new tape")
        if out.node_id is None:
            out.node_id = self._new_id()
        self.records.append((out, inputs, backward))

    def clear(self) -> None:
        self.records.clear()
        self.params.clear()
        self._ids = itertools.count()
        self._done = False

    def backward(self, loss: Value) -> dict[str, np.ndarray]:
        """Propagate d(loss) back through the tape; return gradients by parameter name."""
        if self._done:
            raise ValidationError("backward() called twice on the same tape")
        loss = lift(loss)
        if loss.data.size != 1:
            raise ValidationError(f"backward: loss must be scalar, got shape {loss.shape}")
        self._done = True

        grads: dict[int, np.ndarray] = {}
        owners: dict[int, Value] = {}
        if loss.requires_grad:
            grads[id(loss)] = np.ones_like(loss.data)
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            out._grad = np.array(g)
            for v, gi in zip(inputs, fn(g)):
                if gi is None or not v.requires_grad:
                    continue
                key = id(v)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    owners[key] = v
        for key, g in grads.items():
            v = owners.get(key, loss if key == id(loss) else None)
            if v is not None:
                v._grad = np.array(g)
        return {name: v.grad.copy() for name, v in self.params.items()}


def backward(loss: Value, tape: Tape | None = None) -> dict[str, np.ndarray]:
    tape = tape or _current_tape()
    if tape is None:
        raise ValidationError("backward: no tape given and none active")
    return tape.backward(loss)


# --------------------------------------------------------------------------- helpers


def _result(data: np.ndarray, parents: tuple[Value, ...], backward: Callable) -> Value:
    tape = _current_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Value(data, requires_grad=needs)
    if needs:
        tape.record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(op: str, a: Value, b: Value) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --------------------------------------------------------------------------- elementwise


def add(a, b) -> Value:
    a, b = lift(a), lift(b)
    _broadcast_check("add", a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Value:
    a, b = lift(a), lift(b)
    _broadcast_check("sub", a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Value:
    a, b = lift(a), lift(b)
    _broadcast_check("mul", a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Value:
    a, b = lift(a), lift(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Value:
    a = lift(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Value:
    a = lift(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a) -> Value:
    a = lift(a)
    s = _sigmoid(a.data)
    return _result(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def sqrt(a) -> Value:
    """Square root whose derivative at exactly zero is taken as 0."""
    a = lift(a)
    out = np.sqrt(a.data)

    def back(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _result(out, (a,), back)


# --------------------------------------------------------------------------- reductions


def _norm_axis(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Value:
    a = lift(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(out, (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Value:
    a = lift(a)
    axes = _norm_axis(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    return mul(sum_(a, axes, keepdims), 1.0 / count)


def sqnorm(a, keepdims: bool = True) -> Value:
    """Squared L2 norm over the last axis."""
    a = lift(a)
    out = (a.data * a.data).sum(axis=-1, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = g[..., None]
        return (2.0 * g * a.data,)

    return _result(out, (a,), back)


def frobenius(a) -> Value:
    """Frobenius norm over the last two axes (kept as size-1 axes)."""
    a = lift(a)
    if a.ndim < 2:
        raise ShapeError("frobenius", a.shape)
    out = np.sqrt((a.data * a.data).sum(axis=(-2, -1), keepdims=True))

    def back(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * a.data / safe, 0.0),)

    return _result(out, (a,), back)


def softmax(a, mask: np.ndarray | None = None, axis: int = -1) -> Value:
    """Softmax over ``axis`` restricted to entries where ``mask`` is true.

    Masked entries are exactly zero in the output and receive exactly zero
    gradient.
    """
    a = lift(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ValidationError("softmax: a row has an empty mask")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), back)


# --------------------------------------------------------------------------- linear algebra


def matmul(a, b) -> Value:
    a, b = lift(a), lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return (ga, gb)

    return _result(a.data @ b.data, (a, b), back)


# --------------------------------------------------------------------------- structure


def concat(values: Sequence, axis: int = -1) -> Value:
    vs = [lift(v) for v in values]
    if not vs:
        raise ValidationError("concat: nothing to concatenate")
    ndim = vs[0].ndim
    ax = axis % ndim
    for v in vs[1:]:
        if v.ndim != ndim or any(
            v.shape[d] != vs[0].shape[d] for d in range(ndim) if d != ax
        ):
            raise ShapeError("concat", vs[0].shape, v.shape)
    sizes = [v.shape[ax] for v in vs]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(np.concatenate([v.data for v in vs], axis=ax), tuple(vs), back)


def stack(values: Sequence, axis: int = 0) -> Value:
    vs = [lift(v) for v in values]
    for v in vs[1:]:
        if v.shape != vs[0].shape:
            raise ShapeError("stack", vs[0].shape, v.shape)
    out = np.stack([v.data for v in vs], axis=axis)
    ax = axis % out.ndim

    def back(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(vs)))

    return _result(out, tuple(vs), back)


def _is_basic(key) -> bool:
    if not isinstance(key, tuple):
        key = (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (int, slice)) for k in key)


def index(a, key) -> Value:
    """``a[key]`` with numpy indexing semantics (basic or advanced)."""
    a = lift(a)
    out = a.data[key]
    basic = _is_basic(key)

    def back(g):
        z = np.zeros_like(a.data)
        if basic:
            z[key] = g
        else:
            np.add.at(z, key, g)
        return (z,)

    return _result(np.array(out), (a,), back)


def take(a, indices, axis: int = 0) -> Value:
    """Gather slices of ``a`` at integer ``indices`` along ``axis``."""
    a = lift(a)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim

    def back(g):
        z = np.zeros_like(a.data)
        zm = np.moveaxis(z, ax, 0)
        np.add.at(zm, idx, np.moveaxis(g, ax, 0))
        return (z,)

    return _result(np.take(a.data, idx, axis=ax), (a,), back)


def reshape(a, shape) -> Value:
    a = lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Value:
    a = lift(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Value:
    a = lift(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, tuple(shape)) from None
    return _result(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


# --------------------------------------------------------------------------- parameters & Adam


class ParamStore(Mapping):
    """Named float64 tensors in a stable insertion order."""

    def __init__(self, items=None):
        self._data: dict[str, np.ndarray] = {}
        if items is not None:
            pairs = items.items() if isinstance(items, Mapping) else items
            for name, arr in pairs:
                self._data[name] = np.array(arr, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __setitem__(self, name: str, arr) -> None:
        self._data[name] = np.array(arr, dtype=np.float64)

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        return f"ParamStore({len(self)} tensors, {self.size} scalars)"

    @property
    def size(self) -> int:
        return sum(a.size for a in self._data.values())

    def copy(self) -> "ParamStore":
        return ParamStore(self._data)

    def bitwise_equal(self, other: Mapping) -> bool:
        if list(self) != list(other):
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == np.asarray(other[k]).tobytes()
            for k in self
        )


@dataclass
class AdamState:
    lr: float = 5e-3
    weight_decay: float = 1e-12
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, grads: Mapping[str, np.ndarray], state: AdamState) -> ParamStore:
    """One bias-corrected Adam update with coupled (L2) weight decay.

    ``state`` is advanced in place; a new :class:`ParamStore` is returned.
    """
    if set(grads) != set(params):
        missing = sorted(set(params) - set(grads))
        extra = sorted(set(grads) - set(params))
        raise ValidationError(f"adam_step: gradient names mismatch (missing={missing}, extra={extra})")
    for name in params:
        g = np.asarray(grads[name])
        if g.shape != params[name].shape:
            raise ShapeError(f"adam_step[{name}]", params[name].shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"adam_step: non-finite gradient for parameter {name!r}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = ParamStore()
    for name, p in params.items():
        g = np.asarray(grads[name]) + state.weight_decay * p
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# --------------------------------------------------------------------------- gradient checking


def _evaluate(f: Callable, params: Mapping[str, np.ndarray]) -> float:
    val = f(params)
    val = val.data if isinstance(val, Value) else np.asarray(val, dtype=np.float64)
    if val.size != 1:
        raise ValidationError(f"finite_diff_check: f must return a scalar, got shape {val.shape}")
    out = float(val.reshape(-1)[0])
    if not math.isfinite(out):
        raise NumericalError("finite_diff_check: f returned a non-finite value")
    return out


def analytic_grads(f: Callable, params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    tape = Tape()
    with tape:
        watched = tape.watch_all(params)
        loss = f(watched)
    return tape.backward(loss)


def finite_diff_errors(f: Callable, params: Mapping[str, np.ndarray], eps: float = 1e-5) -> dict[str, float]:
    """Per-parameter max relative error between tape gradients and central differences."""
    if not eps > 0:
        raise ValidationError(f"finite_diff_check: eps must be positive, got {eps}")
    analytic = analytic_grads(f, params)
    probe = {name: np.array(arr, dtype=np.float64) for name, arr in params.items()}
    errors: dict[str, float] = {}
    for name, arr in probe.items():
        ga = analytic[name].reshape(-1)
        flat = arr.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _evaluate(f, probe)
            flat[i] = orig - eps
            fm = _evaluate(f, probe)
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            denom = max(abs(ga[i]), abs(num), 1e-8)
            worst = max(worst, abs(ga[i] - num) / denom)
        errors[name] = worst
    return errors


def finite_diff_check(f: Callable, params: Mapping[str, np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error of analytic vs central-difference gradients over all entries.

    ``f`` maps a name -> tensor mapping (arrays or tape Values) to a scalar.
    """
    errors = finite_diff_errors(f, params, eps)
    return max(errors.values(), default=0.0)
