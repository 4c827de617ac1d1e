"""Dense tensors with tape-based reverse-mode differentiation.

Operations only record themselves while a :class:`DiffRecord` is active, so
plain forward passes (evaluation, finite differences) build no graph.
"""

from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_local = threading.local()


class DimensionError(ValueError):
    pass


def _stack() -> list:
    st = getattr(_local, "records", None)
    if st is None:
        st = _local.records = []
    return st


class DiffRecord:
    """Ordered list of differentiable operations executed inside ``with``.

    Replaying the list backwards is a valid reverse topological order because
    operations are appended in execution order.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "DiffRecord":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def backward(self, loss: "Tensor", params: Iterable["Tensor"] | None = None):
        return backward(loss, self, params)


def _active() -> DiffRecord | None:
    st = _stack()
    return st[-1] if st else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    arr = np.array(data, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float32)
    return Tensor(arr, requires_grad=True, name=name)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    rec = _active()
    if rec is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        rec.nodes.append(out)
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def fn(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), fn)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    return _lift(a, b), b


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (g * 0.5 / out,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN visible to downstream finiteness checks
    return _node(np.maximum(x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU ``x * Phi(x)`` with the Gaussian CDF via erf."""
    cdf = (0.5 * (1.0 + erf(x.data * _INV_SQRT2))).astype(x.dtype)

    def fn(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return _node(x.data * cdf, (x,), fn)


# ----------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), fn)


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out, dtype=x.dtype), (x,), fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_lift(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, xs, fn)


def take(x: Tensor, idx) -> Tensor:
    """Basic or fancy indexing; gradients scatter-add back."""
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    out = x.data[idx]

    def fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out, copy=True), (x,), fn)


# --------------------------------------------------------------- fused layers


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-max stabilised softmax along ``axis``."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), fn)


softmax_rows = softmax


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def fn(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return _node(out.astype(x.dtype), (x,), fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    lse = logsumexp(x, axis)
    return sub(x, reshape(lse, lse.shape[:axis % x.ndim] + (1,) + lse.shape[axis % x.ndim:]))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm width {d} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def fn(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _node(out.astype(x.dtype), (x, gain, bias), fn)


def batch_norm_train(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5):
    """Batch-statistics normalisation over axis 0 of a 2-D input.

    Returns the output tensor plus the (mean, biased variance) used.
    """
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def fn(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).sum(axis=0)
        if bias.requires_grad:
            gb = g.sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0))
        return gx, gg, gb

    return _node(out.astype(x.dtype), (x, gain, bias), fn), mu, var


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = sqrt(add(sum_(mul(x, x), axis, keepdims=True), eps))
    return div(x, norm)


# ------------------------------------------------------------------- backward


def backward(loss: Tensor, record: DiffRecord, params: Iterable[Tensor] | None = None):
    """Propagate d(loss) through ``record``; fills ``.grad`` on leaves.

    Tracked ``params`` the loss never reached receive zero gradients.
    Returns the list of parameter gradients in ``params`` order when given.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(record.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if p._backward is None:
                leaves[key] = p
            prev = grads.get(key)
            grads[key] = gp if prev is None else prev + gp
    if loss._backward is None and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, leaf in leaves.items():
        leaf.grad = np.asarray(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
    if params is None:
        return None
    out = []
    for p in params:
        if id(p) not in leaves:
            p.grad = np.zeros_like(p.data)
        out.append(p.grad)
    return out


# ----------------------------------------------------------------------- RNG


class Rng:
    """Counter-based (Philox) random stream.

    Child streams are derived from labels rather than from draws, so the
    numbers a component sees never depend on what other components drew.
    """

    def __init__(self, seed: int, *labels) -> None:
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.labels = tuple(labels)
        key = [self.seed & 0xFFFFFFFF, self.seed >> 32] + [_label_word(x) for x in labels]
        ss = np.random.SeedSequence(key)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def derive(self, *labels) -> "Rng":
        return Rng(self.seed, *self.labels, *labels)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def gamma(self, shape, size=None):
        return self.gen.standard_gamma(shape, size)

    def beta(self, a: float, b: float, size=None):
        x = self.gamma(a, size)
        y = self.gamma(b, size)
        return x / (x + y)

    def truncated_normal(self, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
        """Normal draws redrawn until inside two standard deviations."""
        out = self.gen.standard_normal(shape)
        bad = np.abs(out) > 2.0
        while bad.any():
            out[bad] = self.gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > 2.0
        return (out * std).astype(dtype)

    def subset(self, n: int, k: int, batch: int | None = None) -> np.ndarray:
        """Sorted uniform ``k``-subsets of ``range(n)`` (one per batch row)."""
        keys = self.gen.random((1 if batch is None else batch, n))
        idx = np.sort(np.argsort(keys, axis=1, kind="stable")[:, :k], axis=1)
        return idx[0] if batch is None else idx


def _label_word(x) -> int:
    if isinstance(x, (int, np.integer)):
        return int(x) & 0xFFFFFFFF
    digest = hashlib.sha256(str(x).encode()).digest()
    return int.from_bytes(digest[:4], "little")


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst: str = ""
    checked: int = 0
    per_param: dict[str, float] = field(default_factory=dict)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _nudged(f: Callable[[], Tensor], flat: np.ndarray, c: int, h: float, label: str) -> tuple[float, float]:
    old = flat[c]
    flat[c] = old + h
    fp = f().item()
    flat[c] = old - h
    fm = f().item()
    flat[c] = old
    if not (math.isfinite(fp) and math.isfinite(fm)):
        raise FloatingPointError(f"non-finite value perturbing {label}[{c}]")
    return fp, fm


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: Rng | None = None,
    analytic: Sequence[np.ndarray] | None = None,
    floor: float = 1e-5,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``f`` is re-evaluated with each parameter coordinate nudged in place;
    ``max_coords`` caps coordinates per parameter (sampled with ``rng``).
    ``analytic`` overrides the backward gradients (used for negative controls).
    Gradients smaller than ``floor`` in magnitude are compared absolutely.
    Coordinates failing the two-point estimate are re-tested with a
    four-point stencil, whose truncation error is O(h^4).
    ``names`` labels the parameters in the report (default: ``Tensor.name``).
    """
    if analytic is None:
        with DiffRecord() as rec:
            loss = f()
        analytic = backward(loss, rec, params)
    rng = rng or Rng(0, "grad_check")
    worst, worst_name, checked = 0.0, "", 0
    per_param: dict[str, float] = {}
    for pi, (p, ga) in enumerate(zip(params, analytic)):
        label = names[pi] if names is not None else (p.name or f"param[{pi}]")
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.gen.choice(flat.size, max_coords, replace=False))
        gflat = np.asarray(ga).reshape(-1)
        pworst = 0.0
        for c in coords:
            fp, fm = _nudged(f, flat, c, h, label)
            num = (fp - fm) / (2 * h)
            e = rel_err(float(gflat[c]), num, floor)
            if e > tol:
                # curvature-dominated coordinate: refine with the fourth-order stencil
                fp2, fm2 = _nudged(f, flat, c, 2 * h, label)
                num = (8 * (fp - fm) - (fp2 - fm2)) / (12 * h)
                e = rel_err(float(gflat[c]), num, floor)
            checked += 1
            if e > pworst:
                pworst = e
            if e > worst:
                worst, worst_name = e, f"{label}[{c}]"
        per_param[label] = pworst
    return GradCheckReport(worst, worst < tol, worst_name, checked, per_param)
