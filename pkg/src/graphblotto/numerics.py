"""Small dense reverse-mode autodiff engine on top of numpy (float64).

Every op returns a new :class:`Tensor`. When grad mode is on and any input
requires a gradient, the output remembers its parents and a closure that
maps the output gradient to input gradients. :func:`backward` materialises
the :class:`Tape` for a scalar loss (all reachable recorded ops, in
recording order) and walks it in exact reverse.

Arrays may carry leading batch dimensions; element-wise ops follow numpy
broadcasting and reduce gradients back to the input shape.
"""

from __future__ import annotations

import contextlib
import itertools
import json
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

DTYPE = np.float64
LEAKY_SLOPE = 0.01
LN_EPS = 1e-5

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    def __init__(self, names: Sequence[str]):
        groups = sorted({n.split("/", 1)[0] for n in names})
        super().__init__(f"non-finite gradient in group(s) {groups}: {list(names)[:5]}")
        self.names = list(names)
        self.groups = groups


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_seq)
        self.name = name
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(out_data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- element-wise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _record(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def minimum(a, b) -> Tensor:
    """Element-wise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "minimum")
    take_a = a.data <= b.data
    return _record(np.where(take_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
                   "minimum")


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# ---------------------------------------------------------------- reductions / shape


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(out, ts, bw, "concat")


def index(a, idx) -> Tensor:
    """Basic or advanced indexing (row_select / embedding lookup / gather)."""
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(np.array(out, dtype=DTYPE), (a,), bw, "index")


def row_select(table, rows) -> Tensor:
    return index(table, np.asarray(rows, dtype=np.int64))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + b.shape[-1:])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# ---------------------------------------------------------------- normalisation / softmax


def layer_norm(x, weight=None, bias=None, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply the optional affine pair."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = g * xhat
        gxm = gx.mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    out = _record(xhat, (x,), bw, "layer_norm")
    if weight is not None:
        out = mul(out, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def _mask_array(scores: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return np.ones(scores.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    try:
        return np.broadcast_to(mask, scores.shape)
    except ValueError:
        raise ShapeError(f"masked_softmax: mask {mask.shape} does not fit scores {scores.shape}") from None


def masked_softmax(scores, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` over positions where ``mask`` is True.

    Excluded positions are treated as -inf and come out exactly 0. A row
    with no allowed position is all zeros.
    """
    s = as_tensor(scores)
    keep = _mask_array(s.data, mask)
    z = np.where(keep, s.data, -np.inf)
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(keep, np.exp(np.where(keep, s.data - m, 0.0)), 0.0)
    tot = e.sum(axis=axis, keepdims=True)
    out = e / np.where(tot > 0, tot, 1.0)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (s,), bw, "masked_softmax")


def softmax(scores, axis: int = -1) -> Tensor:
    return masked_softmax(scores, None, axis)


def masked_log_softmax(scores, mask=None, axis: int = -1) -> Tensor:
    """Log-softmax over allowed positions; excluded positions hold 0."""
    s = as_tensor(scores)
    keep = _mask_array(s.data, mask)
    z = np.where(keep, s.data, -np.inf)
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(keep, np.exp(np.where(keep, s.data - m, 0.0)), 0.0)
    tot = e.sum(axis=axis, keepdims=True)
    lse = np.log(np.where(tot > 0, tot, 1.0)) + m
    out = np.where(keep, s.data - lse, 0.0)
    p = e / np.where(tot > 0, tot, 1.0)

    def bw(g):
        g = np.where(keep, g, 0.0)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(out, (s,), bw, "masked_log_softmax")


# ---------------------------------------------------------------- tape / backward


@dataclass
class Tape:
    """Recorded ops reachable from one loss, in recording order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._backward is not None:
                nodes.append(t)
                stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss._backward is None and loss.requires_grad:
        loss.grad = grads[id(loss)] if loss.grad is None else loss.grad + grads[id(loss)]
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    return tape


# ---------------------------------------------------------------- parameters


def init_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


class ParamStore:
    """Named parameters plus Adam moments. Names are ``group/sub/name``."""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.frozen: set[str] = set()
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} registered twice")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self.params[name] = t
        if not trainable:
            self.frozen.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def group(self, prefix: str) -> "OrderedDict[str, Tensor]":
        return OrderedDict((n, t) for n, t in self.params.items() if n.startswith(prefix))

    def merge(self, other: "ParamStore") -> None:
        for n, t in other.params.items():
            if n in self.params:
                raise KeyError(f"parameter {n!r} registered twice")
            self.params[n] = t
            if n in other.frozen:
                self.frozen.add(n)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def checksum(self, prefix: str = "") -> str:
        import hashlib

        h = hashlib.sha256()
        for n in self.names(prefix):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params[n].data).tobytes())
        return h.hexdigest()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data.copy()) for n, t in self.params.items())

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        for n, arr in state.items():
            if n not in self.params:
                if strict:
                    raise KeyError(f"unexpected parameter {n!r} in checkpoint")
                continue
            if tuple(arr.shape) != self.params[n].shape:
                raise ShapeError(f"checkpoint shape mismatch for {n}: {tuple(arr.shape)} vs {self.params[n].shape}")
            self.params[n].data = np.array(arr, dtype=DTYPE)
        if strict:
            missing = [n for n in self.params if n not in state]
            if missing:
                raise KeyError(f"checkpoint missing parameters: {missing[:5]}")


def adam_step(store: ParamStore, lr: float, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8, prefix: str = "") -> None:
    """One Adam update over trainable params under ``prefix``; grads are zeroed after.

    Raises :class:`NonFiniteGradient` (before touching any parameter) if a
    gradient holds NaN/Inf.
    """
    names = [n for n in store.names(prefix) if n not in store.frozen]
    bad = [n for n in names if store[n].grad is not None and not np.all(np.isfinite(store[n].grad))]
    if bad:
        for n in store.names(prefix):
            store[n].grad = None
        raise NonFiniteGradient(bad)
    b1, b2 = betas
    for n in names:
        p = store[n]
        g = p.grad
        if g is None:
            continue
        m = store._m.get(n)
        v = store._v.get(n)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        t = store._t.get(n, 0) + 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
        store._m[n], store._v[n], store._t[n] = m, v, t
    for n in store.names(prefix):
        store[n].grad = None


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def finite_difference_check(store: ParamStore, loss_fn: Callable[[], Tensor], tolerance: float = 1e-4,
                            h: float = 1e-4, names: Iterable[str] | None = None,
                            max_entries: int | None = None,
                            rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences, per parameter.

    The error for one parameter is ``max|g_analytic - g_numeric|`` divided by
    ``max(max|g_analytic|, max|g_numeric|)`` (absolute when both vanish).
    ``max_entries`` caps the number of probed coordinates per parameter.
    """
    names = list(names) if names is not None else store.names()
    store.zero_grad()
    loss = loss_fn()
    backward(loss)
    analytic = {n: (store[n].grad.copy() if store[n].grad is not None else np.zeros_like(store[n].data))
                for n in names}
    store.zero_grad()
    errors = {}
    with no_grad():
        for n in names:
            p = store[n]
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                coords = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
            num = np.zeros(len(coords))
            for k, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + h
                fp = loss_fn().item()
                flat[c] = orig - h
                fm = loss_fn().item()
                flat[c] = orig
                num[k] = (fp - fm) / (2 * h)
            ana = analytic[n].reshape(-1)[coords]
            scale_ = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0))
            diff = np.abs(ana - num).max(initial=0.0)
            errors[n] = float(diff / scale_) if scale_ > 1e-12 else float(diff)
    return GradCheckReport(errors, tolerance)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"GBLOTTO-CKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, store: ParamStore, prefix: str = "", meta: dict | None = None) -> None:
    """Write ``magic | u32 version | u64 header length | JSON header | raw little-endian f64``."""
    names = store.names(prefix)
    entries, blobs, offset = [], [], 0
    for n in names:
        arr = np.asarray(store[n].data, dtype="<f8", order="C")
        entries.append({"name": n, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def read_checkpoint(path: str | Path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a parameter checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<IQ", raw, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(raw[pos:pos + hlen])
    body = pos + hlen
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = body + e["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(e["shape"])
        out[e["name"]] = arr.astype(DTYPE)
    return out, header.get("meta", {})


def load_checkpoint(path: str | Path, store: ParamStore, prefix: str = "") -> dict:
    """Load tensors under ``prefix`` into ``store``; shape mismatches raise :class:`ShapeError`."""
    state, meta = read_checkpoint(path)
    want = set(store.names(prefix))
    state = OrderedDict((n, a) for n, a in state.items() if n.startswith(prefix))
    missing = want - set(state)
    if missing:
        raise KeyError(f"{path}: checkpoint lacks parameters {sorted(missing)[:5]}")
    store.load_state_dict(state, strict=False)
    return meta
