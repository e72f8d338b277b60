"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

Operations run eagerly.  While a :class:`Tape` is active, every operation
whose inputs require gradients is appended to it; ``backward`` then walks
the tape in reverse.  Outside a tape nothing is recorded, which is how
inference (beam search, evaluation) runs.

    >>> W = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape():
    ...     loss = sum(W * W)
    ...     backward(loss)
    >>> W.grad
    array([[2., 4.]])
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations; usable for exactly one backward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "_tape", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        v = np.asarray(value, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim != 2:
            raise ShapeError(f"Tensor: expected at most 2 dims, got shape {v.shape}")
        self.value = v
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._tape = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item: expected 1x1, got {self.shape}")
        return float(self.value[0, 0])

    def numpy(self):
        return self.value

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    __array_priority__ = 100

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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value, parents, backward_fn) -> Tensor:
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor.__new__(Tensor)
        out.value = value
        out.grad = None
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._tape = tape
        out.name = None
        tape.nodes.append(out)
        return out
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out._tape = None
    out.name = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _bshape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _bshape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _bshape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with row/column broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _bshape("mul", a, b)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


elementwise_mul = mul


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def linear(x, W, b=None) -> Tensor:
    """``x @ W + b`` as one node (b broadcast over rows)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[1] != W.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {W.shape}")
    xv, Wv = x.value, W.value
    if b is None:
        return _record(xv @ Wv, (x, W), lambda g: (g @ Wv.T, xv.T @ g))
    b = as_tensor(b)
    if b.shape != (1, W.shape[1]):
        raise ShapeError(f"linear: bias shape {b.shape} does not match {W.shape}")
    return _record(xv @ Wv + b.value, (x, W, b),
                   lambda g: (g @ Wv.T, xv.T @ g, g.sum(axis=0, keepdims=True)))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack tensors vertically (shared column count)."""
    parts = [as_tensor(p) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: mismatched shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.value for p in parts], axis=0), tuple(parts), back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Join tensors side by side (shared row count)."""
    parts = [as_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: mismatched shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.value for p in parts], axis=1), tuple(parts), back)


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if not (0 <= start <= stop <= x.shape[0]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {x.shape}")
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _record(x.value[start:stop], (x,), back)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if not (0 <= start <= stop <= x.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for {x.shape}")
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _record(x.value[:, start:stop], (x,), back)


def gather_rows(x, index) -> Tensor:
    """Rows ``x[index]``; repeated indices accumulate in the backward pass."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: index must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.shape}")
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(x.value[idx], (x,), back)


def pick(x, cols) -> Tensor:
    """One entry per row, ``x[r, cols[r]]``, as an (R, 1) column."""
    x = as_tensor(x)
    cols = np.asarray(cols, dtype=np.int64)
    if cols.shape != (x.shape[0],):
        raise ShapeError(f"pick: need {x.shape[0]} column indices, got shape {cols.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[rows, cols] = g[:, 0]
        return (out,)

    return _record(x.value[rows, cols].reshape(-1, 1), (x,), back)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        v = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    if v.ndim != 2:
        raise ShapeError(f"reshape: target {shape} is not 2-D")
    return _record(v, (x,), lambda g: (g.reshape(old),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _record(x.value.T, (x,), lambda g: (g.T,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.value))
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.value)
    return _record(t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return _record(x.value * mask, (x,), lambda g: (g * mask,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.value)
    return _record(e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    return _record(np.log(v), (x,), lambda g: (g / v,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero where clamping was active."""
    x = as_tensor(x)
    inside = (x.value >= lo) & (x.value <= hi)
    return _record(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,))


def softmax_row(x) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record(s, (x,), back)


def log_softmax_row(x) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def back(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return _record(out, (x,), back)


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _record(np.array([[x.value.sum()]]), (x,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))
    v = x.value.sum(axis=axis, keepdims=True)
    return _record(v, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.value.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


# ---------------------------------------------------------------- backward

def backward(loss: Tensor, store: "ParamStore | None" = None) -> None:
    """Populate ``.grad`` on every tensor that ``loss`` depends on.

    The tape that recorded ``loss`` is consumed; calling again raises
    GraphError.  Parameters in ``store`` that the loss does not reach get
    zero gradients.
    """
    if loss.shape != (1, 1):
        raise GraphError(f"backward: loss must be 1x1, got {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise GraphError("backward: loss was not recorded on a tape")
    if tape.consumed:
        raise GraphError("backward: tape already consumed")
    tape.consumed = True
    loss.grad = np.ones((1, 1))
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        grads = node._backward(g)
        for p, gp in zip(node._parents, grads):
            if gp is None or not p.requires_grad:
                continue
            p.grad = gp if p.grad is None else p.grad + gp
        node.grad = None
        node._backward = None
        node._parents = ()
    if store is not None:
        for p in store.params.values():
            if p.grad is None:
                p.grad = np.zeros(p.shape)


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Named trainable tensors plus Adam state and run metadata."""

    def __init__(self, meta: dict | None = None):
        self.params: dict[str, Tensor] = {}
        self.meta = {"config_hash": "", "seed": 0, "step": 0}
        if meta:
            self.meta.update(meta)
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    @property
    def step(self) -> int:
        return self.meta["step"]

    def shapes(self) -> dict[str, tuple]:
        return {n: t.shape for n, t in self.params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def copy(self) -> "ParamStore":
        other = ParamStore(dict(self.meta))
        for n, t in self.params.items():
            other.add(n, t.value.copy())
        other.adam_m = {n: a.copy() for n, a in self.adam_m.items()}
        other.adam_v = {n: a.copy() for n, a in self.adam_v.items()}
        return other

    def state_equal(self, other: "ParamStore") -> bool:
        """Bitwise equality of parameter values."""
        if list(self.params) != list(other.params):
            return False
        return all(np.array_equal(self.params[n].value, other.params[n].value)
                   and self.params[n].value.tobytes() == other.params[n].value.tobytes()
                   for n in self.params)

    def digest(self) -> str:
        h = hashlib.sha256()
        for n, t in self.params.items():
            h.update(n.encode())
            h.update(t.value.tobytes())
        return h.hexdigest()


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, names: Iterable[str] | None = None) -> ParamStore:
    """Bias-corrected Adam update in place; increments the step, clears grads."""
    store.meta["step"] += 1
    t = store.meta["step"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    selected = list(store.params) if names is None else list(names)
    for n in selected:
        p = store.params[n]
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        m = store.adam_m.get(n)
        v = store.adam_v.get(n)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        store.adam_m[n] = m
        store.adam_v[n] = v
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.zero_grad()
    return store


def clip_grad_norm(store: ParamStore, max_norm: float, names: Iterable[str] | None = None) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``."""
    selected = list(store.params) if names is None else list(names)
    total = 0.0
    for n in selected:
        g = store.params[n].grad
        if g is not None:
            total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for n in selected:
            p = store.params[n]
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------- checkpoints
#
# Layout (little endian):
#   b"DIVKDCK1"
#   u32 metadata length, metadata as UTF-8 JSON
#   u32 entry count
#   per entry: u16 name length, UTF-8 name, u32 rows, u32 cols,
#              rows*cols float64 values in row-major order
# Parameters come first in store order, then Adam moments named
# "adam.m/<param>" and "adam.v/<param>".

_MAGIC = b"DIVKDCK1"


def _entries(store: ParamStore):
    for n, t in store.params.items():
        yield n, t.value
    for n in store.params:
        if n in store.adam_m:
            yield "adam.m/" + n, store.adam_m[n]
            yield "adam.v/" + n, store.adam_v[n]


def checkpoint_bytes(store: ParamStore, extra_meta: dict | None = None) -> bytes:
    meta = dict(store.meta)
    if extra_meta:
        meta.update(extra_meta)
    meta_b = json.dumps(meta, sort_keys=True).encode()
    chunks = [_MAGIC, struct.pack("<I", len(meta_b)), meta_b]
    entries = list(_entries(store))
    chunks.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        nb = name.encode()
        rows, cols = arr.shape
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<II", rows, cols))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(path, store: ParamStore, extra_meta: dict | None = None) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(store, extra_meta))


def load_checkpoint(path, expected_shapes: dict[str, tuple] | None = None) -> ParamStore:
    """Read a checkpoint; reject it if shapes disagree with ``expected_shapes``."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not data.startswith(_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(_MAGIC)
    try:
        (mlen,) = struct.unpack_from("<I", data, off)
        off += 4
        meta = json.loads(data[off:off + mlen].decode())
        off += mlen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        store = ParamStore(meta)
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode()
            off += nlen
            rows, cols = struct.unpack_from("<II", data, off)
            off += 8
            nbytes = rows * cols * 8
            if off + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated entry {name!r}")
            arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).copy()
            off += nbytes
            if name.startswith("adam.m/"):
                store.adam_m[name[7:]] = arr
            elif name.startswith("adam.v/"):
                store.adam_v[name[7:]] = arr
            else:
                store.add(name, arr)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if expected_shapes is not None:
        got = store.shapes()
        missing = set(expected_shapes) - set(got)
        extra = set(got) - set(expected_shapes)
        if missing or extra:
            raise CheckpointError(f"{path}: parameter names differ (missing {sorted(missing)}, "
                                  f"unexpected {sorted(extra)})")
        for n, shp in expected_shapes.items():
            if tuple(got[n]) != tuple(shp):
                raise CheckpointError(f"{path}: {n} has shape {got[n]}, expected {tuple(shp)}")
    return store


# ---------------------------------------------------------------- gradient checks

def numerical_gradient(fn: Callable[[], float], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``fn()`` with respect to ``t.value``."""
    out = np.zeros(t.shape)
    flat = t.value.reshape(-1)
    of = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        of[i] = (fp - fm) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    max_entries: int | None = None, rng=None) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` must rebuild the graph on each call and be deterministic.
    With ``max_entries`` only a random subset of coordinates per tensor is
    probed.
    """
    for p in params:
        p.grad = None
    with Tape():
        loss = loss_fn()
        backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros(p.shape) for p in params]

    def f():
        return loss_fn().item()

    worst = 0.0
    for p, a in zip(params, analytic):
        if max_entries is None or p.value.size <= max_entries:
            num = numerical_gradient(f, p, h)
            worst = max(worst, relative_error(a, num))
            continue
        rng = rng or np.random.default_rng(0)
        flat = p.value.reshape(-1)
        idx = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(max_entries)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            num[k] = (fp - fm) / (2.0 * h)
        worst = max(worst, relative_error(a.reshape(-1)[idx], num))
        p.grad = None
    for p in params:
        p.grad = None
    return worst
