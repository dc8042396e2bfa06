"""Dense float64 arrays with exact reverse-mode gradients, Adam, and a
finite-difference gradient checker.

Every value is a numpy float64 ndarray wrapped in a :class:`Tensor` node.
Ops build a graph of backward closures; ``backward()`` walks it once in
reverse topological order. Forward evaluation is pure: identical input bits
produce identical output bits. Evaluating disjoint examples concurrently
against a read-only ParamStore is safe (grad mode is thread-local);
parameter updates require exclusive access.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"GDPN"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NumericError(FloatingPointError):
    """A computation produced or received a non-finite value."""


_grad_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (forward values only)."""
    prev = grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


class Tensor:
    """One node of the computation graph.

    ``data`` is always float64. ``bw(gout)`` returns one gradient array (or
    None) per entry of ``parents``. Leaves created via ``param()`` have
    ``needs=True`` and receive accumulated gradients in ``grad``.
    """

    __slots__ = ("data", "grad", "parents", "bw", "needs")

    def __init__(self, data, parents=(), bw=None, needs=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.bw = bw
        self.needs = needs

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Accumulate gradients of this (scalar) node into all needy leaves."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.needs:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node.bw is None:
                continue
            grads = node.bw(node.grad)
            for p, g in zip(node.parents, grads):
                if g is None or not p.needs:
                    continue
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                p.grad += g


def tensor(data) -> Tensor:
    """Wrap an array as a constant (no gradient tracked)."""
    return Tensor(data)


def param(data) -> Tensor:
    """Wrap an array as a trainable leaf."""
    return Tensor(data, needs=True)


def make_op(data: np.ndarray, parents: Sequence[Tensor], bw: Callable) -> Tensor:
    """Build an op node; collapses to a constant when grads are off.

    ``bw(gout)`` must return one array (or None) per parent. This is the
    extension point for model-specific fused ops defined outside this module.
    """
    if not grad_enabled() or not any(p.needs for p in parents):
        return Tensor(data)
    return Tensor(data, tuple(parents), bw, needs=True)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return make_op(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                           _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return make_op(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                           _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return make_op(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                           _unbroadcast(g * a.data, b.data.shape)))


def mul_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    return make_op(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.data.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    return make_op(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Affine map y = xW + b with exact gradients for x, W, b."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.data.shape[1] != W.data.shape[0]:
        raise ShapeError(f"linear: x {x.data.shape} does not conform with W {W.data.shape}")
    if b.data.shape != (W.data.shape[1],):
        raise ShapeError(f"linear: b {b.data.shape} does not conform with W {W.data.shape}")
    out = x.data @ W.data + b.data

    def bw(g):
        return g @ W.data.T, x.data.T @ g, g.sum(axis=0)

    return make_op(out, (x, W, b), bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return make_op(out, (a,), lambda g: (g * (a.data > 0),))


def tanh_act(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a: Tensor) -> Tensor:
    """Elementwise ln(1+e^x) via the stable branch max(x,0)+ln(1+e^-|x|)."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    # sigmoid(x) = 1 - e^{-softplus(x)}; softplus(x) >= 0 so this is stable
    return make_op(out, (a,), lambda g: (g * -np.expm1(-out),))


def row_softmax(a: Tensor) -> Tensor:
    """Softmax per row with max-subtraction; rows sum to 1 within 1e-12."""
    if a.data.ndim != 2:
        raise ShapeError(f"row_softmax needs rank 2, got shape {a.data.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return make_op(out, (a,), bw)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label], stabilized via log-sum-exp."""
    x = logits.data.reshape(-1)
    if not 0 <= label < x.size:
        raise IndexError(f"label {label} out of range for {x.size} classes")
    m = x.max()
    lse = m + np.log(np.exp(x - m).sum())
    out = np.float64(lse - x[label])

    def bw(g):
        p = np.exp(x - lse)
        p[label] -= 1.0
        return (float(g) * p.reshape(logits.data.shape),)

    return make_op(out, (logits,), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    widths = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    splits = np.cumsum(widths)[:-1]

    def bw(g):
        return tuple(np.hsplit(g, splits))

    return make_op(out, tuple(parts), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    heights = [p.data.shape[0] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)
    splits = np.cumsum(heights)[:-1]

    def bw(g):
        return tuple(np.vsplit(g, splits))

    return make_op(out, tuple(parts), bw)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]

    def bw(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return (da,)

    return make_op(out, (a,), bw)


def gather_elems(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick a[rows[k], cols[k]] for each k; returns a (k, 1) column."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = a.data[rows, cols].reshape(-1, 1)

    def bw(g):
        da = np.zeros_like(a.data)
        np.add.at(da, (rows, cols), g.reshape(-1))
        return (da,)

    return make_op(out, (a,), bw)


def col_max(a: Tensor) -> Tensor:
    """Column-wise max over rows -> (1, d) row; ties route to the first row."""
    arg = a.data.argmax(axis=0)
    out = a.data[arg, np.arange(a.data.shape[1])].reshape(1, -1)

    def bw(g):
        da = np.zeros_like(a.data)
        da[arg, np.arange(a.data.shape[1])] = g.reshape(-1)
        return (da,)

    return make_op(out, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    out = np.float64(a.data.sum())
    return make_op(out, (a,), lambda g: (np.full_like(a.data, float(g)),))


def add_scalars(parts: Sequence[Tensor]) -> Tensor:
    out = np.float64(sum(float(p.data) for p in parts))
    return make_op(out, tuple(parts), lambda g: tuple(np.float64(g) for _ in parts))


# ---------------------------------------------------------------------------
# parameter store, Adam, checkpoints


class ParamEntry:
    __slots__ = ("tensor", "m", "v", "step")

    def __init__(self, value: np.ndarray):
        self.tensor = param(value)
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.step = 0


class ParamStore:
    """Named trainable arrays with gradients and Adam state."""

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter {name!r}")
        entry = ParamEntry(np.array(value, dtype=np.float64))
        self._entries[name] = entry
        return entry.tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def names(self) -> list[str]:
        return list(self._entries)

    def entries(self) -> Iterable[tuple[str, ParamEntry]]:
        return self._entries.items()

    def zero_grad(self) -> None:
        for e in self._entries.values():
            e.tensor.grad = None

    def value_bytes(self) -> int:
        return sum(e.tensor.data.nbytes for e in self._entries.values())


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm; raises NumericError if it is not finite.
    """
    total = 0.0
    for entry in store._entries.values():
        g = entry.tensor.grad
        if g is not None:
            total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if not np.isfinite(norm):
        raise NumericError("gradient norm is not finite")
    if norm > max_norm:
        scale = max_norm / norm
        for entry in store._entries.values():
            if entry.tensor.grad is not None:
                entry.tensor.grad *= scale
    return norm


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update on every entry; gradients are zeroed after."""
    for entry in store._entries.values():
        g = entry.tensor.grad
        if g is None:
            g = np.zeros_like(entry.tensor.data)
        entry.step += 1
        entry.m = beta1 * entry.m + (1.0 - beta1) * g
        entry.v = beta2 * entry.v + (1.0 - beta2) * g * g
        mhat = entry.m / (1.0 - beta1 ** entry.step)
        vhat = entry.v / (1.0 - beta2 ** entry.step)
        entry.tensor.data -= lr * mhat / (np.sqrt(vhat) + eps)
    store.zero_grad()


def save_checkpoint(store: ParamStore, path: str) -> None:
    """Write values in the GDPN binary layout (little-endian, float64)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(store._entries)))
        for name, entry in store._entries.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            dims = entry.tensor.data.shape
            fh.write(struct.pack("<I", len(dims)))
            for d in dims:
                fh.write(struct.pack("<Q", d))
            fh.write(np.ascontiguousarray(entry.tensor.data, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> ParamStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    store = ParamStore()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        store.add(name, values.copy())
    return store


# ---------------------------------------------------------------------------
# finite-difference checker


def grad_check(loss_fn: Callable[[], Tensor], store: ParamStore,
               step: float = 1e-5, fallback_step: float | None = None) -> float:
    """Central differences vs. reverse mode over every parameter.

    Returns max over all coordinates of |a - n| / max(1e-8, |a| + |n|).

    No single step suits every coordinate: strongly curved ones want a small
    step (truncation grows as step^2) while near-dead ones want a large step
    (float noise in the loss is amplified by 1/step against the 1e-8 floor).
    When ``fallback_step`` is given, coordinates whose error at ``step``
    exceeds 1e-5 are re-probed at the fallback and the smaller error counts;
    a genuinely wrong analytic gradient disagrees with finite differences at
    every step, so the fallback cannot hide real defects.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    store.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise NumericError(f"loss is not finite: {loss.data}")
    loss.backward()
    analytic = {
        name: (e.tensor.grad.copy() if e.tensor.grad is not None
               else np.zeros_like(e.tensor.data))
        for name, e in store.entries()
    }

    def probe(flat, i, h, name):
        orig = flat[i]
        flat[i] = orig + h
        hi = loss_fn().item()
        flat[i] = orig - h
        lo = loss_fn().item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"non-finite loss while probing {name}[{i}]")
        return (hi - lo) / (2.0 * h)

    worst = 0.0
    with no_grad():
        for name, entry in store.entries():
            flat = entry.tensor.data.reshape(-1)
            aflat = analytic[name].reshape(-1)
            for i in range(flat.size):
                a = aflat[i]
                numeric = probe(flat, i, step, name)
                rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                if rel > 1e-5 and fallback_step is not None:
                    numeric = probe(flat, i, fallback_step, name)
                    rel = min(rel, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
                if rel > worst:
                    worst = rel
    store.zero_grad()
    return worst


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)
