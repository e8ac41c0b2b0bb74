"""Dense float64 tensors with tape-based reverse-mode differentiation.

The tensor core is deliberately small: row-major flat storage, 64-bit
floats, and exactly the operations the rest of the toolkit needs. There is
no broadcasting beyond bias rows and python scalars, which keeps every
backward rule short enough to audit by hand and to pin with finite
differences (see ``grad_check``).
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

Shape = tuple[int, ...]

_TLS = threading.local()


def _active_tape() -> "GradTape | None":
    stack = getattr(_TLS, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    """A dense array of float64 values plus an optional gradient buffer.

    ``data`` is always a flat, C-ordered float64 array of length
    prod(shape); ``grad`` (when present) matches it entry for entry.
    """

    __slots__ = ("shape", "data", "requires_grad", "grad", "_tape")

    def __init__(self, data, shape: Sequence[int] | None = None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if shape is None:
            shape = arr.shape if arr.shape else (1,)
        shape = tuple(int(d) for d in shape)
        if not shape or any(d <= 0 for d in shape):
            raise ShapeError(f"degenerate shape {shape}: every axis must have length >= 1")
        flat = np.ascontiguousarray(arr).reshape(-1)
        if flat.size != math.prod(shape):
            raise ShapeError(f"data of size {flat.size} does not fill shape {shape}")
        if not np.all(np.isfinite(flat)):
            raise ValueError("tensor data must be finite")
        self.shape = shape
        self.data = flat
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: GradTape | None = None

    # -- convenience -----------------------------------------------------

    @property
    def size(self) -> int:
        return self.data.size

    def view(self) -> np.ndarray:
        """Read/write numpy view in the tensor's own shape."""
        return self.data.reshape(self.shape)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data[0])

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.shape, self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(math.prod(tuple(shape))), shape, requires_grad)


def full(shape: Sequence[int], value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(math.prod(tuple(shape)), float(value)), shape, requires_grad)


class GradTape:
    """Ordered record of operations for one reverse sweep.

    Operations executed inside ``with GradTape() as tape:`` append
    themselves in execution order, so the record is topologically sorted by
    construction. ``backward`` replays it once, in reverse. A tape must stay
    on the thread that created it.
    """

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "GradTape":
        stack = getattr(_TLS, "tapes", None)
        if stack is None:
            stack = []
            _TLS.tapes = stack
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TLS.tapes.pop()

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward_fn))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        """Populate ``grad`` for every requires_grad tensor feeding ``loss``."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        _accumulate(loss, np.array([seed]))
        for out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)


def backward(loss: Tensor, seed: float = 1.0) -> None:
    """Reverse sweep from ``loss`` over the tape that recorded it."""
    if loss._tape is None:
        raise ValueError("loss was not recorded on any tape (no grad-requiring inputs?)")
    loss._tape.backward(loss, seed)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.reshape(-1)


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.record(out, backward_fn)
    return out


# -- elementary operations ----------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes do not chain: {a.shape} x {b.shape}")
    av, bv = a.view(), b.view()
    out = Tensor(av @ bv)

    def bwd(g: np.ndarray) -> None:
        g2 = g.reshape(out.shape)
        if a.requires_grad:
            _accumulate(a, g2 @ bv.T)
        if b.requires_grad:
            _accumulate(b, av.T @ g2)

    return _record(out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, a.shape)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _record(out, (a, b), bwd)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Row-broadcast add: x[m, n] + bias[n]. The one blessed broadcast."""
    if len(x.shape) != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias needs x[m,n] and bias[n], got {x.shape} and {bias.shape}")
    out = Tensor(x.view() + bias.data, x.shape)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g)
        if bias.requires_grad:
            _accumulate(bias, g.reshape(x.shape).sum(axis=0))

    return _record(out, (x, bias), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient flows into ``c``)."""
    c = float(c)
    out = Tensor(a.data * c, a.shape)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g * c)

    return _record(out, (a,), bwd)


def scalar_mul(s: Tensor, a: Tensor) -> Tensor:
    """Multiply tensor ``a`` by a one-element tensor ``s``, grads to both."""
    if s.size != 1:
        raise ShapeError(f"scalar_mul needs a one-element scale, got shape {s.shape}")
    s0 = float(s.data[0])
    out = Tensor(a.data * s0, a.shape)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g * s0)
        if s.requires_grad:
            _accumulate(s, np.array([float(np.dot(g, a.data))]))

    return _record(out, (s, a), bwd)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data, a.shape)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _record(out, (a, b), bwd)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y, x.shape)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g * (1.0 - y * y))

    return _record(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign to avoid exp overflow on large negative inputs.
    y = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    out = Tensor(y, x.shape)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g * y * (1.0 - y))

    return _record(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)
    out = Tensor(y, x.shape)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g * (x.data > 0.0))

    return _record(out, (x,), bwd)


def elementwise(op_kind: str, *args: Tensor) -> Tensor:
    """Dispatch by name over the pointwise family."""
    table = {"tanh": tanh, "sigmoid": sigmoid, "add": add, "mul": scale, "hadamard": hadamard}
    if op_kind not in table:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    return table[op_kind](*args)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    nd = len(x.shape)
    if not -nd <= axis < nd:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    axis = axis % nd
    v = x.view()
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, x.shape)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            g2 = g.reshape(x.shape)
            inner = (g2 * y).sum(axis=axis, keepdims=True)
            _accumulate(x, y * (g2 - inner))

    return _record(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization of x[m, n] to zero mean / unit variance, then affine."""
    if len(x.shape) != 2:
        raise ShapeError(f"layer_norm expects a 2-d input, got {x.shape}")
    n = x.shape[1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"gain/bias must have shape ({n},), got {gain.shape} and {bias.shape}")
    v = x.view()
    mu = v.mean(axis=1, keepdims=True)
    var = v.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv
    out = Tensor(xhat * gain.data + bias.data, x.shape)

    def bwd(g: np.ndarray) -> None:
        g2 = g.reshape(x.shape)
        if gain.requires_grad:
            _accumulate(gain, (g2 * xhat).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))
        if x.requires_grad:
            gy = g2 * gain.data
            term = gy - gy.mean(axis=1, keepdims=True) - xhat * (gy * xhat).mean(axis=1, keepdims=True)
            _accumulate(x, term * inv)

    return _record(out, (x, gain, bias), bwd)


def cross_entropy(logits: Tensor, targets: Sequence[int], pad_id: int) -> Tensor:
    """Mean negative log-softmax over non-pad target positions.

    Positions whose target equals ``pad_id`` contribute neither loss nor
    gradient; an all-pad sequence is defined as loss 0 with zero gradient.
    """
    if len(logits.shape) != 2 or len(targets) != logits.shape[0]:
        raise ShapeError(f"logits {logits.shape} vs {len(targets)} targets")
    t, vsize = logits.shape
    ids = np.asarray(targets, dtype=np.int64)
    valid = ids != pad_id
    if np.any((ids[valid] < 0) | (ids[valid] >= vsize)):
        raise ValueError("target id out of vocabulary range")
    n_valid = int(valid.sum())
    lv = logits.view()
    shifted = lv - lv.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    if n_valid == 0:
        out = Tensor([0.0])
        return _record(out, (logits,), lambda g: None)
    picked = logp[valid, ids[valid]]
    out = Tensor([-picked.mean()])

    def bwd(g: np.ndarray) -> None:
        if logits.requires_grad:
            p = np.exp(logp)
            grad = np.zeros_like(lv)
            grad[valid] = p[valid]
            grad[valid, ids[valid]] -= 1.0
            _accumulate(logits, grad * (g[0] / n_valid))

    return _record(out, (logits,), bwd)


# -- structural operations ----------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    out = Tensor(x.data.copy(), shape)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g)

    return _record(out, (x,), bwd)


def transpose(x: Tensor) -> Tensor:
    if len(x.shape) != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got {x.shape}")
    out = Tensor(x.view().T.copy())

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g.reshape(out.shape).T.copy())

    return _record(out, (x,), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows needs at least one tensor")
    ncols = parts[0].shape[1] if len(parts[0].shape) == 2 else None
    for p in parts:
        if len(p.shape) != 2 or p.shape[1] != ncols:
            raise ShapeError(f"concat_rows column mismatch: {[p.shape for p in parts]}")
    out = Tensor(np.concatenate([p.view() for p in parts], axis=0))
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def bwd(g: np.ndarray) -> None:
        g2 = g.reshape(out.shape)
        for p, r0, r1 in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accumulate(p, g2[r0:r1])

    return _record(out, tuple(parts), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one tensor")
    nrows = parts[0].shape[0] if len(parts[0].shape) == 2 else None
    for p in parts:
        if len(p.shape) != 2 or p.shape[0] != nrows:
            raise ShapeError(f"concat_cols row mismatch: {[p.shape for p in parts]}")
    out = Tensor(np.concatenate([p.view() for p in parts], axis=1))
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def bwd(g: np.ndarray) -> None:
        g2 = g.reshape(out.shape)
        for p, c0, c1 in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accumulate(p, np.ascontiguousarray(g2[:, c0:c1]))

    return _record(out, tuple(parts), bwd)


def slice_rows(x: Tensor, r0: int, r1: int) -> Tensor:
    if len(x.shape) != 2 or not 0 <= r0 < r1 <= x.shape[0]:
        raise ShapeError(f"row slice [{r0}:{r1}] invalid for shape {x.shape}")
    out = Tensor(x.view()[r0:r1].copy())

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            buf = np.zeros(x.shape)
            buf[r0:r1] = g.reshape(out.shape)
            _accumulate(x, buf)

    return _record(out, (x,), bwd)


def slice_cols(x: Tensor, c0: int, c1: int) -> Tensor:
    if len(x.shape) != 2 or not 0 <= c0 < c1 <= x.shape[1]:
        raise ShapeError(f"column slice [{c0}:{c1}] invalid for shape {x.shape}")
    out = Tensor(x.view()[:, c0:c1].copy())

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            buf = np.zeros(x.shape)
            buf[:, c0:c1] = g.reshape(out.shape)
            _accumulate(x, buf)

    return _record(out, (x,), bwd)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    if len(table.shape) != 2:
        raise ShapeError(f"embedding table must be 2-d, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size == 0:
        raise ShapeError("embedding_lookup needs at least one id")
    if np.any((idx < 0) | (idx >= table.shape[0])):
        raise ValueError("embedding id out of range")
    out = Tensor(table.view()[idx].copy())

    def bwd(g: np.ndarray) -> None:
        if table.requires_grad:
            buf = np.zeros(table.shape)
            np.add.at(buf, idx, g.reshape(out.shape))
            _accumulate(table, buf)

    return _record(out, (table,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor([x.data.sum()])

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, np.full_like(x.data, g[0]))

    return _record(out, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


# -- verification harness -----------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max mixed relative error between tape gradients and central differences.

    Error per coordinate is |analytic - fd| / max(1, |analytic|), so tiny
    derivatives are judged absolutely and large ones relatively.
    """
    x.requires_grad = True
    x.zero_grad()
    with GradTape() as tape:
        y = f(x)
        if y.size != 1:
            raise ShapeError(f"grad_check needs a scalar-valued f, got shape {y.shape}")
    tape.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    fd = np.empty_like(x.data)
    for i in range(x.data.size):
        orig = x.data[i]
        x.data[i] = orig + h
        f_plus = f(x).item()
        x.data[i] = orig - h
        f_minus = f(x).item()
        x.data[i] = orig
        fd[i] = (f_plus - f_minus) / (2.0 * h)
    err = np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic))
    return float(err.max())


class SeededRng:
    """Deterministic random source; one seed yields one stream everywhere.

    Thin wrapper over the PCG64 bit generator, whose output stream is fully
    specified and platform independent. ``state``/``set_state`` round-trip
    through JSON for checkpointing.
    """

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_spawn_key)))

    def spawn(self, key: int) -> "SeededRng":
        """Independent child stream, reproducible from (seed, key)."""
        return SeededRng(self.seed, (int(key),))

    def normal(self, shape: Sequence[int], std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(tuple(shape)) * std

    def normal_tensor(self, shape: Sequence[int], std: float = 1.0, requires_grad: bool = False) -> Tensor:
        return Tensor(self.normal(shape, std), shape, requires_grad)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        return float(self._gen.uniform(low, high))

    def integers(self, low: int, high: int) -> int:
        return int(self._gen.integers(low, high))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, seq: Sequence):
        return seq[int(self._gen.integers(0, len(seq)))]

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self._gen.bit_generator.state = value
