"""Tensor values and reverse-mode autodiff over an append-only tape.

Image tensors follow the NCHW convention; intermediate views (window
token batches, attention maps) may be any rank.  All differentiable
operations push one node per call onto the active tape, whose insertion
order is a valid topological order, so `backward` is a single reverse
sweep.  Matrix products accumulate in float64 regardless of the working
dtype.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import instrument
from .errors import DeterminismError, ShapeError, SizeError
from .rng import Rng

MAX_ELEMENTS = 1 << 40
DEFAULT_DTYPE = np.float32


class Tensor:
    """Numeric array with an optional gradient buffer and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "tape")

    def __init__(self, out, inputs, backward_fn, tape):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Append-only op record; insertion order is the topological order."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_tape_stack: list[Tape | None] = [Tape()]


def active_tape() -> Tape | None:
    return _tape_stack[-1]


@contextmanager
def fresh_tape():
    """Record onto a new tape for the duration of the context."""
    tape = Tape()
    _tape_stack.append(tape)
    try:
        yield tape
    finally:
        _tape_stack.pop()


@contextmanager
def no_grad():
    """Disable tape recording for the duration of the context."""
    _tape_stack.append(None)
    try:
        yield
    finally:
        _tape_stack.pop()


def _make(data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(out, inputs, backward_fn, tape)
        out.node = node
        tape.nodes.append(node)
    return out


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad leaf reachable from `loss`."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    if loss.node is None:
        return
    tape = loss.node.tape
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=t.data.dtype)
            if t.node is None:
                t.grad = gi if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi


# ---------------------------------------------------------------------------
# Construction


def tensor_new(shape, fill="zeros", dtype=DEFAULT_DTYPE) -> Tensor:
    """Build a tensor from a fill spec.

    `fill` is "zeros", "ones", ("const", x), ("uniform", rng, a, b) or
    ("normal", rng, mu, sigma).
    """
    shape = tuple(int(d) for d in shape)
    if any(d < 0 for d in shape):
        raise ShapeError(f"negative dimension in {shape}")
    n = 1
    for d in shape:
        n *= d
    if n > MAX_ELEMENTS:
        raise SizeError(f"{shape} exceeds {MAX_ELEMENTS} elements")
    if fill == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif fill == "ones":
        data = np.ones(shape, dtype=dtype)
    else:
        kind = fill[0]
        if kind == "const":
            data = np.full(shape, fill[1], dtype=dtype)
        elif kind == "uniform":
            _, rng, a, b = fill
            data = rng.uniforms(n, a, b).reshape(shape).astype(dtype)
        elif kind == "normal":
            _, rng, mu, sigma = fill
            data = rng.normals(n, mu, sigma).reshape(shape).astype(dtype)
        else:
            raise ValueError(f"unknown fill spec {fill!r}")
    return Tensor(data)


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return tensor_new(shape, "zeros", dtype)


def ones(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return tensor_new(shape, "ones", dtype)


def constant(shape, value, dtype=DEFAULT_DTYPE) -> Tensor:
    return tensor_new(shape, ("const", value), dtype)


def uniform(shape, rng: Rng, a: float = 0.0, b: float = 1.0, dtype=DEFAULT_DTYPE) -> Tensor:
    return tensor_new(shape, ("uniform", rng, a, b), dtype)


def normal(shape, rng: Rng, mu: float = 0.0, sigma: float = 1.0, dtype=DEFAULT_DTYPE) -> Tensor:
    return tensor_new(shape, ("normal", rng, mu, sigma), dtype)


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient `g` down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_check(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(ad * bd, (a, b), bwd)


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Spec surface for {add|sub|mul}: equal shapes, or `b` broadcast over batch only."""
    if a.shape != b.shape:
        batch_ok = (
            len(a.shape) == len(b.shape) == 4
            and b.shape[0] == 1
            and a.shape[1:] == b.shape[1:]
        )
        if not batch_ok:
            raise ShapeError(f"elementwise {op}: shapes {a.shape} vs {b.shape}")
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        return (g * c,)

    return _make(a.data * c, (a,), bwd)


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def bwd(g):
        return (g * sign,)

    return _make(np.abs(a.data), (a,), bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias (C,) to an NCHW tensor."""
    if x.data.ndim != 4 or b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ShapeError(f"add_bias: {x.shape} with bias {b.shape}")

    def bwd(g):
        return g, g.sum(axis=(0, 2, 3))

    return _make(x.data + b.data[None, :, None, None], (x, b), bwd)


# ---------------------------------------------------------------------------
# Reductions


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def bwd(g):
        return (np.full(shape, g.reshape(())),)

    return _make(a.data.sum(dtype=np.float64).astype(a.dtype).reshape(1, 1, 1, 1), (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    return scalar_mul(sum_all(a), 1.0 / a.size)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error as a (1,1,1,1) scalar tensor."""
    return mean_all(absolute(sub(pred, target)))


# ---------------------------------------------------------------------------
# Shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def concat_channels(parts: list) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    sizes = [p.shape[1] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=1))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bwd)


def narrow_channels(a: Tensor, start: int, count: int) -> Tensor:
    """Slice channels [start, start+count) of an NCHW tensor."""
    if a.data.ndim != 4 or start < 0 or start + count > a.shape[1]:
        raise ShapeError(f"narrow_channels({start}, {count}) on {a.shape}")

    def bwd(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[:, start : start + count] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[:, start : start + count]), (a,), bwd)


def narrow_batch(a: Tensor, start: int, count: int) -> Tensor:
    """Slice batch items [start, start+count) along axis 0."""
    if start < 0 or start + count > a.shape[0]:
        raise ShapeError(f"narrow_batch({start}, {count}) on {a.shape}")

    def bwd(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[start : start + count] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[start : start + count]), (a,), bwd)


def concat_batch(parts: list) -> Tensor:
    """Concatenate tensors along axis 0."""
    sizes = [p.shape[0] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=0))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bwd)


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a (L, 1) table by an integer index array."""
    idx = np.asarray(index)
    shape = table.shape

    def bwd(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt[:, 0], idx.reshape(-1), g.reshape(-1))
        return (gt,)

    return _make(table.data[idx, 0], (table,), bwd)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product, accumulated in float64."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_dtype = np.result_type(a.dtype, b.dtype)
    ad = a.data.astype(np.float64, copy=False)
    bd = b.data.astype(np.float64, copy=False)
    instrument.record_macs(a.shape[0] * a.shape[1] * b.shape[1])

    def bwd(g):
        g64 = g.astype(np.float64, copy=False)
        return g64 @ bd.T, ad.T @ g64

    return _make((ad @ bd).astype(out_dtype), (a, b), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product (B, r, k) @ (B, k, c), accumulated in float64."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm needs 3-D operands, got {a.shape} @ {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shapes incompatible: {a.shape} @ {b.shape}")
    out_dtype = np.result_type(a.dtype, b.dtype)
    ad = a.data.astype(np.float64, copy=False)
    bd = b.data.astype(np.float64, copy=False)
    instrument.record_macs(a.shape[0] * a.shape[1] * a.shape[2] * b.shape[2])

    def bwd(g):
        g64 = g.astype(np.float64, copy=False)
        return g64 @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g64

    return _make(np.matmul(ad, bd).astype(out_dtype), (a, b), bwd)


def softmax_rows(a: Tensor, scale: float = 1.0) -> Tensor:
    """Row softmax of `scale * a` over the last axis, with max subtraction."""
    if a.shape[-1] < 1:
        raise ShapeError("softmax_rows needs at least one column")
    z = scale * a.data.astype(np.float64, copy=False)
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = s.astype(a.dtype)

    def bwd(g):
        g64 = g.astype(np.float64, copy=False)
        dot = (g64 * s).sum(axis=-1, keepdims=True)
        return (scale * s * (g64 - dot),)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class CheckReport:
    max_rel_err: float
    worst: str
    passed: bool
    tol: float

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        return f"{verdict}: max rel err {self.max_rel_err:.3e} at {self.worst} (tol {self.tol:g})"


def rel_err(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    diff = abs(a - b)
    return diff / scale if scale > 1e-12 else diff


def fd_gradcheck(f, x: Tensor, eps: float = 1e-4, tol: float = 1e-4) -> CheckReport:
    """Compare tape gradients of scalar `f(x)` against central differences.

    `f` is evaluated twice up front; any bitwise output difference raises
    DeterminismError.
    """
    with no_grad():
        y1 = f(Tensor(x.data))
        y2 = f(Tensor(x.data))
    if not np.array_equal(y1.data, y2.data):
        raise DeterminismError("f(x) returned different values on repeated evaluation")

    leaf = Tensor(x.data.copy(), requires_grad=True)
    with fresh_tape():
        loss = f(leaf)
        backward(loss)
    grad = leaf.grad
    if grad is None:
        grad = np.zeros_like(leaf.data)

    worst = 0.0
    worst_idx = ()
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    probe = Tensor(leaf.data.copy())
    pflat = probe.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = pflat[i]
            pflat[i] = orig + eps
            up = f(probe).item()
            pflat[i] = orig - eps
            dn = f(probe).item()
            pflat[i] = orig
            fd = (up - dn) / (2.0 * eps)
            e = rel_err(float(gflat[i]), fd)
            if e > worst:
                worst = e
                worst_idx = np.unravel_index(i, leaf.data.shape)
    return CheckReport(worst, f"x{list(worst_idx)}", worst <= tol, tol)
