"""Reverse-mode automatic differentiation over numpy float64 arrays.

Eager tape: every operation on a ``Tensor`` appends one node holding the
forward value and per-input backward closures.  All ops in this module
dual-dispatch: called on plain ndarrays (or scalars) they compute with
numpy directly and record nothing, so model code written against these
functions runs identically in taped and plain mode.

Reductions use numpy's pairwise summation and the tape replays nodes in
reverse creation order, so gradients are bitwise reproducible for
identical inputs recorded in identical order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "ParameterBlock",
    "value_of",
    "finite_diff_check",
    "FiniteDiffReport",
]


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


@dataclass
class ParameterBlock:
    """Named leaf parameter vector with a gradient accumulator.

    ``values`` and ``grad`` always share shape.  ``role`` tags what the
    block controls so optimizers can select subsets by role.
    """

    name: str
    values: np.ndarray
    role: str = "generic"
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.values = _as_f64(self.values)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        else:
            self.grad = _as_f64(self.grad)
            if self.grad.shape != self.values.shape:
                raise ValueError("grad shape mismatch")

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class _Node:
    __slots__ = ("op", "value", "inputs", "grad_fns", "leaf")

    def __init__(self, op, value, inputs, grad_fns, leaf=None):
        self.op = op
        self.value = value
        self.inputs = inputs        # tuple of node ids
        self.grad_fns = grad_fns    # tuple of callables, one per input
        self.leaf = leaf            # (block, flat_slice) for parameter leaves


class Tensor:
    """Handle to one tape node.  Supports the usual arithmetic operators."""

    __slots__ = ("tape", "nid")

    # make ndarray <op> Tensor defer to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.nid].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(nid={self.nid}, shape={self.shape})"

    # arithmetic
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

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Append-only record of operations for one backward sweep.

    ``check_finite=True`` raises ``FloatingPointError`` the moment any
    recorded value contains a NaN or Inf, naming the offending op.
    """

    def __init__(self, check_finite: bool = False):
        self.nodes: list[_Node] = []
        self.check_finite = check_finite

    def __len__(self):
        return len(self.nodes)

    def _record(self, op, value, inputs, grad_fns, leaf=None) -> Tensor:
        value = _as_f64(value)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise FloatingPointError(
                f"non-finite value produced by op '{op}' (node {len(self.nodes)})"
            )
        self.nodes.append(_Node(op, value, inputs, grad_fns, leaf))
        return Tensor(self, len(self.nodes) - 1)

    # -- leaves ----------------------------------------------------------

    def param(self, block: ParameterBlock, shape=None) -> Tensor:
        """Whole parameter block as a leaf tensor (optionally reshaped)."""
        val = block.values if shape is None else block.values.reshape(shape)
        return self._record("param", np.array(val, copy=True), (), (),
                            leaf=(block, slice(0, block.size)))

    def param_slice(self, block: ParameterBlock, start: int, shape) -> Tensor:
        """Contiguous slice of a flat parameter block, viewed with ``shape``."""
        if block.values.ndim != 1:
            raise ValueError("param_slice requires a flat block")
        n = int(np.prod(shape)) if shape else 1
        val = block.values[start:start + n].reshape(shape)
        return self._record("param_slice", np.array(val, copy=True), (), (),
                            leaf=(block, slice(start, start + n)))

    def custom(self, op: str, value, inputs: Sequence[Tensor],
               grad_fns: Sequence[Callable]) -> Tensor:
        """Record an externally computed op with caller-supplied backward."""
        ids = tuple(t.nid for t in inputs)
        return self._record(op, value, ids, tuple(grad_fns))

    # -- backward --------------------------------------------------------

    def backward(self, out: Tensor, seed=1.0) -> None:
        """Accumulate d(out)/d(leaf) into each leaf block's ``.grad``.

        ``out`` may have any shape; ``seed`` must broadcast to it (the
        usual case is a scalar loss with seed 1).
        """
        if out.tape is not self:
            raise ValueError("tensor does not belong to this tape")
        grads: list = [None] * (out.nid + 1)
        g0 = np.broadcast_to(_as_f64(seed), self.nodes[out.nid].value.shape)
        grads[out.nid] = np.array(g0, dtype=np.float64)
        for nid in range(out.nid, -1, -1):
            g = grads[nid]
            grads[nid] = None
            if g is None:
                continue
            node = self.nodes[nid]
            if node.leaf is not None:
                block, slc = node.leaf
                block.grad.reshape(-1)[slc] += g.reshape(-1)
                continue
            for inp, fn in zip(node.inputs, node.grad_fns):
                contrib = fn(g)
                if grads[inp] is None:
                    grads[inp] = _as_f64(contrib).copy()
                else:
                    grads[inp] += contrib


def value_of(x) -> np.ndarray:
    """Forward value of a Tensor, or the input coerced to float64."""
    if isinstance(x, Tensor):
        return x.value
    return _as_f64(x)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    return None


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    grad = _as_f64(grad)
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _unary(op, x, forward, backward):
    xv = value_of(x)
    out = forward(xv)
    if isinstance(x, Tensor):
        return x.tape._record(op, out, (x.nid,),
                              (lambda g, xv=xv, out=out: backward(g, xv, out),))
    return out


def _binary(op, a, b, forward, grad_a, grad_b):
    av, bv = value_of(a), value_of(b)
    out = forward(av, bv)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    inputs, fns = [], []
    if isinstance(a, Tensor):
        inputs.append(a.nid)
        fns.append(lambda g, av=av, bv=bv, out=out:
                   _unbroadcast(grad_a(g, av, bv, out), av.shape))
    if isinstance(b, Tensor):
        inputs.append(b.nid)
        fns.append(lambda g, av=av, bv=bv, out=out:
                   _unbroadcast(grad_b(g, av, bv, out), bv.shape))
    return tape._record(op, out, tuple(inputs), tuple(fns))


# -- arithmetic ------------------------------------------------------------

def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b):
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y, o: g / y,
                   lambda g, x, y, o: -g * x / (y * y))


def neg(x):
    return _unary("neg", x, lambda v: -v, lambda g, v, o: -g)


def power(x, p):
    p = float(p)
    return _unary(f"pow{p}", x, lambda v: v ** p,
                  lambda g, v, o: g * p * v ** (p - 1.0))


def sqrt(x):
    return _unary("sqrt", x, np.sqrt, lambda g, v, o: g * 0.5 / o)


def exp(x):
    return _unary("exp", x, np.exp, lambda g, v, o: g * o)


def log(x):
    return _unary("log", x, np.log, lambda g, v, o: g / v)


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda g, v, o: g * (1.0 - o * o))


def sin(x):
    return _unary("sin", x, np.sin, lambda g, v, o: g * np.cos(v))


def cos(x):
    return _unary("cos", x, np.cos, lambda g, v, o: -g * np.sin(v))


def relu(x):
    # subgradient 0 at the kink
    return _unary("relu", x, lambda v: np.maximum(v, 0.0),
                  lambda g, v, o: g * (v > 0.0))


def absolute(x):
    # subgradient 0 at 0 (np.sign(0) == 0)
    return _unary("abs", x, np.abs, lambda g, v, o: g * np.sign(v))


def maximum(a, b):
    # ties route the gradient to the first argument
    return _binary("maximum", a, b, np.maximum,
                   lambda g, x, y, o: g * (x >= y),
                   lambda g, x, y, o: g * (y > x))


def minimum(a, b):
    return _binary("minimum", a, b, np.minimum,
                   lambda g, x, y, o: g * (x <= y),
                   lambda g, x, y, o: g * (y < x))


def where(cond, a, b):
    """Select per element; ``cond`` is data (no gradient path through it)."""
    cond = np.asarray(value_of(cond)).astype(bool)
    return _binary("where", a, b,
                   lambda x, y: np.where(cond, x, y),
                   lambda g, x, y, o: g * cond,
                   lambda g, x, y, o: g * ~cond)


# -- linear algebra --------------------------------------------------------

def matmul(a, b):
    """Matrix product for 2D@2D, 2D@1D and 1D@2D operands."""

    def fwd(x, y):
        return x @ y

    def ga(g, x, y, o):
        if x.ndim == 2 and y.ndim == 2:
            return g @ y.T
        if x.ndim == 2 and y.ndim == 1:
            return np.outer(g, y)
        return y @ g  # 1D @ 2D

    def gb(g, x, y, o):
        if x.ndim == 2 and y.ndim == 2:
            return x.T @ g
        if x.ndim == 2 and y.ndim == 1:
            return x.T @ g
        return np.outer(x, g)

    av, bv = value_of(a), value_of(b)
    if av.ndim > 2 or bv.ndim > 2:
        raise ValueError("matmul supports at most 2D operands; use bmatvec")
    return _binary("matmul", a, b, fwd, ga, gb)


def bmatvec(mats, vecs):
    """Batched matrix-vector product: (..., 3, 3) x (..., 3) -> (..., 3)."""

    def fwd(m, v):
        return np.einsum("...ij,...j->...i", m, v)

    def gm(g, m, v, o):
        return g[..., :, None] * v[..., None, :]

    def gv(g, m, v, o):
        return np.einsum("...ij,...i->...j", m, g)

    return _binary("bmatvec", mats, vecs, fwd, gm, gv)


def cross(a, b):
    """Cross product on (..., 3) arrays."""
    return _binary("cross", a, b, np.cross,
                   lambda g, x, y, o: np.cross(y, g),
                   lambda g, x, y, o: np.cross(g, x))


# -- reductions ------------------------------------------------------------

def _sum_backward(g, shape, axis, keepdims):
    g = _as_f64(g)
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False):
    return _unary("sum", x,
                  lambda v: np.sum(v, axis=axis, keepdims=keepdims),
                  lambda g, v, o: _sum_backward(g, v.shape, axis, keepdims))


def mean(x, axis=None, keepdims=False):
    xv = value_of(x)
    if axis is None:
        n = xv.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([xv.shape[a] for a in axes]))
    return div(sum_(x, axis=axis, keepdims=keepdims), float(n))


# -- structure -------------------------------------------------------------

def reshape(x, shape):
    xv = value_of(x)
    if not isinstance(x, Tensor):
        return xv.reshape(shape)
    return x.tape._record("reshape", xv.reshape(shape), (x.nid,),
                          (lambda g, s=xv.shape: _as_f64(g).reshape(s),))


def take(x, key):
    """Basic/advanced indexing; backward scatter-adds into a zero array."""
    xv = value_of(x)
    out = xv[key]
    if not isinstance(x, Tensor):
        return out

    def bwd(g, shape=xv.shape, key=key):
        z = np.zeros(shape, dtype=np.float64)
        np.add.at(z, key, g)
        return z

    return x.tape._record("take", out, (x.nid,), (bwd,))


def index_add(x, idx, size: int):
    """Segment sum: rows of ``x`` accumulated into ``size`` output rows."""
    xv = value_of(x)
    idx = np.asarray(idx)

    def fwd(v):
        out = np.zeros((size,) + v.shape[1:], dtype=np.float64)
        np.add.at(out, idx, v)
        return out

    if not isinstance(x, Tensor):
        return fwd(xv)
    return x.tape._record("index_add", fwd(xv), (x.nid,),
                          (lambda g: _as_f64(g)[idx],))


def concat(parts, axis=0):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    inputs, fns = [], []
    for i, p in enumerate(parts):
        if not isinstance(p, Tensor):
            continue
        lo, hi = int(offsets[i]), int(offsets[i + 1])
        sl = tuple(slice(None) if a != axis % out.ndim else slice(lo, hi)
                   for a in range(out.ndim))
        inputs.append(p.nid)
        fns.append(lambda g, sl=sl: _as_f64(g)[sl])
    return tape._record("concat", out, tuple(inputs), tuple(fns))


def stack(parts, axis=0):
    vals = [value_of(p) for p in parts]
    out = np.stack(vals, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    inputs, fns = [], []
    for i, p in enumerate(parts):
        if not isinstance(p, Tensor):
            continue
        inputs.append(p.nid)
        fns.append(lambda g, i=i: np.take(_as_f64(g), i, axis=axis))
    return tape._record("stack", out, tuple(inputs), tuple(fns))


# -- verification ----------------------------------------------------------

@dataclass
class FiniteDiffEntry:
    block: str
    index: int
    analytic: float
    numeric: float
    abs_err: float
    rel_err: float


@dataclass
class FiniteDiffReport:
    entries: list[FiniteDiffEntry]
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def finite_diff_check(loss_fn: Callable[[Tape | None], "Tensor | float"],
                      blocks: Sequence[ParameterBlock],
                      *,
                      indices: dict | None = None,
                      tol: float = 1e-6,
                      rng: np.random.Generator | None = None,
                      max_per_block: int = 24,
                      step: float = 1e-6) -> FiniteDiffReport:
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``loss_fn(tape)`` must build and return the scalar loss from the
    current block values; calling it with ``tape=None`` must return the
    plain float value.  Coordinates are perturbed with step
    ``step * (1 + |x_i|)``.  ``indices`` optionally fixes which flat
    coordinates of each block (by name) are probed; otherwise up to
    ``max_per_block`` are sampled per block.
    """
    rng = rng or np.random.default_rng(0)
    for b in blocks:
        b.zero_grad()
    tape = Tape()
    out = loss_fn(tape)
    if not isinstance(out, Tensor):
        raise TypeError("loss_fn must return a Tensor when given a tape")
    tape.backward(out)

    def plain() -> float:
        v = loss_fn(None)
        return float(v.value) if isinstance(v, Tensor) else float(v)

    entries = []
    for b in blocks:
        flat = b.values.reshape(-1)
        gflat = b.grad.reshape(-1)
        if indices is not None and b.name in indices:
            idxs = np.asarray(indices[b.name], dtype=int)
        elif flat.size <= max_per_block:
            idxs = np.arange(flat.size)
        else:
            idxs = rng.choice(flat.size, size=max_per_block, replace=False)
        for i in idxs:
            i = int(i)
            h = step * (1.0 + abs(flat[i]))
            old = flat[i]
            flat[i] = old + h
            fp = plain()
            flat[i] = old - h
            fm = plain()
            flat[i] = old
            num = (fp - fm) / (2.0 * h)
            ana = float(gflat[i])
            abs_err = abs(ana - num)
            rel = abs_err / max(1e-8, abs(ana), abs(num))
            entries.append(FiniteDiffEntry(b.name, i, ana, num, abs_err, rel))
    max_rel = max((e.rel_err for e in entries), default=0.0)
    return FiniteDiffReport(entries, max_rel, tol)
