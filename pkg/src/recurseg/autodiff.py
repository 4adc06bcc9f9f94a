"""Reverse-mode automatic differentiation over dense numpy arrays.

A `Tensor` wraps an ndarray value and, when gradients are requested,
records a closure that propagates the output gradient to its inputs.
The graph is built dynamically call by call, so rollouts of varying
length need no special casing. `backward` on a scalar root fills the
`grad` field of every reachable tensor with `requires_grad`.

Values are float32 by default; switch to float64 (`using_dtype`) for
finite-difference work.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class NonFiniteError(ValueError):
    """NaN or Inf encountered while checked mode is on."""


class NonDeterministicError(RuntimeError):
    """Two evaluations of a supposedly deterministic function disagreed."""


_state = threading.local()


def _cfg():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.checked = False
        _state.grad_enabled = True
    return _state


def default_dtype():
    return _cfg().dtype


@contextlib.contextmanager
def using_dtype(dtype):
    st = _cfg()
    old = st.dtype
    st.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        st.dtype = old


@contextlib.contextmanager
def checked(on: bool = True):
    """Validate finiteness of every tensor built inside the block."""
    st = _cfg()
    old = st.checked
    st.checked = on
    try:
        yield
    finally:
        st.checked = old


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; forward values only."""
    st = _cfg()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


class Tensor:
    """A node in the computation graph: an ndarray plus gradient plumbing."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        st = _cfg()
        v = np.asarray(value)
        if v.dtype.kind != "f":
            v = v.astype(st.dtype)
        self.value = v
        if st.checked and not np.all(np.isfinite(v)):
            raise NonFiniteError(f"non-finite value in tensor of shape {v.shape}")
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype)
        else:
            self.grad = self.grad + g

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, idx):
        return getitem(self, idx)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=default_dtype()))


def parameter(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=default_dtype()), requires_grad=True)


def _node(value, parents, backward_fn) -> Tensor:
    """Make an op output; drops the closure when no parent needs gradients."""
    track = _cfg().grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(value)
    return Tensor(value, requires_grad=True, parents=tuple(parents), backward=backward_fn)


def backward(root: Tensor):
    """Reverse sweep from a scalar root; adds this call's dRoot/dLeaf into grads."""
    if root.value.shape != ():
        raise ShapeError(f"backward: root must be scalar, got shape {root.value.shape}")
    topo: list[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    # propagate this call in clean slots, then fold prior grads back in
    saved = [(n, n.grad) for n in topo if n.grad is not None]
    for n in topo:
        n.grad = None
    root._accumulate(np.ones((), dtype=root.value.dtype))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for n, g in saved:
        n.grad = g if n.grad is None else n.grad + g


def _unbroadcast(target_shape, g):
    """Sum g down to target_shape, undoing numpy broadcasting."""
    while g.ndim > len(target_shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(target_shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.value + b.value

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(a.shape, g))
        if b.requires_grad:
            b._accumulate(_unbroadcast(b.shape, g))

    return _node(out, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.value - b.value

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(a.shape, g))
        if b.requires_grad:
            b._accumulate(_unbroadcast(b.shape, -g))

    return _node(out, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.value * b.value

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(a.shape, g * b.value))
        if b.requires_grad:
            b._accumulate(_unbroadcast(b.shape, g * a.value))

    return _node(out, (a, b), grad_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.value / b.value

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(a.shape, g / b.value))
        if b.requires_grad:
            b._accumulate(_unbroadcast(b.shape, -g * a.value / (b.value * b.value)))

    return _node(out, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    out = -a.value

    def grad_fn(g):
        a._accumulate(-g)

    return _node(out, (a,), grad_fn)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)

    def grad_fn(g):
        a._accumulate(g * out)

    return _node(out, (a,), grad_fn)


def log(a: Tensor) -> Tensor:
    out = np.log(a.value)

    def grad_fn(g):
        a._accumulate(g / a.value)

    return _node(out, (a,), grad_fn)


def sigmoid(a: Tensor) -> Tensor:
    # stable both tails
    v = a.value
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    out = out.astype(v.dtype, copy=False)

    def grad_fn(g):
        a._accumulate(g * out * (1.0 - out))

    return _node(out, (a,), grad_fn)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)

    def grad_fn(g):
        a._accumulate(g * (1.0 - out * out))

    return _node(out, (a,), grad_fn)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.value, 0.0)

    def grad_fn(g):
        a._accumulate(g * (a.value > 0))

    return _node(out, (a,), grad_fn)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand."""
    a, b = _wrap(a), _wrap(b)
    out = np.maximum(a.value, b.value)
    take_a = a.value >= b.value

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(a.shape, g * take_a))
        if b.requires_grad:
            b._accumulate(_unbroadcast(b.shape, g * ~take_a))

    return _node(out, (a, b), grad_fn)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route the gradient to the first operand."""
    a, b = _wrap(a), _wrap(b)
    out = np.minimum(a.value, b.value)
    take_a = a.value <= b.value

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(a.shape, g * take_a))
        if b.requires_grad:
            b._accumulate(_unbroadcast(b.shape, g * ~take_a))

    return _node(out, (a, b), grad_fn)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.value, lo, hi)
    inside = (a.value >= lo) & (a.value <= hi)

    def grad_fn(g):
        a._accumulate(g * inside)

    return _node(out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _node(out, (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.value.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    v = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(v)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a._accumulate(out * (g - dot))

    return _node(out, (a,), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.value.reshape(shape)

    def grad_fn(g):
        a._accumulate(g.reshape(a.shape))

    return _node(out, (a,), grad_fn)


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose2d: expected rank 2, got shape {a.shape}")
    out = a.value.T.copy()

    def grad_fn(g):
        a._accumulate(g.T)

    return _node(out, (a,), grad_fn)


def concat(parts: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    return _node(out, tuple(parts), grad_fn)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.value[idx]

    def grad_fn(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _node(out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: ranks must be 1 or 2, got {a.shape} @ {b.shape}")
    av = a.value.reshape(1, -1) if a.ndim == 1 else a.value
    bv = b.value.reshape(-1, 1) if b.ndim == 1 else b.value
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out2 = av @ bv
    out = out2
    if a.ndim == 1:
        out = out[0]
    if b.ndim == 1:
        out = out[..., 0]

    def grad_fn(g):
        g2 = g.reshape(out2.shape)
        if a.requires_grad:
            ga = g2 @ bv.T
            a._accumulate(ga.reshape(a.shape))
        if b.requires_grad:
            gb = av.T @ g2
            b._accumulate(gb.reshape(b.shape))

    return _node(out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# image ops: (H, W, C) layout, kernels (kh, kw, Cin, Cout)


def _conv_same_raw(x, k, stride=1):
    kh, kw = k.shape[0], k.shape[1]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride]
    return np.einsum("hwckl,klcd->hwd", win, k, optimize=True), xp


def conv2d(x: Tensor, k: Tensor, stride: int = 1) -> Tensor:
    """Zero-padded 'same' convolution, odd kernels, stride 1 or 2."""
    if x.ndim != 3 or k.ndim != 4:
        raise ShapeError(f"conv2d: need image (H,W,C) and kernel (kh,kw,Cin,Cout), got {x.shape}, {k.shape}")
    if k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got {k.shape[:2]}")
    if x.shape[2] != k.shape[2]:
        raise ShapeError(f"conv2d: channel mismatch, image C={x.shape[2]} vs kernel Cin={k.shape[2]}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    out, xp = _conv_same_raw(x.value, k.value, stride)
    kh, kw = k.shape[0], k.shape[1]
    ph, pw = kh // 2, kw // 2
    H, W, _ = x.shape

    def grad_fn(g):
        if k.requires_grad:
            win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride]
            k._accumulate(np.einsum("hwckl,hwd->klcd", win, g, optimize=True))
        if x.requires_grad:
            if stride == 1:
                gy = g
            else:
                gy = np.zeros((H, W, g.shape[2]), dtype=g.dtype)
                gy[::stride, ::stride] = g
            kt = np.flip(k.value, (0, 1)).transpose(0, 1, 3, 2)
            gx, _ = _conv_same_raw(gy, kt, 1)
            x._accumulate(gx)

    return _node(out, (x, k), grad_fn)


def stuff2(x: Tensor) -> Tensor:
    """Interleave zeros: (H,W,C) -> (2H,2W,C) with x at even indices."""
    H, W, C = x.shape
    out = np.zeros((2 * H, 2 * W, C), dtype=x.value.dtype)
    out[::2, ::2] = x.value

    def grad_fn(g):
        x._accumulate(g[::2, ::2])

    return _node(out, (x,), grad_fn)


def flip2d(k: Tensor) -> Tensor:
    out = np.flip(k.value, (0, 1)).copy()

    def grad_fn(g):
        k._accumulate(np.flip(g, (0, 1)))

    return _node(out, (k,), grad_fn)


def deconv2d(x: Tensor, k: Tensor) -> Tensor:
    """Stride-2 transposed convolution: (H,W,Cin) -> (2H,2W,Cout).

    Exactly the adjoint of the stride-2 same conv with the same kernel.
    """
    return conv2d(stuff2(x), flip2d(k), stride=1)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pool, stride 2; within a window ties go to the earliest cell."""
    H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2: H and W must be even, got {x.shape}")
    win = x.value.reshape(H // 2, 2, W // 2, 2, C).transpose(0, 2, 1, 3, 4).reshape(H // 2, W // 2, 4, C)
    arg = win.argmax(axis=2)
    out = np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :]

    def grad_fn(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[:, :, None, :], g[:, :, None, :], axis=2)
        gx = gw.reshape(H // 2, W // 2, 2, 2, C).transpose(0, 2, 1, 3, 4).reshape(H, W, C)
        x._accumulate(gx)

    return _node(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# primitive dispatch, LSTM cell, gradient checking

PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "maximum": maximum,
    "minimum": minimum,
    "clip": clip,
    "sum": sum_,
    "softmax": softmax,
    "matmul": matmul,
    "conv2d": conv2d,
    "deconv2d": deconv2d,
    "maxpool2": maxpool2,
    "concat": concat,
    "reshape": reshape,
    "transpose2d": transpose2d,
    "stuff2": stuff2,
    "flip2d": flip2d,
}


def primitive_forward(op: str, inputs, **attrs) -> Tensor:
    """Apply a primitive by name; the uniform entry point used by sweeps."""
    if op not in PRIMITIVES:
        raise KeyError(f"unknown primitive {op!r}")
    if op == "concat":
        return concat(inputs, **attrs)
    return PRIMITIVES[op](*inputs, **attrs)


@dataclass
class LstmState:
    hidden: Tensor
    cell: Tensor

    @staticmethod
    def zeros(dim: int) -> "LstmState":
        return LstmState(hidden=constant(np.zeros(dim)), cell=constant(np.zeros(dim)))


def lstm_step(state: LstmState, x: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> LstmState:
    """One LSTM cell update. Gate layout along the last axis: [in, forget, cand, out]."""
    hdim = state.hidden.shape[0]
    if w_x.shape != (x.shape[0], 4 * hdim) or w_h.shape != (hdim, 4 * hdim) or b.shape != (4 * hdim,):
        raise ShapeError(
            f"lstm_step: got x {x.shape}, w_x {w_x.shape}, w_h {w_h.shape}, b {b.shape} for hidden dim {hdim}"
        )
    gates = matmul(x, w_x) + matmul(state.hidden, w_h) + b
    i = sigmoid(gates[0:hdim])
    f = sigmoid(gates[hdim : 2 * hdim])
    g = tanh(gates[2 * hdim : 3 * hdim])
    o = sigmoid(gates[3 * hdim : 4 * hdim])
    cell = f * state.cell + i * g
    hidden = o * tanh(cell)
    return LstmState(hidden=hidden, cell=cell)


@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    eps: float
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def __str__(self):
        lines = [f"{name}: {err:.3e}" for name, err in sorted(self.per_param.items())]
        lines.append(f"max {self.max_error:.3e} (tol {self.tol:g})")
        return "\n".join(lines)


def grad_check(f, store, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar f(store) against central differences.

    f must be deterministic; it is evaluated twice up front and a mismatch
    raises NonDeterministicError. Relative error per element is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    v1 = float(f(store).value)
    v2 = float(f(store).value)
    if v1 != v2:
        raise NonDeterministicError(f"f(store) returned {v1!r} then {v2!r}")

    for _, p in store.items():
        # probing writes through a flat view, which silently lands in a copy
        # for 0-d scalars and non-contiguous arrays; normalize the backing
        p.value = np.array(p.value, order="C")
        p.zero_grad()
    root = f(store)
    backward(root)

    report = {}
    for name, p in store.items():
        if not p.requires_grad:
            continue
        analytic = p.grad if p.grad is not None else np.zeros_like(p.value)
        worst = 0.0
        flat = p.value.reshape(-1)
        aflat = np.asarray(analytic).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(store).value)
            flat[i] = orig - eps
            lo = float(f(store).value)
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            a = float(aflat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        report[name] = worst
    return GradCheckReport(per_param=report, eps=eps, tol=tol)
