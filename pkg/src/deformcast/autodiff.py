"""Reverse-mode automatic differentiation over dense float64 arrays.

A deliberately small engine: each op computes its forward value with
numpy and, when executed under an active Tape with gradients flowing,
records a backward closure on the output node. `backward(loss)` walks
the graph once in reverse topological order, accumulating gradients
additively across fan-out.

Broadcasting is restricted to python scalars; any other shape change
must go through `expand`, `reshape` or `transpose`, which keeps every
backward rule an exact mirror of its forward.

All ops are deterministic: identical inputs give bitwise-identical
forward values and gradients in single-threaded use.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_state = threading.local()


class Tape:
    """Recording context. Ops executed inside build the backward graph;
    outside any tape, forwards run plain (cheap inference mode)."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().pop()
        # Backward closures close over their own output node; severing
        # the links here breaks those reference cycles so step graphs
        # are reclaimed by refcount instead of waiting on the gc.
        # backward() must therefore run inside the recording tape.
        for node in self.nodes:
            node._backward = None
            node._parents = ()
        self.nodes.clear()
        return False


def _tapes():
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape():
    stack = _tapes()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def tracked(self):
        """True when gradients should flow through this node."""
        return self.requires_grad or bool(self._parents)

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        tag = self.name or "tensor"
        return f"<{tag} {self.data.shape} grad={'yes' if self.tracked else 'no'}>"


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def _make(data, parents, backward_fn):
    """Create an op output, recording backward only when useful."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.tracked for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
        tape.nodes.append(out)
    return out


def _check_same(a, b, opname):
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"{opname}: operand shapes {a.data.shape} and {b.data.shape} differ"
        )


def _as_operands(a, b, opname):
    """Return (tensor, tensor-or-None, scalar-or-None) for binary ops."""
    if isinstance(b, Tensor):
        _check_same(a, b, opname)
        return b, None
    return None, float(b)


# ---------------------------------------------------------------------------
# arithmetic

def add(a: Tensor, b):
    bt, c = _as_operands(a, b, "add")
    if bt is not None:
        out = _make(a.data + bt.data, (a, bt), None)
        def back(o=out):
            if a.tracked:
                a.accumulate(o.grad)
            if bt.tracked:
                bt.accumulate(o.grad)
    else:
        out = _make(a.data + c, (a,), None)
        def back(o=out):
            a.accumulate(o.grad)
    out._backward = back if out._parents else None
    return out


def sub(a: Tensor, b):
    bt, c = _as_operands(a, b, "sub")
    if bt is not None:
        out = _make(a.data - bt.data, (a, bt), None)
        def back(o=out):
            if a.tracked:
                a.accumulate(o.grad)
            if bt.tracked:
                bt.accumulate(-o.grad)
    else:
        out = _make(a.data - c, (a,), None)
        def back(o=out):
            a.accumulate(o.grad)
    out._backward = back if out._parents else None
    return out


def neg(a: Tensor):
    out = _make(-a.data, (a,), None)
    def back(o=out):
        a.accumulate(-o.grad)
    out._backward = back if out._parents else None
    return out


def mul(a: Tensor, b):
    bt, c = _as_operands(a, b, "mul")
    if bt is not None:
        out = _make(a.data * bt.data, (a, bt), None)
        def back(o=out):
            if a.tracked:
                a.accumulate(o.grad * bt.data)
            if bt.tracked:
                bt.accumulate(o.grad * a.data)
    else:
        out = _make(a.data * c, (a,), None)
        def back(o=out):
            a.accumulate(o.grad * c)
    out._backward = back if out._parents else None
    return out


def div(a: Tensor, b):
    bt, c = _as_operands(a, b, "div")
    if bt is not None:
        out = _make(a.data / bt.data, (a, bt), None)
        def back(o=out):
            if a.tracked:
                a.accumulate(o.grad / bt.data)
            if bt.tracked:
                bt.accumulate(-o.grad * a.data / (bt.data * bt.data))
    else:
        inv = 1.0 / c
        out = _make(a.data * inv, (a,), None)
        def back(o=out):
            a.accumulate(o.grad * inv)
    out._backward = back if out._parents else None
    return out


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def _unary(a, value, dvalue):
    out = _make(value, (a,), None)
    def back(o=out):
        a.accumulate(o.grad * dvalue)
    out._backward = back if out._parents else None
    return out


def abs_(a: Tensor):
    return _unary(a, np.abs(a.data), np.sign(a.data))


def sqrt(a: Tensor):
    root = np.sqrt(a.data)
    return _unary(a, root, 0.5 / root)


def relu(a: Tensor):
    return _unary(a, np.maximum(a.data, 0.0), (a.data > 0).astype(np.float64))


def gelu(a: Tensor):
    """Exact-erf GELU: x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _unary(a, x * cdf, cdf + x * pdf)


def sigmoid(a: Tensor):
    s = np.empty_like(a.data)
    pos = a.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    s[~pos] = ex / (1.0 + ex)
    return _unary(a, s, s * (1.0 - s))


def smooth_l1(a: Tensor, beta: float = 1.0):
    """Elementwise SmoothL1 (Huber with quadratic zone |x| < beta)."""
    x = a.data
    small = np.abs(x) < beta
    value = np.where(small, 0.5 * x * x / beta, np.abs(x) - 0.5 * beta)
    slope = np.where(small, x / beta, np.sign(x))
    return _unary(a, value, slope)


# ---------------------------------------------------------------------------
# shape ops

def reshape(a: Tensor, shape):
    old = a.data.shape
    out = _make(a.data.reshape(shape), (a,), None)
    def back(o=out):
        a.accumulate(o.grad.reshape(old))
    out._backward = back if out._parents else None
    return out


def transpose(a: Tensor, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), None)
    def back(o=out):
        a.accumulate(o.grad.transpose(inverse))
    out._backward = back if out._parents else None
    return out


def expand(a: Tensor, shape):
    """Explicit broadcast of size-1 (or missing leading) axes."""
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ValueError(
            f"expand: cannot broadcast {a.data.shape} to {shape}"
        ) from None
    src = a.data.shape
    pad = len(shape) - len(src)
    summed_axes = tuple(range(pad)) + tuple(
        pad + i for i, s in enumerate(src) if s == 1 and shape[pad + i] != 1
    )
    out = _make(np.ascontiguousarray(data), (a,), None)
    def back(o=out):
        g = o.grad.sum(axis=summed_axes, keepdims=True) if summed_axes else o.grad
        a.accumulate(g.reshape(src))
    out._backward = back if out._parents else None
    return out


def concat(tensors, axis: int):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    out = _make(data, tuple(tensors), None)
    def back(o=out):
        for t, lo, hi in zip(tensors, offsets, offsets[1:]):
            if t.tracked:
                idx = [slice(None)] * o.grad.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate(o.grad[tuple(idx)])
    out._backward = back if out._parents else None
    return out


def slice_axis(a: Tensor, axis: int, start: int, stop: int):
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = _make(np.ascontiguousarray(a.data[idx]), (a,), None)
    def back(o=out):
        g = np.zeros_like(a.data)
        g[idx] = o.grad
        a.accumulate(g)
    out._backward = back if out._parents else None
    return out


# ---------------------------------------------------------------------------
# reductions

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a: Tensor, axis=None, keepdims=False):
    axes = _axis_tuple(axis, a.data.ndim)
    out = _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), None)
    def back(o=out):
        g = o.grad
        if not keepdims:
            g = np.expand_dims(g, axes)
        a.accumulate(np.broadcast_to(g, a.data.shape))
    out._backward = back if out._parents else None
    return out


def mean(a: Tensor, axis=None, keepdims=False):
    axes = _axis_tuple(axis, a.data.ndim)
    n = 1
    for ax in axes:
        n *= a.data.shape[ax]
    inv = 1.0 / n
    out = _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), None)
    def back(o=out):
        g = o.grad
        if not keepdims:
            g = np.expand_dims(g, axes)
        a.accumulate(np.broadcast_to(g * inv, a.data.shape))
    out._backward = back if out._parents else None
    return out


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor):
    """a @ b. Either b is a 2-D weight applied to (..., m, k) inputs, or
    both operands carry identical leading batch dimensions."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(
            f"matmul: operands must be >= 2-d, got {ad.shape} and {bd.shape}"
        )
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(
            f"matmul: inner dimensions differ, {ad.shape} @ {bd.shape}"
        )
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(
            f"matmul: batch dimensions differ, {ad.shape} @ {bd.shape}"
        )
    out = _make(np.matmul(ad, bd), (a, b), None)
    def back(o=out):
        g = o.grad
        if a.tracked:
            a.accumulate(np.matmul(g, np.swapaxes(bd, -1, -2)))
        if b.tracked:
            if bd.ndim == 2:
                ga = ad.reshape(-1, ad.shape[-1])
                gg = g.reshape(-1, g.shape[-1])
                b.accumulate(ga.T @ gg)
            else:
                b.accumulate(np.matmul(np.swapaxes(ad, -1, -2), g))
    out._backward = back if out._parents else None
    return out


def softmax_lastaxis(a: Tensor, mask=None):
    """Softmax over the last axis with an optional additive mask.

    The mask is a constant array (broadcastable against the logits);
    entries of -1e9 underflow to exact 0.0 probability after the
    row-max shift, which is what makes masked attention airtight.
    """
    z = a.data + mask if mask is not None else a.data
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = _make(p, (a,), None)
    def back(o=out):
        g = o.grad
        inner = (g * p).sum(axis=-1, keepdims=True)
        a.accumulate(p * (g - inner))
    out._backward = back if out._parents else None
    return out


def layer_norm_lastaxis(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    d = a.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ValueError(
            f"layer_norm: affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match feature size ({d},)"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _make(xhat * gamma.data + beta.data, (a, gamma, beta), None)
    def back(o=out):
        g = o.grad
        if gamma.tracked:
            gamma.accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.tracked:
            beta.accumulate(g.reshape(-1, d).sum(axis=0))
        if a.tracked:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            a.accumulate(inv * (gx - m1 - xhat * m2))
    out._backward = back if out._parents else None
    return out


def conv1d_time(x: Tensor, w: Tensor, b: Tensor | None = None):
    """Valid convolution along the trailing (time) axis.

    x: (..., C_in, N, L); w: (C_out, C_in, K); b: (C_out,) optional.
    Returns (..., C_out, N, L - K + 1).
    """
    xd, wd = x.data, w.data
    c_out, c_in, K = wd.shape
    if xd.ndim < 3 or xd.shape[-3] != c_in:
        raise ValueError(
            f"conv1d_time: input {xd.shape} does not match weight {wd.shape} "
            f"(expected channel axis of size {c_in} at position -3)"
        )
    L = xd.shape[-1]
    if L < K:
        raise ValueError(f"conv1d_time: time axis {L} shorter than kernel {K}")
    Lp = L - K + 1
    win = np.lib.stride_tricks.sliding_window_view(xd, K, axis=-1)
    # win: (..., C_in, N, Lp, K) -> (..., N, Lp, C_in, K)
    moved = np.moveaxis(win, -4, -2)
    lead = moved.shape[:-2]
    flat = np.ascontiguousarray(moved).reshape(-1, c_in * K)
    w2 = wd.reshape(c_out, c_in * K)
    y = flat @ w2.T
    if b is not None:
        y = y + b.data
    y = y.reshape(*lead, c_out)
    y = np.ascontiguousarray(np.moveaxis(y, -1, -3))
    out = _make(y, (x, w) + ((b,) if b is not None else ()), None)
    def back(o=out):
        g = np.moveaxis(o.grad, -3, -1)  # (..., N, Lp, C_out)
        g2 = np.ascontiguousarray(g).reshape(-1, c_out)
        if b is not None and b.tracked:
            b.accumulate(g2.sum(axis=0))
        if w.tracked:
            w.accumulate((g2.T @ flat).reshape(c_out, c_in, K))
        if x.tracked:
            gwin = (g2 @ w2).reshape(*lead, c_in, K)
            gwin = np.moveaxis(gwin, -2, -4)  # (..., C_in, N, Lp, K)
            gx = np.zeros_like(xd)
            for k in range(K):
                gx[..., k : k + Lp] += gwin[..., k]
            x.accumulate(gx)
    out._backward = back if out._parents else None
    return out


def fixed_kernel_conv2d(x: Tensor, kernel: np.ndarray):
    """Valid 3x3 convolution with a constant kernel over the trailing two
    axes. Differentiates w.r.t. the input only (kernels are fixed
    Sobel-style constants)."""
    kd = np.asarray(kernel, dtype=np.float64)
    if kd.shape != (3, 3):
        raise ValueError(f"fixed_kernel_conv2d: kernel must be 3x3, got {kd.shape}")
    H, W = x.data.shape[-2:]
    if H < 3 or W < 3:
        raise ValueError(f"fixed_kernel_conv2d: map {H}x{W} smaller than kernel")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (3, 3), axis=(-2, -1))
    y = np.tensordot(win, kd, axes=([-2, -1], [0, 1]))
    out = _make(np.ascontiguousarray(y), (x,), None)
    def back(o=out):
        g = o.grad
        gx = np.zeros_like(x.data)
        for di in range(3):
            for dj in range(3):
                gx[..., di : di + H - 2, dj : dj + W - 2] += kd[di, dj] * g
        x.accumulate(gx)
    out._backward = back if out._parents else None
    return out


def adj_matmul(x: Tensor, adj):
    """Multiply a sparse (N, N) matrix along the node axis of (..., N, L).

    out[..., i, l] = sum_j adj[i, j] * x[..., j, l]. The matrix is a
    constant (graph structure); only the input receives gradient.
    """
    xd = x.data
    N = adj.shape[0]
    if xd.ndim < 2 or xd.shape[-2] != N:
        raise ValueError(
            f"adj_matmul: node axis of {xd.shape} does not match matrix "
            f"({N}, {N})"
        )
    moved = np.moveaxis(xd, -2, 0).reshape(N, -1)
    y = adj @ moved
    y = np.moveaxis(y.reshape((N,) + xd.shape[:-2] + xd.shape[-1:]), 0, -2)
    out = _make(np.ascontiguousarray(y), (x,), None)
    def back(o=out):
        g = np.moveaxis(o.grad, -2, 0).reshape(N, -1)
        gx = adj.T @ g
        gx = np.moveaxis(gx.reshape((N,) + xd.shape[:-2] + xd.shape[-1:]), 0, -2)
        x.accumulate(np.ascontiguousarray(gx))
    out._backward = back if out._parents else None
    return out


# ---------------------------------------------------------------------------
# backward pass and checking

def backward(loss: Tensor):
    """Populate gradients of every tracked tensor reachable from `loss`.

    Iterative reverse-topological walk; parameters not on the path keep
    grad = None (read as zeros)."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()
        if node._parents:
            node.grad = None  # intermediate grads are consumed; free eagerly


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def grad_check(f, wrt, step: float = 1e-5, limit: int | None = None) -> float:
    """Max relative error between backward() and central finite differences.

    `f` is a zero-argument callable returning a scalar Tensor, closing
    over the leaf tensors listed in `wrt`. Relative error uses
    denominator max(|analytic|, |numeric|, 1e-8) per element. With
    `limit`, at most that many evenly spaced elements are probed per
    tensor (deterministic; keeps whole-model checks tractable while
    still touching every tensor).
    """
    zero_grads(wrt)
    with Tape():
        loss = f()
        backward(loss)
    analytic = [
        np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt
    ]
    worst = 0.0
    for t, ga in zip(wrt, analytic):
        flat_grad = ga.ravel()
        size = t.data.size
        if limit is None or size <= limit:
            probe = range(size)
        else:
            probe = np.unique(np.linspace(0, size - 1, limit).astype(np.int64))
        for idx in probe:
            keep = t.data.flat[idx]
            t.data.flat[idx] = keep + step
            hi = float(f().data)
            t.data.flat[idx] = keep - step
            lo = float(f().data)
            t.data.flat[idx] = keep
            numeric = (hi - lo) / (2.0 * step)
            a = flat_grad[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
