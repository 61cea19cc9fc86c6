"""Minimal reverse-mode automatic differentiation on numpy arrays.

Operations executed while a :class:`Tape` is active, and touching at least
one tensor that requires a gradient, are appended to the tape together with
a vector-Jacobian product closure.  :func:`backward` replays the tape in
reverse execution order and accumulates gradients into leaf tensors
(usually :class:`Parameter` objects).

Only the operations needed by the U-net and the statistical losses are
provided: broadcasting arithmetic, power/log/exp, reductions, slicing,
1-D convolution and its transpose, batch normalisation, ReLU, pooling,
upsampling and cumulative sums.  :func:`custom_op` lets other modules
register fused primitives with hand-written gradients.
"""
from __future__ import annotations

import builtins
import math
import threading
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ContractError,
    DomainError,
    OptimizerError,
    ShapeError,
    TapeStateError,
    UninitializedStatsError,
)

# Upper bound on the number of elements of one im2col block.
_BLOCK_ELEMS = 1 << 21

_local = threading.local()


# ----------------------------------------------------------------------------
# Tensors and tape
# ----------------------------------------------------------------------------


class Tensor:
    """An n-dimensional real array that can take part in differentiation.

    Network activations use the ``(batch, channels, length)`` layout;
    statistics and losses produce lower-rank tensors.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)


class Parameter(Tensor):
    """A trainable leaf tensor whose gradient is accumulated by :func:`backward`."""

    def __init__(self, data, name, trainable=True):
        super().__init__(np.array(data, copy=True), requires_grad=trainable, name=name)
        self.trainable = bool(trainable)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: tuple
    vjp: object


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; operations run inside the ``with`` block are
    recorded.  A tape can be consumed by exactly one :func:`backward` call,
    after which it must be :meth:`reset` before reuse.
    """

    def __init__(self):
        self._nodes = []
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise TapeStateError("tape already consumed; call reset() first")
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    @property
    def ops(self):
        return [n.op for n in self._nodes]

    def record(self, node):
        if self.consumed:
            raise TapeStateError("cannot record on a consumed tape")
        self._nodes.append(node)

    def reset(self):
        self._nodes = []
        self.consumed = False


def _stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _needs_grad(x):
    return isinstance(x, Tensor) and x.requires_grad


def custom_op(name, out_data, inputs, vjp):
    """Wrap ``out_data`` in a tensor and register it on the active tape.

    ``vjp(g)`` must return one gradient array (or ``None``) per entry of
    ``inputs``.  Nothing is recorded when no tape is active or no input
    requires a gradient.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(_needs_grad(t) for t in inputs):
        out.requires_grad = True
        tape.record(_Node(name, out, tuple(inputs), vjp))
    return out


def backward(loss, tape):
    """Run the reverse pass of ``tape`` starting from the scalar ``loss``.

    Gradients are *added* to the ``grad`` attribute of every reachable leaf
    that requires a gradient.  The tape is consumed.
    """
    if tape.consumed:
        raise TapeStateError("tape already consumed")
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward() needs a scalar tensor loss")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {id(loss): loss}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node.out), None)
        leaves.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not _needs_grad(t):
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                leaves[key] = t
    for key, g in grads.items():
        t = leaves[key]
        g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
        if t.grad is None:
            t.grad = g.copy()
        else:
            t.grad = t.grad + g
    tape._nodes = []
    tape.consumed = True


# ----------------------------------------------------------------------------
# Pointwise arithmetic and reductions
# ----------------------------------------------------------------------------


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(a, b):
    sa, sb = np.shape(a), np.shape(b)
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"shapes {sa} and {sb} are not broadcast-compatible") from None


def add(a, b):
    da, db = _data(a), _data(b)
    _broadcast_check(da, db)
    sa, sb = np.shape(da), np.shape(db)
    return custom_op("add", da + db, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    da, db = _data(a), _data(b)
    _broadcast_check(da, db)
    sa, sb = np.shape(da), np.shape(db)
    return custom_op("sub", da - db, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    da, db = _data(a), _data(b)
    _broadcast_check(da, db)
    sa, sb = np.shape(da), np.shape(db)
    return custom_op("mul", da * db, (a, b),
                     lambda g: (_unbroadcast(g * db, sa), _unbroadcast(g * da, sb)))


def div(a, b):
    da, db = _data(a), _data(b)
    _broadcast_check(da, db)
    if np.any(np.asarray(db) == 0):
        raise DomainError("division by zero")
    sa, sb = np.shape(da), np.shape(db)
    out = da / db
    return custom_op("div", out, (a, b),
                     lambda g: (_unbroadcast(g / db, sa), _unbroadcast(-g * out / db, sb)))


def power(x, exponent):
    """``x ** exponent`` for a constant real exponent."""
    p = float(exponent)
    d = _data(x)
    if p != int(p) and np.any(d < 0):
        raise DomainError(f"non-integer power {p} of a negative value")
    if p < 0 and np.any(d == 0):
        raise DomainError(f"negative power {p} of zero")
    if p == int(p):
        out = d ** int(p)
        grad_base = lambda: p * d ** (int(p) - 1) if p != 0 else np.zeros_like(d)
    else:
        out = d ** p
        grad_base = lambda: p * d ** (p - 1)
    return custom_op("power", out, (x,), lambda g: (g * grad_base(),))


def log(x):
    d = _data(x)
    if np.any(d <= 0):
        raise DomainError("log of a non-positive value")
    return custom_op("log", np.log(d), (x,), lambda g: (g / d,))


def exp(x):
    out = np.exp(_data(x))
    return custom_op("exp", out, (x,), lambda g: (g * out,))


def maximum(x, floor):
    """Elementwise ``max(x, floor)`` with a constant floor (gradient 0 where clipped)."""
    d = _data(x)
    keep = d > floor
    return custom_op("maximum", np.where(keep, d, floor).astype(d.dtype), (x,),
                     lambda g: (g * keep,))


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    d = _data(x)
    out = np.sum(d, axis=axis, keepdims=keepdims)
    shape = d.shape
    return custom_op("sum", np.asarray(out), (x,),
                     lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)),))


def mean(x, axis=None, keepdims=False):
    d = _data(x)
    out = np.mean(d, axis=axis, keepdims=keepdims)
    count = d.size // max(np.asarray(out).size, 1)
    shape = d.shape
    return custom_op("mean", np.asarray(out), (x,),
                     lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)) / count,))


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None
               for i in items)


def getitem(x, index):
    d = _data(x)
    out = d[index]
    basic = _is_basic_index(index)

    def vjp(g):
        full = np.zeros_like(d)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return custom_op("getitem", np.array(out), (x,), vjp)


def reshape(x, shape):
    d = _data(x)
    return custom_op("reshape", d.reshape(shape), (x,), lambda g: (g.reshape(d.shape),))


def cast(x, dtype):
    d = _data(x)
    src = d.dtype
    return custom_op("cast", d.astype(dtype), (x,), lambda g: (g.astype(src),))


# ----------------------------------------------------------------------------
# Network primitives
# ----------------------------------------------------------------------------


def _require3(x, what):
    if x.ndim != 3:
        raise ShapeError(f"{what} expects a (batch, channels, length) tensor, got shape {x.shape}")


def same_padding(k):
    """Left/right zero padding that keeps the length of a stride-1 convolution."""
    left = (k - 1) // 2
    return left, k - 1 - left


def _corr(x, w, pad_left, pad_right):
    """Batched multi-channel cross-correlation, computed blockwise via im2col."""
    B, C, L = x.shape
    O, _, k = w.shape
    n_out = L + pad_left + pad_right - k + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad_left, pad_right)))
    w2 = w.reshape(O, C * k)
    y = np.empty((B, O, n_out), dtype=np.result_type(x, w))
    block = max(1, _BLOCK_ELEMS // (C * k))
    for b in range(B):
        for s in range(0, n_out, block):
            e = min(n_out, s + block)
            cols = sliding_window_view(xp[b, :, s:e + k - 1], e - s, axis=-1)
            y[b, :, s:e] = w2 @ cols.reshape(C * k, e - s)
    return y


def _corr_weight_grad(x, gy, k, pad_left, pad_right):
    B, C, L = x.shape
    O = gy.shape[1]
    n_out = gy.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad_left, pad_right)))
    gw = np.zeros((O, C * k), dtype=np.result_type(x, gy))
    block = max(1, _BLOCK_ELEMS // (C * k))
    for b in range(B):
        for s in range(0, n_out, block):
            e = min(n_out, s + block)
            cols = sliding_window_view(xp[b, :, s:e + k - 1], e - s, axis=-1)
            gw += gy[b, :, s:e] @ cols.reshape(C * k, e - s).T
    return gw.reshape(O, C, k)


def _flip_t(w):
    return np.ascontiguousarray(w[:, :, ::-1].transpose(1, 0, 2))


def _corr_op(name, x, wt, bias, w_eff, pad_left, pad_right, weight_from_eff):
    """Shared conv/transposed-conv machinery.

    ``w_eff`` is the (C_out, C_in, k) correlation kernel actually applied;
    ``weight_from_eff`` maps its gradient back onto the stored weight layout.
    """
    xd = _data(x)
    k = w_eff.shape[2]
    y = _corr(xd, w_eff, pad_left, pad_right)
    if bias is not None:
        y += _data(bias)[None, :, None]

    def vjp(g):
        gx = _corr(g, _flip_t(w_eff), k - 1 - pad_left, k - 1 - pad_right) if _needs_grad(x) else None
        gw = weight_from_eff(_corr_weight_grad(xd, g, k, pad_left, pad_right)) if _needs_grad(wt) else None
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    return custom_op(name, y, (x, wt, bias), vjp)


def conv1d(x, weight, bias=None):
    """Stride-1 "same" cross-correlation.

    ``weight`` has shape (C_out, C_in, k); padding is ``same_padding(k)``, so
    even kernels are padded one extra sample on the right.
    """
    xd, wd = _data(x), _data(weight)
    _require3(xd, "conv1d")
    if wd.ndim != 3 or wd.shape[1] != xd.shape[1]:
        raise ShapeError(f"conv1d: weight {wd.shape} incompatible with input channels {xd.shape[1]}")
    k = wd.shape[2]
    pl, pr = same_padding(k)
    if k < 1 or k > xd.shape[2] + pl + pr:
        raise ShapeError(f"conv1d: kernel size {k} exceeds padded length {xd.shape[2] + pl + pr}")
    return _corr_op("conv1d", x, weight, bias, wd, pl, pr, lambda gw: gw)


def conv_transpose1d(x, weight, bias=None):
    """Adjoint of :func:`conv1d` in its spatial part, plus a bias.

    ``weight`` has shape (C_in, C_out, k), the same array layout that
    :func:`conv1d` would use to map C_out channels to C_in.
    """
    xd, wd = _data(x), _data(weight)
    _require3(xd, "conv_transpose1d")
    if wd.ndim != 3 or wd.shape[0] != xd.shape[1]:
        raise ShapeError(
            f"conv_transpose1d: weight {wd.shape} incompatible with input channels {xd.shape[1]}")
    k = wd.shape[2]
    pl, pr = same_padding(k)
    if k < 1 or k > xd.shape[2] + pl + pr:
        raise ShapeError(f"conv_transpose1d: kernel size {k} exceeds padded length {xd.shape[2] + pl + pr}")
    return _corr_op("conv_transpose1d", x, weight, bias, _flip_t(wd), pr, pl, _flip_t)


@dataclass
class BatchNormStats:
    """Running statistics of one batch-norm layer (``None`` until first update)."""

    momentum: float = 0.1
    eps: float = 1e-5
    mean: np.ndarray | None = None
    var: np.ndarray | None = None

    @property
    def initialized(self):
        return self.mean is not None and self.var is not None


def batch_norm1d(x, gamma, beta, stats, mode="train"):
    """Per-channel normalisation over (batch, length) followed by ``gamma * xhat + beta``.

    In ``train`` mode batch statistics are used and ``stats`` is updated in
    place (unbiased variance for the running estimate); in ``eval`` mode the
    running statistics are used.
    """
    xd, gd, bd = _data(x), _data(gamma), _data(beta)
    _require3(xd, "batch_norm1d")
    if mode == "train":
        n = xd.shape[0] * xd.shape[2]
        if n < 2:
            raise ContractError("batch_norm1d in train mode needs batch*length >= 2")
        mu = xd.mean(axis=(0, 2))
        var = xd.var(axis=(0, 2))
        inv = 1.0 / np.sqrt(var + stats.eps)
        xhat = (xd - mu[None, :, None]) * inv[None, :, None]
        unbiased = var * (n / (n - 1))
        m = stats.momentum
        if stats.initialized:
            stats.mean = (1 - m) * stats.mean + m * mu
            stats.var = (1 - m) * stats.var + m * unbiased
        else:
            stats.mean = (1 - m) * np.zeros_like(mu) + m * mu
            stats.var = (1 - m) * np.ones_like(unbiased) + m * unbiased

        def vjp(g):
            gb = g.sum(axis=(0, 2))
            gg = (g * xhat).sum(axis=(0, 2))
            gxhat = g * gd[None, :, None]
            gx = (inv[None, :, None] / n) * (
                n * gxhat
                - gxhat.sum(axis=(0, 2))[None, :, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2))[None, :, None]
            )
            return gx, gg, gb

    elif mode == "eval":
        if not stats.initialized:
            raise UninitializedStatsError("batch norm evaluated before any running-stat update")
        inv = 1.0 / np.sqrt(stats.var + stats.eps)
        xhat = (xd - stats.mean[None, :, None]) * inv[None, :, None]

        def vjp(g):
            return (g * (gd * inv)[None, :, None],
                    (g * xhat).sum(axis=(0, 2)),
                    g.sum(axis=(0, 2)))
    else:
        raise ContractError(f"unknown batch-norm mode {mode!r}")
    y = (gd[None, :, None] * xhat + bd[None, :, None]).astype(xd.dtype, copy=False)
    return custom_op("batch_norm1d", y, (x, gamma, beta), vjp)


def relu(x):
    d = _data(x)
    mask = d > 0
    return custom_op("relu", np.where(mask, d, 0).astype(d.dtype), (x,), lambda g: (g * mask,))


def avg_pool1d(x):
    """Average pooling by a factor of two along the last axis."""
    d = _data(x)
    if d.shape[-1] % 2:
        raise ShapeError(f"avg_pool1d needs an even length, got {d.shape[-1]}")
    out = 0.5 * (d[..., 0::2] + d[..., 1::2])
    return custom_op("avg_pool1d", out, (x,), lambda g: (np.repeat(0.5 * g, 2, axis=-1),))


def upsample1d(x):
    """Nearest-neighbour upsampling by a factor of two along the last axis."""
    d = _data(x)
    return custom_op("upsample1d", np.repeat(d, 2, axis=-1), (x,),
                     lambda g: (g[..., 0::2] + g[..., 1::2],))


def cumsum(x):
    d = _data(x)
    return custom_op("cumsum", np.cumsum(d, axis=-1), (x,),
                     lambda g: (np.cumsum(g[..., ::-1], axis=-1)[..., ::-1],))


# ----------------------------------------------------------------------------
# Optimiser
# ----------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state, lr):
    """One bias-corrected Adam update of every trainable parameter.

    Gradients are left untouched; the caller resets them.
    """
    for p in params:
        if p.trainable and not np.all(np.isfinite(p.grad)):
            raise OptimizerError(f"non-finite gradient in parameter {p.name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        if not p.trainable:
            continue
        g = p.grad
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[p.name] = m
        state.v[p.name] = v
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.data.dtype, copy=False)


# ----------------------------------------------------------------------------
# Finite-difference gradient checking
# ----------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    op: str
    n_checked: int
    max_rel_err: float
    mean_rel_err: float

    def as_dict(self):
        return {"op": self.op, "n_checked": self.n_checked,
                "max_rel_err": self.max_rel_err, "mean_rel_err": self.mean_rel_err}


def grad_check(loss_fn, tensors, h=1e-6, max_coords=None, seed=0, op="", floor=1e-6):
    """Compare reverse-mode gradients with central finite differences.

    ``loss_fn()`` must rebuild the scalar loss from the current contents of
    ``tensors`` (float64 leaves with ``requires_grad``).  When ``max_coords``
    is given, a random subsample of roughly that many coordinates is spread
    over all tensors.  The relative error of a coordinate is
    ``|a - b| / max(|a|, |b|, floor * max|a|)``, where ``max|a|`` is taken over
    all analytic gradients, so structurally-zero gradients are compared on
    the scale of the whole gradient instead of against zero.
    """
    if not 1e-8 <= h <= 1e-3:
        raise ContractError(f"perturbation h={h} outside the supported range")
    for t in tensors:
        if t.data.dtype != np.float64:
            raise ContractError("grad_check requires float64 tensors")
    saved = [t.grad for t in tensors]
    for t in tensors:
        t.grad = np.zeros_like(t.data)
    tape = Tape()
    with tape:
        loss = loss_fn()
    backward(loss, tape)
    analytic = [t.grad.copy() for t in tensors]
    for t, g in zip(tensors, saved):
        t.grad = g if g is not None else (np.zeros_like(t.data) if isinstance(t, Parameter) else None)

    rng = np.random.default_rng(seed)
    total = builtins.sum(t.data.size for t in tensors)
    per_tensor = None if max_coords is None or max_coords >= total else max(
        1, math.ceil(max_coords / len(tensors)))
    scale = max(float(np.max(np.abs(g))) if g.size else 0.0 for g in analytic)
    tiny = floor * scale if scale > 0 else np.finfo(np.float64).tiny

    errs = []
    for t, g in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        if per_tensor is None or per_tensor >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=per_tensor, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn().data)
            flat[i] = orig - h
            fm = float(loss_fn().data)
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            a = float(g.reshape(-1)[i])
            errs.append(abs(a - fd) / max(abs(a), abs(fd), tiny))
    errs = np.asarray(errs) if errs else np.zeros(1)
    return GradCheckReport(op=op, n_checked=int(len(errs)),
                           max_rel_err=float(errs.max()), mean_rel_err=float(errs.mean()))

