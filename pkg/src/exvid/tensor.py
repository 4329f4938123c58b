"""Dense-tensor core with reverse-mode autodiff.

Storage is numpy (float32, or float16 for storage-only tensors); all
arithmetic runs in float32 master precision. Every op records a node on a
tape; ``backward`` walks the tape in reverse topological order and
accumulates gradients on the requires_grad leaves.

Determinism contract: re-running an op on identical inputs yields bitwise
identical output. Reductions delegate to numpy's fixed-order accumulation
and convolutions lower to a single im2col matmul, so there is no run-to-run
variation at the default single BLAS thread (see EXVIDEO_THREADS).
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

F32 = np.float32
F16 = np.float16


class ShapeError(ValueError):
    """Operand shapes violate an op's contract; message names the axis."""


class GradError(RuntimeError):
    """Autodiff misuse (non-scalar loss, NaN gradient, ...)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data, dtype):
    arr = np.asarray(data, dtype=dtype)
    return np.ascontiguousarray(arr)


class Tensor:
    """N-d array plus autodiff bookkeeping.

    ``data`` is float32 or float16 (storage only); ``grad`` is always
    float32 and only populated on requires_grad leaves.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype == F16:
                dtype = F16
            else:
                dtype = F32
        dtype = np.dtype(dtype)
        if dtype not in (np.dtype(F32), np.dtype(F16)):
            raise TypeError(f"unsupported dtype {dtype}; use float32 or float16")
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basics ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad}{tag})"

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def f32(self) -> np.ndarray:
        """Master-precision view of the payload (upcast float16 storage)."""
        if self.data.dtype == F16:
            return self.data.astype(F32)
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype, name=self.name)

    def half_(self) -> "Tensor":
        """Demote storage to float16 in place (mixed-precision policy)."""
        self.data = self.data.astype(F16)
        return self

    def float_(self) -> "Tensor":
        self.data = self.data.astype(F32)
        return self

    def zero_grad(self):
        self.grad = None

    def is_leaf(self) -> bool:
        return self._backward is None

    # -- operator sugar ---------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def permute(self, *axes):
        return permute(self, axes if len(axes) > 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    # -- backprop ---------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a scalar; accumulates leaf grads."""
        if self.size != 1:
            raise GradError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._backward is _FREED:
            raise GradError("backward() already ran here; the tape was freed")
        _backward_from(self, np.ones_like(self.data, dtype=F32))


def _freed_tape_marker():  # pragma: no cover - never called, identity sentinel
    raise AssertionError("freed tape sentinel invoked")


_FREED = _freed_tape_marker


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=F32))


def _node(out_data, parents, backward_fn) -> Tensor:
    """Wrap an op result; records the tape edge when grad mode is on."""
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _backward_from(root: Tensor, seed: np.ndarray):
    """Run the tape rooted at ``root``. Reentrant: grad buffers are local."""
    topo = []
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

    grads: dict[int, np.ndarray] = {id(root): seed.astype(F32)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            for parent, pg in node._backward(g):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg.astype(F32, copy=False)
        elif node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros(node.shape, dtype=F32)
            node.grad = node.grad + g
    # free the tape so activations are reclaimed
    for node in topo:
        if node._backward is not None:
            node._parents = ()
            node._backward = _FREED


def _sum_to_shape(g: np.ndarray, shape) -> np.ndarray:
    """Undo numpy broadcasting: reduce ``g`` down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.f32() + b.f32()

    def bwd(g):
        return ((a, _sum_to_shape(g, a.shape)), (b, _sum_to_shape(g, b.shape)))

    return _node(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.f32() - b.f32()

    def bwd(g):
        return ((a, _sum_to_shape(g, a.shape)), (b, _sum_to_shape(-g, b.shape)))

    return _node(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.f32(), b.f32()
    out = ad * bd

    def bwd(g):
        return ((a, _sum_to_shape(g * bd, a.shape)), (b, _sum_to_shape(g * ad, b.shape)))

    return _node(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.f32(), b.f32()
    out = ad / bd

    def bwd(g):
        ga = _sum_to_shape(g / bd, a.shape)
        gb = _sum_to_shape(-g * ad / (bd * bd), b.shape)
        return ((a, ga), (b, gb))

    return _node(out, (a, b), bwd)


def sqrt(a) -> Tensor:
    a = _coerce(a)
    out = np.sqrt(a.f32())

    def bwd(g):
        return ((a, g / (2.0 * out)),)

    return _node(out, (a,), bwd)


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = _coerce(a)
    ad = a.f32()
    sig = 1.0 / (1.0 + np.exp(-ad))
    out = ad * sig

    def bwd(g):
        return ((a, g * (sig * (1.0 + ad * (1.0 - sig)))),)

    return _node(out, (a,), bwd)


# -- shape ops -------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    old = a.shape
    out = a.f32().reshape(shape)

    def bwd(g):
        return ((a, g.reshape(old)),)

    return _node(out, (a,), bwd)


def permute(a, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.f32().transpose(axes))

    def bwd(g):
        return ((a, np.ascontiguousarray(g.transpose(inv))),)

    return _node(out, (a,), bwd)


def broadcast_to(a, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(shape)
    out = np.ascontiguousarray(np.broadcast_to(a.f32(), shape))

    def bwd(g):
        return ((a, _sum_to_shape(g, a.shape)),)

    return _node(out, (a,), bwd)


def concat(tensors, axis=0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    out = np.concatenate([t.f32() for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple((t, np.ascontiguousarray(p)) for t, p in zip(ts, pieces))

    return _node(out, tuple(ts), bwd)


def slice_rows(a, stop) -> Tensor:
    """First ``stop`` rows along axis 0; backward scatters into the rest."""
    a = _coerce(a)
    if not 0 < stop <= a.shape[0]:
        raise ShapeError(f"slice_rows: stop={stop} outside axis 0 extent {a.shape[0]}")
    out = np.ascontiguousarray(a.f32()[:stop])

    def bwd(g):
        full = np.zeros(a.shape, dtype=F32)
        full[:stop] = g
        return ((a, full),)

    return _node(out, (a,), bwd)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    shape = a.shape
    out = a.f32().sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return ((a, np.broadcast_to(g, shape).astype(F32)),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        ax = tuple(x % len(shape) for x in ax)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return ((a, np.ascontiguousarray(np.broadcast_to(g, shape))),)

    return _node(out, (a,), bwd)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for x in ax:
            count *= shape[x % len(shape)]
    s = reduce_sum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / count)


# -- matmul / attention -----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.f32(), b.f32()
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(
            f"matmul inner axis mismatch: lhs last axis {ad.shape[-1]} vs rhs axis -2 {bd.shape[-2]}"
        )
    out = ad @ bd

    def bwd(g):
        ga = _sum_to_shape(g @ bd.swapaxes(-1, -2), a.shape)
        gb = _sum_to_shape(ad.swapaxes(-1, -2) @ g, b.shape)
        return ((a, ga), (b, gb))

    return _node(out, (a, b), bwd)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _coerce(a)
    ad = a.f32()
    shifted = ad - ad.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((a, out * (g - dot)),)

    return _node(out, (a,), bwd)


def scaled_dot_product_attention(x, q_w, k_w, v_w, o_w) -> Tensor:
    """Single-head attention along axis -2 of ``x`` [..., T, C]."""
    c = x.shape[-1]
    for name, w in (("q_w", q_w), ("k_w", k_w), ("v_w", v_w), ("o_w", o_w)):
        if w.shape != (c, c):
            raise ShapeError(f"{name} must be ({c},{c}) to match the channel axis, got {w.shape}")
    q = matmul(x, q_w)
    k = matmul(x, k_w)
    v = matmul(x, v_w)
    scores = mul(matmul(q, permute(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))),
                 1.0 / math.sqrt(c))
    attn = softmax(scores)
    return matmul(matmul(attn, v), o_w)


def temporal_attention(x, q_w, k_w, v_w, o_w, positional_embedding) -> Tensor:
    """Frame-axis attention for ``x`` [BHW, T, C] with an additive [T, C] table."""
    t, c = x.shape[-2], x.shape[-1]
    pe = _coerce(positional_embedding)
    if pe.shape != (t, c):
        raise ShapeError(
            f"positional embedding rows {pe.shape} do not match frame axis T={t}, C={c}"
        )
    return scaled_dot_product_attention(add(x, pe), q_w, k_w, v_w, o_w)


# -- convolution -------------------------------------------------------------


def _conv_check(x_shape, w_shape, bias, nd, opname):
    c_in, kernel = w_shape[1], w_shape[2:]
    if len(w_shape) != nd + 2:
        raise ShapeError(f"{opname}: weight must have {nd + 2} axes, got {len(w_shape)}")
    for i, k in enumerate(kernel):
        if k % 2 == 0:
            raise ShapeError(f"{opname}: kernel axis {i} extent {k} is even; odd extents required")
    if x_shape[1] != c_in:
        raise ShapeError(
            f"{opname}: input channel axis C_in={x_shape[1]} does not match weight C_in={c_in}"
        )
    if bias is not None and bias.shape != (w_shape[0],):
        raise ShapeError(
            f"{opname}: bias axis must be (C_out={w_shape[0]},), got {bias.shape}"
        )


def _im2col(xd: np.ndarray, kernel) -> np.ndarray:
    """[B, C, *spatial] -> [B * prod(spatial), C * prod(kernel)] with same padding."""
    nd = len(kernel)
    pads = [(0, 0), (0, 0)] + [(k // 2, k // 2) for k in kernel]
    xp = np.pad(xd, pads)
    win = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=tuple(range(2, 2 + nd)))
    # [B, C, *spatial, *kernel] -> [B, *spatial, C, *kernel]
    order = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    cols = np.ascontiguousarray(win.transpose(order))
    b = xd.shape[0]
    spatial = int(np.prod(xd.shape[2:]))
    return cols.reshape(b * spatial, -1)


def _conv_raw(xd: np.ndarray, wd: np.ndarray, bd) -> np.ndarray:
    """Stride-1 same-padding correlation via one im2col + matmul."""
    b, _, *spatial = xd.shape
    c_out = wd.shape[0]
    cols = _im2col(xd, wd.shape[2:])
    out = cols @ wd.reshape(c_out, -1).T
    if bd is not None:
        out = out + bd
    out = out.reshape(b, *spatial, c_out)
    nd = len(spatial)
    return np.ascontiguousarray(out.transpose((0, nd + 1) + tuple(range(1, nd + 1))))


def _convnd(x, weight, bias, nd, opname) -> Tensor:
    x, weight = _coerce(x), _coerce(weight)
    bias = _coerce(bias) if bias is not None else None
    squeeze = x.ndim == nd + 1
    xd = x.f32()
    if squeeze:
        xd = xd[None]
    if xd.ndim != nd + 2:
        raise ShapeError(f"{opname}: input must have {nd + 1} or {nd + 2} axes, got {x.ndim}")
    wd = weight.f32()
    _conv_check(xd.shape, wd.shape, bias, nd, opname)
    bd = bias.f32() if bias is not None else None
    out = _conv_raw(xd, wd, bd)
    if squeeze:
        out = out[0]

    kernel = wd.shape[2:]
    c_out = wd.shape[0]

    def bwd(g):
        gd = g[None] if squeeze else g
        gx = gw = gb = None
        gflat = None
        if x.requires_grad:
            # input grad: full correlation with the flipped, channel-swapped kernel
            w_flip = wd[..., ::-1, ::-1] if nd == 2 else wd[..., ::-1, ::-1, ::-1]
            w_t = np.ascontiguousarray(w_flip.swapaxes(0, 1))
            gx = _conv_raw(gd, w_t, None)
            if squeeze:
                gx = gx[0]
        if weight.requires_grad:
            # weight grad: correlate input windows with the upstream grad
            cols = _im2col(xd, kernel)
            gflat = np.ascontiguousarray(gd.transpose((0,) + tuple(range(2, nd + 2)) + (1,)))
            gflat = gflat.reshape(-1, c_out)
            gw = (gflat.T @ cols).reshape(wd.shape)
        results = [(x, gx), (weight, gw)]
        if bias is not None:
            if bias.requires_grad:
                if gflat is None:
                    gflat = gd.transpose((0,) + tuple(range(2, nd + 2)) + (1,)).reshape(-1, c_out)
                gb = gflat.sum(axis=0)
            results.append((bias, gb))
        return tuple(results)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out, parents, bwd)


def conv2d(x, weight, bias=None) -> Tensor:
    """Stride-1 same-padding 2-d conv; x [B,C,H,W] or [C,H,W], weight [O,C,kH,kW]."""
    return _convnd(x, weight, bias, 2, "conv2d")


def conv3d(x, weight, bias=None) -> Tensor:
    """Stride-1 same-padding 3-d conv; x [B,C,T,H,W] or [C,T,H,W], weight [O,C,kT,kH,kW]."""
    return _convnd(x, weight, bias, 3, "conv3d")


# -- normalization / pooling --------------------------------------------------


def group_norm(x, gamma, beta, groups, eps=1e-5) -> Tensor:
    """GroupNorm over the channel axis of [N, C, *spatial]."""
    x = _coerce(x)
    c = x.shape[1]
    if c % groups != 0:
        raise ShapeError(f"group_norm: channel axis C={c} not divisible by groups={groups}")
    n = x.shape[0]
    rest = x.shape[2:]
    xg = reshape(x, (n, groups, c // groups) + rest)
    axes = tuple(range(2, xg.ndim))
    mu = reduce_mean(xg, axis=axes, keepdims=True)
    centered = sub(xg, mu)
    var = reduce_mean(mul(centered, centered), axis=axes, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    normed = reshape(normed, x.shape)
    gshape = (1, c) + (1,) * len(rest)
    return add(mul(normed, reshape(_coerce(gamma), gshape)), reshape(_coerce(beta), gshape))


def avg_pool2x(x) -> Tensor:
    """2x2 mean pooling on the trailing two axes."""
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x needs even trailing axes, got {(h, w)}")
    lead = x.shape[:-2]
    xr = reshape(x, lead + (h // 2, 2, w // 2, 2))
    return reduce_mean(xr, axis=(-3, -1))


def upsample_nearest2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling on the trailing two axes."""
    h, w = x.shape[-2], x.shape[-1]
    lead = x.shape[:-2]
    xr = reshape(x, lead + (h, 1, w, 1))
    xb = broadcast_to(xr, lead + (h, 2, w, 2))
    return reshape(xb, lead + (2 * h, 2 * w))


# -- gradient checkpointing ---------------------------------------------------


def checkpoint_segment(fn, *inputs) -> Tensor:
    """Run ``fn`` without taping; recompute it with tape during backward.

    The recomputed forward is bitwise identical to the discarded one (same
    ops, same order), so gradients match the non-checkpointed path.
    Parameters captured inside ``fn`` receive their grads during the
    segment replay; grads for ``inputs`` flow back to the outer tape.
    """
    if not _grad_enabled:
        return fn(*inputs)
    ins = tuple(_coerce(t) for t in inputs)
    with no_grad():
        out_val = fn(*ins)
    out = Tensor(out_val.data, dtype=out_val.data.dtype)
    out.requires_grad = True

    def bwd(g):
        copies = [Tensor(t.data, requires_grad=True, dtype=t.data.dtype) for t in ins]
        replay = fn(*copies)
        _backward_from(replay, g)
        return tuple((orig, c.grad) for orig, c in zip(ins, copies))

    out._parents = ins
    out._backward = bwd
    return out


def retained_activation_count(root: Tensor) -> int:
    """Number of tape nodes held alive by ``root`` (activation footprint)."""
    seen = set()
    count = 0
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._backward is not None:
            count += 1
        stack.extend(node._parents)
    return count


# -- optimizer ---------------------------------------------------------------


class AdamState:
    """First/second moments plus a shared step counter."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def ensure(self, name: str, shape):
        if name not in self.m:
            self.m[name] = np.zeros(shape, dtype=F32)
            self.v[name] = np.zeros(shape, dtype=F32)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-5):
    """One bias-corrected Adam update, in place on ``params``.

    ``params`` maps name -> Tensor, ``grads`` name -> float32 array. The
    default learning rate mirrors the training regime this artifact targets.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            continue
        if np.isnan(g).any():
            raise GradError(f"NaN gradient for parameter {name!r}")
        state.ensure(name, p.shape)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / F32(bc1)
        v_hat = v / F32(bc2)
        p.data = (p.f32() - F32(lr) * m_hat / (np.sqrt(v_hat) + F32(state.eps))).astype(
            p.data.dtype
        )
    return params, state
